// Copyright 2026 The kpfield Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Core>
#include <vector>

#include "kpfield/field_model.hpp"
#include "kpfield/geometry.hpp"

namespace kpf {

struct OccupancyBatch {
    Points queries;
    Eigen::VectorXd labels;  // 1 for surface samples, 0 for free-space samples
};

struct LossReport {
    double l_o = 0.0;
    double l_r = 0.0;
    double l_m = 0.0;
    double l_s = 0.0;
    double total = 0.0;

    bool operator==(const LossReport &) const = default;
};

struct LossOptions {
    double thr_o = 0.5;
    double w_o = 1.0;
    double w_r = 1.0;
    double w_m = 1.0;
    double w_s = 1.0;
};

/// One training view pair: the cloud P, its transformed and augmented copy TP,
/// the transform T, local grids on P and an occupancy batch on P.
struct TrainBatchItem {
    PointCloud p;
    PointCloud tp;
    RigidTransform t;
    std::vector<QueryGrid> grids;
    OccupancyBatch occupancy;
};

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kCosineEps = 1e-8;

/// Positives drawn from the cloud without replacement, negatives uniform in
/// the canonical cube. Positives come first.
OccupancyBatch SampleOccupancyBatch(const PointCloud &cloud, int n_pos,
                                    int n_neg, Rng &rng);

/// Mean binary cross-entropy with predictions clamped to
/// [kProbClamp, 1 - kProbClamp]. Writes dL/dpred when `dpred` is non-null.
double OccupancyLoss(const Eigen::VectorXd &pred, const Eigen::VectorXd &labels,
                     Eigen::VectorXd *dpred = nullptr);

/// Mean of (1 - occupancy) * saliency over a shared query set.
double SurfaceConstraintLoss(const Eigen::VectorXd &occupancy,
                             const Eigen::VectorXd &saliency,
                             Eigen::VectorXd *docc = nullptr,
                             Eigen::VectorXd *dsal = nullptr);

/// 1 - mean cosine similarity between paired saliency grids.
double RepeatabilityLoss(const std::vector<Eigen::VectorXd> &first,
                         const std::vector<Eigen::VectorXd> &second,
                         std::vector<Eigen::VectorXd> *dfirst = nullptr,
                         std::vector<Eigen::VectorXd> *dsecond = nullptr);

/// 1 - mean over non-empty grids of (max - mean) saliency, restricted to the
/// points whose occupancy exceeds 1 - thr_o. Returns 1 when every grid is
/// empty. The occupancy mask carries no gradient.
double SparsityLoss(const std::vector<Eigen::VectorXd> &occupancy,
                    const std::vector<Eigen::VectorXd> &saliency, double thr_o,
                    std::vector<Eigen::VectorXd> *dsal = nullptr);

/// Model-level forms evaluating the fields themselves.
double RepeatabilityLoss(const FieldModel &model, const PointCloud &p,
                         const PointCloud &tp,
                         const std::vector<QueryGrid> &grids,
                         const RigidTransform &t);
double SparsityLoss(const FieldModel &model, const PointCloud &p,
                    const std::vector<QueryGrid> &grids, double thr_o);

/// Evaluates all four terms on one item. When `grad` is non-null the gradient
/// of `scale * total` with respect to the model parameters is accumulated
/// into it.
LossReport TotalLoss(const FieldModel &model, const TrainBatchItem &item,
                     const LossOptions &options, Eigen::VectorXd *grad = nullptr,
                     double scale = 1.0);

LossReport Combine(double l_o, double l_r, double l_m, double l_s,
                   const LossOptions &options);

}  // namespace kpf
