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

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "kpfield/field_model.hpp"
#include "kpfield/geometry.hpp"
#include "kpfield/losses.hpp"

namespace kpf {

struct AugmentConfig {
    bool enabled = true;
    double max_downsample = 4.0;   // rate drawn uniformly in [1, max]
    double max_noise_sigma = 0.01;  // sigma drawn uniformly in [0, max]
    double max_angle = 3.14159265358979323846;
    double max_translation = 0.0;
    /// When positive, P itself is rotated by a random transform of at most
    /// this angle before the pair is built. Useful when a single shape is
    /// overfit and should still be seen in many orientations.
    double input_max_angle = 0.0;

    bool operator==(const AugmentConfig &) const = default;
};

struct TrainConfig {
    ModelConfig model;
    int n_points = 2048;
    GridResolution grid_resolution{8, 8, 8};
    double grid_scale = 8.0;  // U; grids have side 1/U
    int n_grids = 500;
    int batch_size = 16;
    int epochs_first = 40;
    int epochs_total = 60;
    /// Passes over the dataset per epoch. Lets a tiny dataset reach a useful
    /// number of steps without one checkpoint per step.
    int dataset_repeat = 1;
    double lr = 1e-4;
    double lr_drop_factor = 10.0;
    int n_pos = 2048;
    int n_neg = 2048;
    LossOptions loss;  // carries thr_o and the term weights
    bool symmetric = false;
    AugmentConfig aug;
    std::uint64_t seed = 0;

    void Validate() const;
    bool operator==(const TrainConfig &) const = default;
};

struct AdamState {
    Eigen::VectorXd m;
    Eigen::VectorXd v;
    std::int64_t step = 0;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

struct TrainState {
    FieldModel model;
    AdamState adam;
    int epoch = 0;        // epochs completed
    std::int64_t step = 0;  // optimizer steps taken
    Rng rng;
    std::vector<LossReport> history;  // per-epoch mean

    TrainState(const TrainConfig &config);
};

/// Samples T, builds TP = noise(downsample(T P)), n grids on P and an
/// occupancy batch on P.
TrainBatchItem MakeTrainingPair(const PointCloud &cloud,
                                const TrainConfig &config, Rng &rng);

double LrSchedule(int epoch, const TrainConfig &config);

/// One Adam step on the batch-mean total loss. Items are evaluated on up to
/// `workers` threads; gradients are reduced in item order so the result does
/// not depend on the worker count.
LossReport TrainStep(TrainState &state, const std::vector<TrainBatchItem> &items,
                     const TrainConfig &config, double lr, int workers = 1);

struct FitOptions {
    /// Called after every step with the epoch, step and its report.
    std::function<void(int epoch, std::int64_t step, const LossReport &, double lr)>
        on_step;
    /// Called after every epoch, e.g. to write a checkpoint.
    std::function<void(const TrainState &)> on_epoch;
    int workers = 1;
    /// Stop after this many epochs in total (0 = run to epochs_total).
    int stop_after_epoch = 0;
};

/// Runs epochs from state.epoch to config.epochs_total. Batches are filled
/// cyclically from the dataset in order.
void Fit(TrainState &state, const std::vector<PointCloud> &dataset,
         const TrainConfig &config, const FitOptions &options = {});

std::string FormatProgress(int epoch, std::int64_t step, const LossReport &r,
                           double lr);

}  // namespace kpf
