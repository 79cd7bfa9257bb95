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

#include "kpfield/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kpfield/error.hpp"

namespace kpf {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

Points ConcatGrids(const std::vector<QueryGrid> &grids,
                   const RigidTransform *t = nullptr) {
    Index total = 0;
    for (const auto &g : grids) total += g.points.cols();
    Points out(3, total);
    Index at = 0;
    for (const auto &g : grids) {
        out.middleCols(at, g.points.cols()) =
            t ? ApplyTransform(g.points, *t) : g.points;
        at += g.points.cols();
    }
    return out;
}

std::vector<VectorXd> SplitByGrid(const VectorXd &flat,
                                  const std::vector<QueryGrid> &grids) {
    std::vector<VectorXd> out;
    out.reserve(grids.size());
    Index at = 0;
    for (const auto &g : grids) {
        out.emplace_back(flat.segment(at, g.points.cols()));
        at += g.points.cols();
    }
    return out;
}

VectorXd JoinGrids(const std::vector<VectorXd> &parts) {
    Index total = 0;
    for (const auto &p : parts) total += p.size();
    VectorXd out(total);
    Index at = 0;
    for (const auto &p : parts) {
        out.segment(at, p.size()) = p;
        at += p.size();
    }
    return out;
}

void CheckFiniteLoss(double value, const char *name) {
    if (!std::isfinite(value)) {
        Fail(ErrorCode::kNumeric, std::string("non-finite loss term ") + name);
    }
}

}  // namespace

OccupancyBatch SampleOccupancyBatch(const PointCloud &cloud, int n_pos,
                                    int n_neg, Rng &rng) {
    Require(n_pos >= 0 && n_neg >= 0, "occupancy sample counts must be >= 0");
    Require(n_pos <= cloud.size(),
            "more positive occupancy samples requested than cloud points");
    OccupancyBatch batch;
    batch.queries.resize(3, n_pos + n_neg);
    batch.labels.resize(n_pos + n_neg);
    std::vector<Index> order(static_cast<size_t>(cloud.size()));
    std::iota(order.begin(), order.end(), Index{0});
    for (int i = 0; i < n_pos; ++i) {
        std::uniform_int_distribution<Index> pick(i, cloud.size() - 1);
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(pick(rng))]);
        batch.queries.col(i) = cloud.point(order[static_cast<size_t>(i)]);
        batch.labels[i] = 1.0;
    }
    std::uniform_real_distribution<double> uniform(-0.5, 0.5);
    for (int i = 0; i < n_neg; ++i) {
        for (int a = 0; a < 3; ++a) batch.queries(a, n_pos + i) = uniform(rng);
        batch.labels[n_pos + i] = 0.0;
    }
    return batch;
}

double OccupancyLoss(const VectorXd &pred, const VectorXd &labels,
                     VectorXd *dpred) {
    Require(pred.size() == labels.size(),
            "occupancy loss: prediction and label counts differ");
    if (dpred != nullptr) *dpred = VectorXd::Zero(pred.size());
    if (pred.size() == 0) return 0.0;
    const double inv = 1.0 / static_cast<double>(pred.size());
    double sum = 0.0;
    for (Index i = 0; i < pred.size(); ++i) {
        const double p = std::clamp(pred[i], kProbClamp, 1.0 - kProbClamp);
        const double y = labels[i];
        sum -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
        if (dpred != nullptr && pred[i] > kProbClamp && pred[i] < 1.0 - kProbClamp) {
            (*dpred)[i] = inv * (-y / p + (1.0 - y) / (1.0 - p));
        }
    }
    return sum * inv;
}

double SurfaceConstraintLoss(const VectorXd &occupancy, const VectorXd &saliency,
                             VectorXd *docc, VectorXd *dsal) {
    Require(occupancy.size() == saliency.size(),
            "surface constraint: occupancy and saliency counts differ");
    const Index n = occupancy.size();
    if (n == 0) {
        if (docc) *docc = VectorXd();
        if (dsal) *dsal = VectorXd();
        return 0.0;
    }
    const double inv = 1.0 / static_cast<double>(n);
    if (docc != nullptr) *docc = -inv * saliency;
    if (dsal != nullptr) *dsal = inv * (1.0 - occupancy.array()).matrix();
    return inv * ((1.0 - occupancy.array()) * saliency.array()).sum();
}

double RepeatabilityLoss(const std::vector<VectorXd> &first,
                         const std::vector<VectorXd> &second,
                         std::vector<VectorXd> *dfirst,
                         std::vector<VectorXd> *dsecond) {
    Require(first.size() == second.size() && !first.empty(),
            "repeatability loss needs matching, non-empty grid lists");
    const double inv = 1.0 / static_cast<double>(first.size());
    if (dfirst) dfirst->resize(first.size());
    if (dsecond) dsecond->resize(first.size());
    double cos_sum = 0.0;
    for (size_t i = 0; i < first.size(); ++i) {
        const VectorXd &a = first[i];
        const VectorXd &b = second[i];
        Require(a.size() == b.size(), "paired saliency grids differ in size");
        const double na = a.norm(), nb = b.norm();
        const double da = na + kCosineEps, db = nb + kCosineEps;
        const double dot = a.dot(b);
        const double cos = dot / (da * db);
        cos_sum += cos;
        if (dfirst) {
            VectorXd g = b / (da * db);
            if (na > 0.0) g -= (cos / (da * na)) * a;
            (*dfirst)[i] = -inv * g;
        }
        if (dsecond) {
            VectorXd g = a / (da * db);
            if (nb > 0.0) g -= (cos / (db * nb)) * b;
            (*dsecond)[i] = -inv * g;
        }
    }
    return 1.0 - inv * cos_sum;
}

double SparsityLoss(const std::vector<VectorXd> &occupancy,
                    const std::vector<VectorXd> &saliency, double thr_o,
                    std::vector<VectorXd> *dsal) {
    Require(thr_o > 0.0 && thr_o <= 0.5, "thr_o must lie in (0, 0.5]");
    Require(occupancy.size() == saliency.size(),
            "sparsity loss: occupancy and saliency grid counts differ");
    const double cut = 1.0 - thr_o;
    std::vector<std::vector<Index>> members(saliency.size());
    int used = 0;
    for (size_t i = 0; i < saliency.size(); ++i) {
        Require(occupancy[i].size() == saliency[i].size(),
                "sparsity loss: grid sizes differ");
        for (Index j = 0; j < saliency[i].size(); ++j) {
            if (occupancy[i][j] > cut) members[i].push_back(j);
        }
        if (!members[i].empty()) ++used;
    }
    if (dsal != nullptr) {
        dsal->resize(saliency.size());
        for (size_t i = 0; i < saliency.size(); ++i) {
            (*dsal)[i] = VectorXd::Zero(saliency[i].size());
        }
    }
    if (used == 0) return 1.0;
    const double inv = 1.0 / used;
    double peak_sum = 0.0;
    for (size_t i = 0; i < saliency.size(); ++i) {
        const auto &m = members[i];
        if (m.empty()) continue;
        Index arg = m.front();
        double mean = 0.0;
        for (Index j : m) {
            if (saliency[i][j] > saliency[i][arg]) arg = j;
            mean += saliency[i][j];
        }
        mean /= static_cast<double>(m.size());
        peak_sum += saliency[i][arg] - mean;
        if (dsal != nullptr) {
            const double share = inv / static_cast<double>(m.size());
            for (Index j : m) (*dsal)[i][j] += share;
            (*dsal)[i][arg] -= inv;
        }
    }
    return 1.0 - inv * peak_sum;
}

double RepeatabilityLoss(const FieldModel &model, const PointCloud &p,
                         const PointCloud &tp,
                         const std::vector<QueryGrid> &grids,
                         const RigidTransform &t) {
    const FeatureVolume vol_p = model.Encode(p);
    const FeatureVolume vol_tp = model.Encode(tp);
    const QueryResult a = model.Query(vol_p, ConcatGrids(grids), kSaliencyHead);
    const QueryResult b = model.Query(vol_tp, ConcatGrids(grids, &t), kSaliencyHead);
    return RepeatabilityLoss(SplitByGrid(a.saliency, grids),
                             SplitByGrid(b.saliency, grids));
}

double SparsityLoss(const FieldModel &model, const PointCloud &p,
                    const std::vector<QueryGrid> &grids, double thr_o) {
    const FeatureVolume vol = model.Encode(p);
    const QueryResult r = model.Query(vol, ConcatGrids(grids), kBothHeads);
    return SparsityLoss(SplitByGrid(r.occupancy, grids),
                        SplitByGrid(r.saliency, grids), thr_o);
}

LossReport Combine(double l_o, double l_r, double l_m, double l_s,
                   const LossOptions &options) {
    LossReport r{l_o, l_r, l_m, l_s, 0.0};
    r.total = options.w_o * l_o + options.w_r * l_r + options.w_m * l_m +
              options.w_s * l_s;
    return r;
}

LossReport TotalLoss(const FieldModel &model, const TrainBatchItem &item,
                     const LossOptions &options, VectorXd *grad, double scale) {
    const bool backward = grad != nullptr;
    EncoderTape tape_p, tape_tp;
    const FeatureVolume vol_p = model.Encode(item.p, backward ? &tape_p : nullptr);
    const FeatureVolume vol_tp =
        model.Encode(item.tp, backward ? &tape_tp : nullptr);

    // Occupancy batch: occupancy loss and surface constraint share queries.
    QueryTape tq_occ;
    const QueryResult occ = model.Query(vol_p, item.occupancy.queries, kBothHeads,
                                        backward ? &tq_occ : nullptr);
    VectorXd d_occ_o, d_occ_m, d_sal_m;
    const double l_o = OccupancyLoss(occ.occupancy, item.occupancy.labels,
                                     backward ? &d_occ_o : nullptr);
    const double l_m = SurfaceConstraintLoss(occ.occupancy, occ.saliency,
                                             backward ? &d_occ_m : nullptr,
                                             backward ? &d_sal_m : nullptr);

    // Local grids on P and their transported copies on TP.
    QueryTape tq_grid, tq_tgrid;
    const QueryResult grid = model.Query(vol_p, ConcatGrids(item.grids), kBothHeads,
                                         backward ? &tq_grid : nullptr);
    const QueryResult tgrid =
        model.Query(vol_tp, ConcatGrids(item.grids, &item.t), kSaliencyHead,
                    backward ? &tq_tgrid : nullptr);
    const auto sal_grid = SplitByGrid(grid.saliency, item.grids);
    std::vector<VectorXd> d_sal_r, d_tsal_r, d_sal_s;
    const double l_r =
        RepeatabilityLoss(sal_grid, SplitByGrid(tgrid.saliency, item.grids),
                          backward ? &d_sal_r : nullptr,
                          backward ? &d_tsal_r : nullptr);
    const double l_s =
        SparsityLoss(SplitByGrid(grid.occupancy, item.grids), sal_grid,
                     options.thr_o, backward ? &d_sal_s : nullptr);

    CheckFiniteLoss(l_o, "l_o (occupancy)");
    CheckFiniteLoss(l_r, "l_r (repeatability)");
    CheckFiniteLoss(l_m, "l_m (surface constraint)");
    CheckFiniteLoss(l_s, "l_s (sparsity)");
    const LossReport report = Combine(l_o, l_r, l_m, l_s, options);
    if (!backward) return report;

    const VectorXd docc = scale * (options.w_o * d_occ_o + options.w_m * d_occ_m);
    const VectorXd dsal = scale * options.w_m * d_sal_m;
    MatrixXd dvol_p, dvol_tp;
    model.QueryBackward(vol_p, tq_occ, &docc, &dsal, grad, &dvol_p, nullptr);

    const VectorXd dsal_grid = scale * (options.w_r * JoinGrids(d_sal_r) +
                                        options.w_s * JoinGrids(d_sal_s));
    model.QueryBackward(vol_p, tq_grid, nullptr, &dsal_grid, grad, &dvol_p,
                        nullptr);
    const VectorXd dsal_tgrid = scale * options.w_r * JoinGrids(d_tsal_r);
    model.QueryBackward(vol_tp, tq_tgrid, nullptr, &dsal_tgrid, grad, &dvol_tp,
                        nullptr);

    model.EncodeBackward(tape_p, dvol_p, grad);
    model.EncodeBackward(tape_tp, dvol_tp, grad);
    return report;
}

}  // namespace kpf
