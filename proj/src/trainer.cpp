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

#include "kpfield/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <thread>

#include "kpfield/error.hpp"

namespace kpf {

void TrainConfig::Validate() const {
    model.Validate();
    Require(n_points >= 1, "n_points must be >= 1");
    Require(grid_resolution.h >= 2 && grid_resolution.w >= 2 && grid_resolution.d >= 2,
            "grid_resolution components must be >= 2");
    Require(grid_scale > 0.0, "grid_scale must be positive");
    Require(n_grids >= 1, "n_grids must be >= 1");
    Require(batch_size >= 1, "batch_size must be >= 1");
    Require(epochs_first > 0 && epochs_first < epochs_total,
            "epochs must satisfy 0 < epochs_first < epochs_total");
    Require(dataset_repeat >= 1, "dataset_repeat must be >= 1");
    Require(lr >= 0.0 && lr_drop_factor > 0.0, "invalid learning rate settings");
    Require(n_pos >= 0 && n_neg >= 0 && n_pos + n_neg >= 1,
            "occupancy batch must not be empty");
    Require(loss.thr_o > 0.0 && loss.thr_o <= 0.5, "thr_o must lie in (0, 0.5]");
    Require(aug.max_downsample >= 1.0, "max_downsample must be >= 1");
    Require(aug.max_noise_sigma >= 0.0, "max_noise_sigma must be >= 0");
    Require(aug.max_angle > 0.0 && aug.max_angle <= 3.14159265358979323846,
            "max_angle must lie in (0, pi]");
    Require(aug.max_translation >= 0.0, "max_translation must be >= 0");
    Require(aug.input_max_angle >= 0.0 && aug.input_max_angle <= 3.14159265358979323846,
            "input_max_angle must lie in [0, pi]");
}

TrainState::TrainState(const TrainConfig &config)
    : model((config.Validate(), config.model), config.seed), rng(config.seed ^ 0x9e3779b97f4a7c15ULL) {
    adam.m = Eigen::VectorXd::Zero(model.theta().size());
    adam.v = Eigen::VectorXd::Zero(model.theta().size());
}

TrainBatchItem MakeTrainingPair(const PointCloud &cloud, const TrainConfig &config,
                                Rng &rng) {
    PointCloud p = cloud;
    if (p.size() > config.n_points) {
        p = RandomDownsample(p, static_cast<double>(p.size()) / config.n_points, rng);
    }
    if (config.aug.enabled && config.aug.input_max_angle > 0.0) {
        p = ApplyTransform(p, RandomSe3(rng, config.aug.input_max_angle, 0.0));
    }

    TrainBatchItem item;
    if (config.aug.enabled) {
        item.t = RandomSe3(rng, config.aug.max_angle, config.aug.max_translation);
        std::uniform_real_distribution<double> rate(1.0, config.aug.max_downsample);
        std::uniform_real_distribution<double> sigma(0.0, config.aug.max_noise_sigma);
        PointCloud tp = ApplyTransform(p, item.t);
        const double r = rate(rng);
        if (std::floor(tp.size() / r) >= 1) tp = RandomDownsample(tp, r, rng);
        item.tp = AddGaussianNoise(tp, sigma(rng), rng);
    } else {
        item.tp = p;
    }
    item.grids = BuildQueryGrids(p, config.n_grids, config.grid_scale,
                                 config.grid_resolution, rng);
    item.occupancy = SampleOccupancyBatch(
        p, static_cast<int>(std::min<Eigen::Index>(config.n_pos, p.size())),
        config.n_neg, rng);
    item.p = std::move(p);
    return item;
}

double LrSchedule(int epoch, const TrainConfig &config) {
    Require(epoch >= 0 && epoch < config.epochs_total, "epoch out of range");
    return epoch < config.epochs_first ? config.lr
                                       : config.lr / config.lr_drop_factor;
}

namespace {

// The pair seen from the other side: TP becomes the anchor.
TrainBatchItem Reversed(const TrainBatchItem &item, const TrainConfig &config,
                        Rng &rng) {
    TrainBatchItem r;
    r.p = item.tp;
    r.tp = item.p;
    r.t = item.t.Inverse();
    r.grids = BuildQueryGrids(r.p, config.n_grids, config.grid_scale,
                              config.grid_resolution, rng);
    r.occupancy = SampleOccupancyBatch(
        r.p, static_cast<int>(std::min<Eigen::Index>(config.n_pos, r.p.size())),
        config.n_neg, rng);
    return r;
}

LossReport Accumulate(const LossReport &a, const LossReport &b, double w) {
    return {a.l_o + w * b.l_o, a.l_r + w * b.l_r, a.l_m + w * b.l_m,
            a.l_s + w * b.l_s, a.total + w * b.total};
}

}  // namespace

LossReport TrainStep(TrainState &state, const std::vector<TrainBatchItem> &items,
                     const TrainConfig &config, double lr, int workers) {
    Require(!items.empty(), "train step needs at least one item");
    Require(lr >= 0.0, "learning rate must be non-negative");

    std::vector<const TrainBatchItem *> work;
    std::vector<TrainBatchItem> reversed;
    if (config.symmetric) reversed.reserve(items.size());
    for (const auto &item : items) {
        work.push_back(&item);
        if (config.symmetric) reversed.push_back(Reversed(item, config, state.rng));
    }
    for (const auto &item : reversed) work.push_back(&item);

    const size_t n = work.size();
    const double scale = 1.0 / static_cast<double>(n);
    const Eigen::Index dim = state.model.theta().size();
    std::vector<Eigen::VectorXd> grads(n);
    std::vector<LossReport> reports(n);
    std::vector<std::exception_ptr> failures(n);
    const auto run = [&](size_t begin, size_t stride) {
        for (size_t i = begin; i < n; i += stride) {
            try {
                grads[i] = Eigen::VectorXd::Zero(dim);
                reports[i] = TotalLoss(state.model, *work[i], config.loss,
                                       &grads[i], scale);
            } catch (...) {
                failures[i] = std::current_exception();
            }
        }
    };
    const size_t threads = std::clamp<size_t>(static_cast<size_t>(std::max(workers, 1)), 1, n);
    if (threads == 1) {
        run(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (size_t t = 0; t < threads; ++t) pool.emplace_back(run, t, threads);
        for (auto &th : pool) th.join();
    }
    for (const auto &f : failures) {
        if (f) std::rethrow_exception(f);
    }

    Eigen::VectorXd grad = Eigen::VectorXd::Zero(dim);
    LossReport mean;
    for (size_t i = 0; i < n; ++i) {
        grad += grads[i];
        mean = Accumulate(mean, reports[i], scale);
    }
    if (!grad.allFinite()) Fail(ErrorCode::kNumeric, "non-finite gradient");

    AdamState &adam = state.adam;
    ++adam.step;
    adam.m = kAdamBeta1 * adam.m + (1.0 - kAdamBeta1) * grad;
    adam.v = kAdamBeta2 * adam.v + (1.0 - kAdamBeta2) * grad.cwiseAbs2();
    if (lr > 0.0) {
        const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(adam.step));
        const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(adam.step));
        state.model.theta().array() -=
            lr * (adam.m.array() / c1) / ((adam.v.array() / c2).sqrt() + kAdamEps);
    }
    ++state.step;
    return mean;
}

void Fit(TrainState &state, const std::vector<PointCloud> &dataset,
         const TrainConfig &config, const FitOptions &options) {
    Require(!dataset.empty(), "training dataset is empty");
    config.Validate();
    const size_t per_epoch = dataset.size() * static_cast<size_t>(config.dataset_repeat);
    const size_t b = static_cast<size_t>(config.batch_size);
    const size_t batches = (per_epoch + b - 1) / b;
    const int last = options.stop_after_epoch > 0
                         ? std::min(options.stop_after_epoch, config.epochs_total)
                         : config.epochs_total;

    for (int epoch = state.epoch; epoch < last; ++epoch) {
        const double lr = LrSchedule(epoch, config);
        LossReport epoch_mean;
        for (size_t j = 0; j < batches; ++j) {
            std::vector<TrainBatchItem> items;
            items.reserve(b);
            for (size_t i = 0; i < b; ++i) {
                const PointCloud &cloud = dataset[(j * b + i) % dataset.size()];
                items.push_back(MakeTrainingPair(cloud, config, state.rng));
            }
            const LossReport r = TrainStep(state, items, config, lr, options.workers);
            epoch_mean = Accumulate(epoch_mean, r, 1.0 / static_cast<double>(batches));
            if (options.on_step) options.on_step(epoch, state.step, r, lr);
        }
        state.history.push_back(epoch_mean);
        state.epoch = epoch + 1;
        if (options.on_epoch) options.on_epoch(state);
    }
}

std::string FormatProgress(int epoch, std::int64_t step, const LossReport &r,
                           double lr) {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "epoch=%d step=%lld l_o=%.6f l_r=%.6f l_m=%.6f l_s=%.6f "
                  "total=%.6f lr=%.3g",
                  epoch, static_cast<long long>(step), r.l_o, r.l_r, r.l_m, r.l_s,
                  r.total, lr);
    return buf;
}

}  // namespace kpf
