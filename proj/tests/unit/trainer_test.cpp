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

#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "kpfield/dataio.hpp"
#include "kpfield/error.hpp"
#include "kpfield/synthetic.hpp"
#include "test_support.hpp"

namespace kpf {
namespace {

TrainConfig TinyConfig() {
    TrainConfig c;
    c.model = testing::TinyLiteConfig();
    c.n_points = 256;
    c.grid_resolution = {4, 4, 4};
    c.grid_scale = 8.0;
    c.n_grids = 4;
    c.batch_size = 2;
    c.epochs_first = 3;
    c.epochs_total = 4;
    c.lr = 1e-3;
    c.n_pos = c.n_neg = 64;
    c.seed = 17;
    return c;
}

PointCloud Sphere(int n, std::uint64_t seed = 1) {
    SyntheticShapeSpec s;
    s.kind = ShapeKind::kSphere;
    s.n_points = n;
    s.seed = seed;
    return GenerateSynthetic(s).cloud;
}

void ExpectSameItem(const TrainBatchItem &a, const TrainBatchItem &b) {
    EXPECT_EQ(a.p.points(), b.p.points());
    EXPECT_EQ(a.tp.points(), b.tp.points());
    EXPECT_EQ(a.t.rotation(), b.t.rotation());
    EXPECT_EQ(a.occupancy.queries, b.occupancy.queries);
    ASSERT_EQ(a.grids.size(), b.grids.size());
    for (size_t i = 0; i < a.grids.size(); ++i) EXPECT_EQ(a.grids[i].points, b.grids[i].points);
}

TEST(TrainingPair, DisabledAugmentationKeepsTheCloud) {
    TrainConfig c = TinyConfig();
    c.aug.enabled = false;
    Rng rng(1);
    const PointCloud p = Sphere(256);
    const TrainBatchItem item = MakeTrainingPair(p, c, rng);
    EXPECT_EQ(item.tp.points(), item.p.points());
    EXPECT_EQ(item.p.points(), p.points());
    EXPECT_EQ(item.t.rotation(), Eigen::Matrix3d::Identity());
    EXPECT_EQ(item.t.translation(), Eigen::Vector3d::Zero());
}

TEST(TrainingPair, ModelNet40Sizes) {
    const TrainConfig c = Preset("modelnet40").train;
    Rng rng(2);
    const TrainBatchItem item = MakeTrainingPair(Sphere(6000), c, rng);
    EXPECT_EQ(item.p.size(), 5000);
    ASSERT_EQ(item.grids.size(), 500u);
    EXPECT_NEAR(item.grids[0].extent, 1.0 / 6.0, 1e-15);
    EXPECT_EQ(item.grids[0].points.cols(), 512);
}

TEST(TrainingPair, SeededTwiceIsIdentical) {
    const TrainConfig c = TinyConfig();
    const PointCloud p = Sphere(512);
    Rng a(3), b(3);
    ExpectSameItem(MakeTrainingPair(p, c, a), MakeTrainingPair(p, c, b));
}

TEST(TrainingPair, AugmentationKeepsCorrespondence) {
    // Saliency replaced by a function of world position: the P-side value at
    // q and the TP-side value at T q agree, so the loss must vanish.
    const TrainConfig c = TinyConfig();
    Rng rng(4);
    const TrainBatchItem item = MakeTrainingPair(Sphere(512), c, rng);
    const double margin = 5 * c.aug.max_noise_sigma;
    const RigidTransform inv = item.t.Inverse();
    auto g = [](const Eigen::Vector3d &x) {
        return 0.5 + 0.4 * std::sin(7 * x.x()) * std::cos(5 * x.y() + x.z());
    };
    std::vector<Eigen::VectorXd> first, second;
    for (const QueryGrid &grid : item.grids) {
        const Points moved = ApplyTransform(grid.points, item.t);
        EXPECT_LE(moved.cwiseAbs().maxCoeff(), 0.5 * std::sqrt(3.0) + 1.0 / c.grid_scale + margin);
        Eigen::VectorXd a(grid.points.cols()), b(grid.points.cols());
        for (Eigen::Index i = 0; i < grid.points.cols(); ++i) {
            a[i] = g(grid.points.col(i));
            b[i] = g(inv * moved.col(i));
        }
        first.push_back(a);
        second.push_back(b);
    }
    EXPECT_NEAR(RepeatabilityLoss(first, second), 0.0, 1e-7);  // epsilon-guarded norms
}

TEST(LrSchedule, DropsAfterFirstPhase) {
    TrainConfig kp = Preset("keypointnet").train;
    EXPECT_DOUBLE_EQ(LrSchedule(39, kp), 1e-4);
    EXPECT_DOUBLE_EQ(LrSchedule(40, kp), 1e-5);
    TrainConfig dm = Preset("3dmatch").train;
    EXPECT_DOUBLE_EQ(LrSchedule(17, dm), 1e-5);
    TrainConfig one = TinyConfig();
    one.lr = 1e-4;
    one.epochs_first = 1;
    EXPECT_DOUBLE_EQ(LrSchedule(0, one), 1e-4);
    EXPECT_THROW(LrSchedule(-1, one), Error);
    EXPECT_THROW(LrSchedule(one.epochs_total, one), Error);
}

TEST(TrainStep, ZeroLearningRateLeavesParameters) {
    const TrainConfig c = TinyConfig();
    TrainState s(c);
    Rng rng(5);
    const auto item = MakeTrainingPair(Sphere(256), c, rng);
    const Eigen::VectorXd before = s.model.theta();
    const LossReport r = TrainStep(s, {item, item}, c, 0.0);
    EXPECT_EQ(s.model.theta(), before);
    EXPECT_TRUE(std::isfinite(r.total));
    EXPECT_EQ(s.step, 1);
}

TEST(TrainStep, ResultDoesNotDependOnWorkerCount) {
    const TrainConfig c = TinyConfig();
    Rng rng(6);
    const PointCloud p = Sphere(256);
    std::vector<TrainBatchItem> items;
    for (int i = 0; i < 3; ++i) items.push_back(MakeTrainingPair(p, c, rng));
    TrainState a(c), b(c);
    const LossReport ra = TrainStep(a, items, c, 1e-3, 1);
    const LossReport rb = TrainStep(b, items, c, 1e-3, 3);
    EXPECT_EQ(ra, rb);
    EXPECT_EQ(a.model.theta(), b.model.theta());
}

TEST(TrainStep, NonFiniteLossNamesTheTerm) {
    const TrainConfig c = TinyConfig();
    TrainState s(c);
    s.model.theta().setConstant(std::nan(""));
    Rng rng(7);
    const auto item = MakeTrainingPair(Sphere(256), c, rng);
    try {
        TrainStep(s, {item}, c, 1e-3);
        FAIL() << "expected a numeric error";
    } catch (const Error &e) {
        EXPECT_EQ(e.code(), ErrorCode::kNumeric);
        EXPECT_NE(std::string(e.what()).find("l_"), std::string::npos) << e.what();
    }
}

TEST(TrainStep, OverfitSphereHalvesOccupancyLoss) {
    TrainConfig c = TinyConfig();
    c.batch_size = 1;
    c.n_pos = c.n_neg = 256;
    const PointCloud p = Sphere(512);
    TrainState s(c);
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 200; ++step) {
        const auto item = MakeTrainingPair(p, c, s.rng);
        const LossReport r = TrainStep(s, {item}, c, 3e-3);
        if (step == 0) first = r.l_o;
        if (step >= 190) last += r.l_o / 10;
    }
    EXPECT_LE(last, 0.5 * first) << "first " << first << " last " << last;
}

TEST(Fit, EpochCallbacksHistoryAndDeterminism) {
    TrainConfig c = TinyConfig();
    c.epochs_first = 3;
    c.epochs_total = 5;
    const std::vector<PointCloud> data{Sphere(256, 1), Sphere(256, 2), Sphere(256, 3)};
    TrainState a(c), b(c);
    int epochs = 0;
    std::int64_t steps = 0;
    FitOptions opts;
    opts.on_epoch = [&](const TrainState &) { ++epochs; };
    opts.on_step = [&](int, std::int64_t, const LossReport &, double) { ++steps; };
    Fit(a, data, c, opts);
    EXPECT_EQ(epochs, 5);
    EXPECT_EQ(steps, 5 * 2);  // ceil(3 / 2) batches per epoch
    EXPECT_EQ(a.history.size(), 5u);
    Fit(b, data, c);
    EXPECT_EQ(a.history, b.history);
    EXPECT_EQ(a.model.theta(), b.model.theta());
}

TEST(Fit, ResumeMatchesUninterruptedRun) {
    TrainConfig c = TinyConfig();
    c.epochs_first = 2;
    c.epochs_total = 4;
    const std::vector<PointCloud> data{Sphere(256, 4), Sphere(256, 5)};
    TrainState full(c);
    Fit(full, data, c);

    TrainState head(c);
    FitOptions stop;
    stop.stop_after_epoch = 2;
    Fit(head, data, c, stop);
    EXPECT_EQ(head.epoch, 2);
    const Checkpoint ck = MakeCheckpoint(head);
    TrainState tail(c);
    RestoreState(ck, tail);
    Fit(tail, data, c);
    EXPECT_EQ(tail.history, full.history);
    EXPECT_EQ(tail.model.theta(), full.model.theta());
    EXPECT_EQ(tail.adam.m, full.adam.m);
    EXPECT_EQ(tail.step, full.step);
}

TEST(Fit, SymmetricModeRuns) {
    TrainConfig c = TinyConfig();
    c.symmetric = true;
    TrainState s(c);
    FitOptions o;
    o.stop_after_epoch = 1;
    Fit(s, {Sphere(256)}, c, o);
    ASSERT_EQ(s.history.size(), 1u);
    EXPECT_TRUE(std::isfinite(s.history[0].total));
}

TEST(FormatProgress, FieldsInOrder) {
    const std::string line = FormatProgress(3, 42, LossReport{0.1, 0.2, 0.3, 0.4, 1.0}, 1e-4);
    EXPECT_EQ(line.rfind("epoch=3 step=42 l_o=", 0), 0u) << line;
    for (const char *key : {"l_r=", "l_m=", "l_s=", "total=", "lr="}) {
        EXPECT_NE(line.find(key), std::string::npos) << key;
    }
}

TEST(TrainConfig, ValidationRejectsBadSchedules) {
    TrainConfig c = TinyConfig();
    c.epochs_first = c.epochs_total;
    EXPECT_THROW(c.Validate(), Error);
    c = TinyConfig();
    c.loss.thr_o = 0.6;
    EXPECT_THROW(c.Validate(), Error);
    c = TinyConfig();
    c.batch_size = 0;
    EXPECT_THROW(TrainState{c}, Error);
}

}  // namespace
}  // namespace kpf
