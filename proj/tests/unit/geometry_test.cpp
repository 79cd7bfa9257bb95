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

#include "kpfield/geometry.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <vector>

#include "kpfield/error.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace kpf {
namespace {

using testing::NmsOracle;
using testing::RandomPoints;
using testing::TrilinearOracle;

Eigen::MatrixXd PairwiseDistances(const Points &p) {
    Eigen::MatrixXd d(p.cols(), p.cols());
    for (Eigen::Index i = 0; i < p.cols(); ++i) {
        for (Eigen::Index j = 0; j < p.cols(); ++j) d(i, j) = (p.col(i) - p.col(j)).norm();
    }
    return d;
}

TEST(Normalize, AxisAlignedPair) {
    Points raw(3, 2);
    raw << 0, 2, 0, 0, 0, 0;
    const NormalizedCloud n = NormalizeCloud(raw);
    EXPECT_DOUBLE_EQ(n.params.scale, 2.0);
    EXPECT_TRUE(n.params.centroid.isApprox(Eigen::Vector3d(1, 0, 0)));
    EXPECT_DOUBLE_EQ(n.cloud.points()(0, 0), -0.5);
    EXPECT_DOUBLE_EQ(n.cloud.points()(0, 1), 0.5);
}

TEST(Normalize, RoundTripAndFitsCube) {
    Rng rng(3);
    Points raw = RandomPoints(rng, 100, 7.0);
    raw.row(1) *= 0.3;
    raw.colwise() += Eigen::Vector3d(10, -4, 2);
    const NormalizedCloud n = NormalizeCloud(raw);
    EXPECT_TRUE(n.cloud.IsCanonical());
    EXPECT_LT((n.params.ToRaw(n.cloud.points()) - raw).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Normalize, RejectsEmptyAndDegenerate) {
    EXPECT_THROW(NormalizeCloud(Points(3, 0)), Error);
    Points same(3, 4);
    same.colwise() = Eigen::Vector3d(1, 2, 3);
    EXPECT_THROW(NormalizeCloud(same), Error);
}

TEST(Transform, IdentityAndQuarterTurn) {
    Rng rng(1);
    const Points p = RandomPoints(rng, 10);
    EXPECT_EQ(ApplyTransform(p, RigidTransform::Identity()), p);
    const RigidTransform rz(Eigen::AngleAxisd(std::numbers::pi / 2, Eigen::Vector3d::UnitZ())
                                .toRotationMatrix(),
                            Eigen::Vector3d::Zero());
    EXPECT_LT((rz * Eigen::Vector3d(1, 0, 0) - Eigen::Vector3d(0, 1, 0)).norm(), 1e-12);
}

TEST(Transform, RejectsNonRotation) {
    Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
    m(0, 0) = -1.0;  // reflection
    EXPECT_THROW(RigidTransform(m, Eigen::Vector3d::Zero()), Error);
    m = 1.1 * Eigen::Matrix3d::Identity();
    EXPECT_THROW(RigidTransform(m, Eigen::Vector3d::Zero()), Error);
}

TEST(Transform, IsometryOnRandomClouds) {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const Points p = RandomPoints(rng, 40);
        const RigidTransform t = RandomSe3(rng, std::numbers::pi, 0.5);
        const Eigen::MatrixXd d0 = PairwiseDistances(p);
        const Eigen::MatrixXd d1 = PairwiseDistances(ApplyTransform(p, t));
        EXPECT_LT((d0 - d1).cwiseAbs().maxCoeff(), 1e-6);
    }
}

TEST(Transform, InverseAndComposition) {
    Rng rng(6);
    const RigidTransform a = RandomSe3(rng, 2.0, 0.3);
    const RigidTransform b = RandomSe3(rng, 1.0, 0.2);
    const Eigen::Vector3d x(0.1, -0.2, 0.3);
    EXPECT_LT(((a * b) * x - a * (b * x)).norm(), 1e-12);
    EXPECT_LT((a.Inverse() * (a * x) - x).norm(), 1e-12);
}

TEST(RandomSe3, TinyAngleIsNearIdentityAndSeeded) {
    Rng rng(7);
    const RigidTransform t = RandomSe3(rng, 1e-9, 0.0);
    EXPECT_LT((t.rotation() - Eigen::Matrix3d::Identity()).norm(), 1e-8);
    EXPECT_EQ(t.translation(), Eigen::Vector3d::Zero());
    Rng r1(42), r2(42);
    const RigidTransform a = RandomSe3(r1, 3.0, 1.0), b = RandomSe3(r2, 3.0, 1.0);
    EXPECT_EQ(a.rotation(), b.rotation());
    EXPECT_EQ(a.translation(), b.translation());
    EXPECT_THROW(RandomSe3(rng, 0.0, 0.0), Error);
    EXPECT_THROW(RandomSe3(rng, 4.0, 0.0), Error);
    EXPECT_THROW(RandomSe3(rng, 1.0, -1.0), Error);
}

TEST(RandomSe3, AngleHistogramMatchesUniformRotations) {
    // Haar measure on SO(3): the rotation angle has density (1 - cos t) / pi.
    Rng rng(11);
    constexpr int kSamples = 10000, kBins = 12;
    std::vector<int> counts(kBins, 0);
    for (int i = 0; i < kSamples; ++i) {
        const double angle = RandomSe3(rng, std::numbers::pi, 0.0).RotationAngle();
        ++counts[std::min(kBins - 1, static_cast<int>(angle / std::numbers::pi * kBins))];
    }
    for (int b = 0; b < kBins; ++b) {
        const double lo = std::numbers::pi * b / kBins, hi = std::numbers::pi * (b + 1) / kBins;
        const double p = ((hi - std::sin(hi)) - (lo - std::sin(lo))) / std::numbers::pi;
        const double mean = kSamples * p, sigma = std::sqrt(kSamples * p * (1 - p));
        EXPECT_LE(std::abs(counts[b] - mean), 3 * sigma + 1) << "bin " << b;
    }
}

TEST(RandomSe3, TranslationStaysInBall) {
    Rng rng(12);
    for (int i = 0; i < 500; ++i) EXPECT_LE(RandomSe3(rng, 1.0, 0.25).translation().norm(), 0.25);
}

TEST(Downsample, RateOneKeepsEverything) {
    Rng rng(1);
    const PointCloud c(RandomPoints(rng, 50));
    EXPECT_EQ(RandomDownsample(c, 1.0, rng).points(), c.points());
}

TEST(Downsample, SubsetSizeMembershipAndDeterminism) {
    Rng rng(2);
    const PointCloud c(RandomPoints(rng, 5000));
    Rng a(9), b(9);
    const PointCloud d = RandomDownsample(c, 8.0, a);
    ASSERT_EQ(d.size(), 625);
    EXPECT_EQ(RandomDownsample(c, 8.0, b).points(), d.points());
    std::set<std::vector<double>> members, seen;
    for (Eigen::Index i = 0; i < c.size(); ++i) {
        members.insert({c.points()(0, i), c.points()(1, i), c.points()(2, i)});
    }
    for (Eigen::Index i = 0; i < d.size(); ++i) {
        const std::vector<double> v{d.points()(0, i), d.points()(1, i), d.points()(2, i)};
        EXPECT_TRUE(members.count(v));
        EXPECT_TRUE(seen.insert(v).second) << "duplicate point";
    }
    EXPECT_THROW(RandomDownsample(c, 0.5, rng), Error);
}

TEST(Noise, ZeroSigmaAndMoments) {
    Rng rng(4);
    const PointCloud c(RandomPoints(rng, 5000));
    EXPECT_EQ(AddGaussianNoise(c, 0.0, rng).points(), c.points());
    Rng a(8), b(8);
    const PointCloud n = AddGaussianNoise(c, 0.06, a);
    EXPECT_EQ(AddGaussianNoise(c, 0.06, b).points(), n.points());
    const Points delta = n.points() - c.points();
    for (int axis = 0; axis < 3; ++axis) {
        const double mean = delta.row(axis).mean();
        const double sd = std::sqrt((delta.row(axis).array() - mean).square().mean());
        EXPECT_GE(sd, 0.054);
        EXPECT_LE(sd, 0.066);
    }
    EXPECT_THROW(AddGaussianNoise(c, -0.1, rng), Error);
}

TEST(QueryGrids, SingleGridGeometry) {
    Rng rng(3);
    const PointCloud c(RandomPoints(rng, 30, 0.4));
    const auto grids = BuildQueryGrids(c, 1, 8.0, {8, 8, 8}, rng);
    ASSERT_EQ(grids.size(), 1u);
    const QueryGrid &g = grids[0];
    ASSERT_EQ(g.points.cols(), 512);
    EXPECT_DOUBLE_EQ(g.extent, 0.125);
    const Eigen::Vector3d lo = g.points.rowwise().minCoeff();
    const Eigen::Vector3d hi = g.points.rowwise().maxCoeff();
    EXPECT_LT((hi - lo - Eigen::Vector3d::Constant(0.125)).norm(), 1e-12);
    EXPECT_LT((0.5 * (lo + hi) - g.center).norm(), 1e-12);
    // x-major ordering: neighbours along z are one column apart.
    const double step = 0.125 / 7.0;
    EXPECT_NEAR(g.points(2, 1) - g.points(2, 0), step, 1e-12);
    EXPECT_NEAR(g.points(1, 8) - g.points(1, 0), step, 1e-12);
    EXPECT_NEAR(g.points(0, 64) - g.points(0, 0), step, 1e-12);
}

TEST(QueryGrids, CentersAreCloudMembers) {
    Rng rng(4);
    Points two(3, 2);
    two << 0.1, -0.1, 0.2, -0.2, 0.3, -0.3;
    const auto both = BuildQueryGrids(PointCloud(two), 2, 6.0, {4, 4, 4}, rng);
    std::set<double> xs{both[0].center.x(), both[1].center.x()};
    EXPECT_EQ(xs, (std::set<double>{-0.1, 0.1}));

    const PointCloud c(RandomPoints(rng, 20));
    for (const auto &g : BuildQueryGrids(c, 50, 6.0, {3, 4, 5}, rng)) {
        EXPECT_EQ(g.points.cols(), 60);
        bool member = false;
        for (Eigen::Index i = 0; i < c.size(); ++i) member |= (c.point(i) == g.center);
        EXPECT_TRUE(member);
    }
}

TEST(Trilinear, VoxelCentersAndMidpoints) {
    Rng rng(5);
    FeatureVolume v = FeatureVolume::Canonical(3, {4, 5, 6});
    v.values = Eigen::MatrixXd::Random(3, 4 * 5 * 6);
    Points at(3, 2);
    at.col(0) = v.VoxelCenter(1, 2, 3);
    at.col(1) = 0.5 * (v.VoxelCenter(1, 2, 3) + v.VoxelCenter(2, 2, 3));
    const Eigen::MatrixXd s = TrilinearSample(v, at);
    EXPECT_LT((s.col(0) - v.values.col(v.Index(1, 2, 3))).norm(), 1e-12);
    EXPECT_LT((s.col(1) - 0.5 * (v.values.col(v.Index(1, 2, 3)) +
                                  v.values.col(v.Index(2, 2, 3))))
                  .norm(),
              1e-12);
}

TEST(Trilinear, MatchesCornerOracleIncludingOutside) {
    Rng rng(6);
    FeatureVolume v = FeatureVolume::Canonical(4, {5, 6, 7});
    v.values = Eigen::MatrixXd::Random(4, 5 * 6 * 7);
    const Points q = RandomPoints(rng, 100, 0.6);  // some fall outside the cube
    const Eigen::MatrixXd s = TrilinearSample(v, q);
    for (Eigen::Index m = 0; m < q.cols(); ++m) {
        EXPECT_LT((s.col(m) - TrilinearOracle(v, q.col(m))).cwiseAbs().maxCoeff(), 1e-6);
    }
}

TEST(Trilinear, ExactOnAffineFields) {
    FeatureVolume v = FeatureVolume::Canonical(1, {6, 6, 6});
    const Eigen::Vector3d a(0.3, -1.2, 2.0);
    for (int i = 0; i < 6; ++i) {
        for (int j = 0; j < 6; ++j) {
            for (int k = 0; k < 6; ++k) v.values(0, v.Index(i, j, k)) = a.dot(v.VoxelCenter(i, j, k)) + 0.7;
        }
    }
    Rng rng(7);
    const double inner = 0.5 - v.spacing.maxCoeff() / 2;
    const Points q = RandomPoints(rng, 200, inner);
    const Eigen::MatrixXd s = TrilinearSample(v, q);
    for (Eigen::Index m = 0; m < q.cols(); ++m) EXPECT_NEAR(s(0, m), a.dot(q.col(m)) + 0.7, 1e-6);
}

TEST(Trilinear, RejectsThinVolume) {
    EXPECT_THROW(FeatureVolume::Canonical(1, {1, 4, 4}), Error);
    FeatureVolume v = FeatureVolume::Canonical(1, {4, 4, 4});
    v.dims.d = 1;
    EXPECT_THROW(TrilinearSample(v, Points::Zero(3, 1)), Error);
}

TEST(Nms, ZeroRadiusKeepsAllSorted) {
    Points c(3, 4);
    c.setZero();
    const std::vector<double> s{0.2, 0.9, 0.5, 0.9};
    EXPECT_EQ(Nms(c, s, 0.0), (std::vector<int>{1, 3, 2, 0}));
}

TEST(Nms, CloseLowerScoreIsSuppressed) {
    Points c(3, 2);
    c << 0, 0.05, 0, 0, 0, 0;
    const std::vector<double> s{0.3, 0.8};
    EXPECT_EQ(Nms(c, s, 0.1), std::vector<int>{1});
    EXPECT_THROW(Nms(c, std::vector<double>{1.0}, 0.1), Error);
}

TEST(Nms, MatchesReferenceAndIsMaximalIndependent) {
    Rng rng(8);
    std::uniform_real_distribution<double> u(0, 1);
    for (int trial = 0; trial < 50; ++trial) {
        const Eigen::Index n = 1 + trial * 2;
        const Points c = RandomPoints(rng, n);
        std::vector<double> s(static_cast<size_t>(n));
        // Quantized scores so ties actually happen.
        for (auto &x : s) x = std::round(u(rng) * 5) / 5;
        const double radius = 0.05 + 0.3 * u(rng);
        const auto got = Nms(c, s, radius);
        EXPECT_EQ(got, NmsOracle(c, s, radius));
        for (size_t i = 0; i < got.size(); ++i) {
            for (size_t j = i + 1; j < got.size(); ++j) {
                EXPECT_GE((c.col(got[i]) - c.col(got[j])).norm(), radius);
            }
        }
        for (Eigen::Index i = 0; i < n; ++i) {
            bool covered = false;
            for (int k : got) covered |= (c.col(i) - c.col(k)).norm() < radius || k == i;
            EXPECT_TRUE(covered);
        }
    }
}

TEST(Snap, CoincidentTieAndExhaustive) {
    Points cloud(3, 3);
    cloud << 0, 1, -1, 0, 0, 0, 0, 0, 0;
    Points k(3, 2);
    k.col(0) = cloud.col(1);
    k.col(1) = Eigen::Vector3d(0.5, 0, 0);  // equidistant from points 0 and 1
    const Points snapped = SnapToInput(k, PointCloud(cloud));
    EXPECT_EQ(snapped.col(0), cloud.col(1));
    EXPECT_EQ(snapped.col(1), cloud.col(0));

    Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
        const Points c = RandomPoints(rng, 1 + trial);
        const Points q = RandomPoints(rng, 20);
        const auto idx = NearestIndices(q, c);
        for (Eigen::Index i = 0; i < q.cols(); ++i) {
            EXPECT_EQ(idx[static_cast<size_t>(i)], testing::NearestOracle(q.col(i), c));
        }
    }
    EXPECT_THROW(NearestIndices(k, Points(3, 0)), Error);
}

}  // namespace
}  // namespace kpf
