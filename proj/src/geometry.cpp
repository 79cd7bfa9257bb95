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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "kpfield/error.hpp"

namespace kpf {

namespace {

constexpr double kPi = 3.14159265358979323846;

void CheckFinite(const Points &points) {
    for (Eigen::Index i = 0; i < points.cols(); ++i) {
        if (!points.col(i).allFinite()) {
            Fail(ErrorCode::kInvalidArgument,
                 "non-finite coordinate at point " + std::to_string(i));
        }
    }
}

Eigen::Vector3d RandomUnitVector(Rng &rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::Vector3d v;
    do {
        v = {normal(rng), normal(rng), normal(rng)};
    } while (v.norm() < 1e-12);
    return v.normalized();
}

// Inverse CDF of the uniform-SO(3) rotation angle, restricted to
// [0, max_angle]. The density is proportional to 1 - cos(theta).
double SampleRotationAngle(Rng &rng, double max_angle) {
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    const double u = uniform(rng);
    const double target = u * (max_angle - std::sin(max_angle));
    double lo = 0.0, hi = max_angle;
    for (int it = 0; it < 100; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid - std::sin(mid) < target) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

}  // namespace

PointCloud::PointCloud(Points points) : points_(std::move(points)) {
    Require(points_.cols() > 0, "point cloud must contain at least one point");
    CheckFinite(points_);
}

bool PointCloud::IsCanonical(double tol) const {
    return points_.size() == 0 ||
           points_.cwiseAbs().maxCoeff() <= 0.5 + tol;
}

Points NormParams::ToCanonical(const Points &raw) const {
    return (raw.colwise() - centroid) / scale;
}

Points NormParams::ToRaw(const Points &canonical) const {
    return (canonical * scale).colwise() + centroid;
}

NormalizedCloud NormalizeCloud(const Points &raw) {
    Require(raw.cols() > 0, "cannot normalize an empty point cloud");
    CheckFinite(raw);
    const Eigen::Vector3d lo = raw.rowwise().minCoeff();
    const Eigen::Vector3d hi = raw.rowwise().maxCoeff();
    NormParams params;
    params.centroid = 0.5 * (lo + hi);
    params.scale = (hi - lo).maxCoeff();
    Require(params.scale > 0.0,
            "degenerate point cloud: all points are identical");
    Points canonical = params.ToCanonical(raw);
    // Guard against the last ulp pushing a bound outside the cube.
    canonical = canonical.cwiseMax(-0.5).cwiseMin(0.5);
    return {PointCloud(std::move(canonical)), params};
}

RigidTransform::RigidTransform()
    : rotation_(Eigen::Matrix3d::Identity()),
      translation_(Eigen::Vector3d::Zero()) {}

RigidTransform::RigidTransform(const Eigen::Matrix3d &rotation,
                               const Eigen::Vector3d &translation)
    : rotation_(rotation), translation_(translation) {
    Require(rotation.allFinite() && translation.allFinite(),
            "rigid transform must be finite");
    const double ortho =
        (rotation.transpose() * rotation - Eigen::Matrix3d::Identity())
            .cwiseAbs()
            .maxCoeff();
    Require(ortho <= 1e-6 && std::abs(rotation.determinant() - 1.0) <= 1e-6,
            "rotation is not orthonormal with determinant +1");
}

RigidTransform RigidTransform::operator*(const RigidTransform &other) const {
    RigidTransform out;
    out.rotation_ = rotation_ * other.rotation_;
    out.translation_ = rotation_ * other.translation_ + translation_;
    return out;
}

RigidTransform RigidTransform::Inverse() const {
    RigidTransform out;
    out.rotation_ = rotation_.transpose();
    out.translation_ = -(rotation_.transpose() * translation_);
    return out;
}

double RigidTransform::RotationAngle() const {
    const double c = std::clamp((rotation_.trace() - 1.0) / 2.0, -1.0, 1.0);
    return std::acos(c);
}

Points ApplyTransform(const Points &points, const RigidTransform &t) {
    return (t.rotation() * points).colwise() + t.translation();
}

PointCloud ApplyTransform(const PointCloud &cloud, const RigidTransform &t) {
    return PointCloud(ApplyTransform(cloud.points(), t));
}

RigidTransform RandomSe3(Rng &rng, double max_angle, double max_translation) {
    Require(max_angle > 0.0 && max_angle <= kPi,
            "max_angle must lie in (0, pi]");
    Require(max_translation >= 0.0, "max_translation must be non-negative");
    const Eigen::Vector3d axis = RandomUnitVector(rng);
    const double angle = SampleRotationAngle(rng, max_angle);
    Eigen::Matrix3d rotation = Eigen::AngleAxisd(angle, axis).toRotationMatrix();

    Eigen::Vector3d translation = Eigen::Vector3d::Zero();
    if (max_translation > 0.0) {
        std::uniform_real_distribution<double> uniform(0.0, 1.0);
        const Eigen::Vector3d dir = RandomUnitVector(rng);
        translation = dir * max_translation * std::cbrt(uniform(rng));
    }
    return RigidTransform(rotation, translation);
}

PointCloud RandomDownsample(const PointCloud &cloud, double rate, Rng &rng) {
    Require(rate >= 1.0, "downsample rate must be >= 1");
    const auto n = cloud.size();
    const auto keep = static_cast<Eigen::Index>(std::floor(n / rate));
    Require(keep >= 1, "downsample rate leaves no points");
    std::vector<Eigen::Index> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    for (Eigen::Index i = 0; i < keep; ++i) {
        std::uniform_int_distribution<Eigen::Index> pick(i, n - 1);
        std::swap(order[i], order[pick(rng)]);
    }
    order.resize(static_cast<size_t>(keep));
    std::sort(order.begin(), order.end());
    Points out(3, keep);
    for (Eigen::Index i = 0; i < keep; ++i) out.col(i) = cloud.points().col(order[i]);
    return PointCloud(std::move(out));
}

PointCloud AddGaussianNoise(const PointCloud &cloud, double sigma, Rng &rng) {
    Require(sigma >= 0.0, "noise sigma must be non-negative");
    if (sigma == 0.0) return cloud;
    std::normal_distribution<double> normal(0.0, sigma);
    Points out = cloud.points();
    for (Eigen::Index i = 0; i < out.cols(); ++i) {
        for (int a = 0; a < 3; ++a) out(a, i) += normal(rng);
    }
    return PointCloud(std::move(out));
}

Points MakeLattice(const Eigen::Vector3d &center, double extent,
                   const GridResolution &res) {
    Require(res.h >= 2 && res.w >= 2 && res.d >= 2,
            "grid resolution must be at least 2 per axis");
    Points out(3, res.Count());
    const Eigen::Vector3d lo = center.array() - extent / 2.0;
    const Eigen::Vector3d step(extent / (res.h - 1), extent / (res.w - 1),
                               extent / (res.d - 1));
    Eigen::Index c = 0;
    for (int i = 0; i < res.h; ++i) {
        for (int j = 0; j < res.w; ++j) {
            for (int k = 0; k < res.d; ++k) {
                out.col(c++) = lo + Eigen::Vector3d(i * step.x(), j * step.y(),
                                                    k * step.z());
            }
        }
    }
    return out;
}

std::vector<QueryGrid> BuildQueryGrids(const PointCloud &cloud, int n,
                                       double grid_scale,
                                       const GridResolution &res, Rng &rng) {
    Require(n >= 1, "number of grids must be >= 1");
    Require(grid_scale > 0.0, "grid scale U must be positive");
    Require(cloud.size() > 0, "cannot build grids on an empty cloud");
    const auto count = cloud.size();
    std::vector<Eigen::Index> centers;
    if (n <= count) {
        std::vector<Eigen::Index> order(static_cast<size_t>(count));
        std::iota(order.begin(), order.end(), Eigen::Index{0});
        for (int i = 0; i < n; ++i) {
            std::uniform_int_distribution<Eigen::Index> pick(i, count - 1);
            std::swap(order[i], order[pick(rng)]);
        }
        centers.assign(order.begin(), order.begin() + n);
    } else {
        std::uniform_int_distribution<Eigen::Index> pick(0, count - 1);
        for (int i = 0; i < n; ++i) centers.push_back(pick(rng));
    }
    std::vector<QueryGrid> grids;
    grids.reserve(static_cast<size_t>(n));
    for (Eigen::Index idx : centers) {
        QueryGrid g;
        g.center = cloud.point(idx);
        g.extent = 1.0 / grid_scale;
        g.resolution = res;
        g.points = MakeLattice(g.center, g.extent, res);
        grids.push_back(std::move(g));
    }
    return grids;
}

FeatureVolume FeatureVolume::Canonical(int channels,
                                       const GridResolution &dims) {
    Require(dims.h >= 2 && dims.w >= 2 && dims.d >= 2,
            "feature volume needs at least 2 voxels per axis");
    Require(channels >= 1, "feature volume needs at least one channel");
    FeatureVolume v;
    v.dims = dims;
    v.spacing = {1.0 / dims.h, 1.0 / dims.w, 1.0 / dims.d};
    v.origin = Eigen::Vector3d::Constant(-0.5) + 0.5 * v.spacing;
    v.values = Eigen::MatrixXd::Zero(channels, dims.Count());
    return v;
}

Eigen::Vector3d FeatureVolume::VoxelCenter(int i, int j, int k) const {
    return origin + Eigen::Vector3d(i, j, k).cwiseProduct(spacing);
}

TrilinearStencil ComputeStencil(const FeatureVolume &volume,
                                const Eigen::Vector3d &q) {
    const std::array<int, 3> n = {volume.dims.h, volume.dims.w, volume.dims.d};
    std::array<int, 3> base{};
    std::array<double, 3> t{};
    std::array<double, 3> dt{};  // d t / d q, zero when clamped
    for (int a = 0; a < 3; ++a) {
        const double u = (q[a] - volume.origin[a]) / volume.spacing[a];
        double uc = u;
        dt[a] = 1.0 / volume.spacing[a];
        if (uc <= 0.0) {
            uc = 0.0;
            if (u < 0.0) dt[a] = 0.0;
        } else if (uc >= n[a] - 1) {
            uc = n[a] - 1;
            if (u > n[a] - 1) dt[a] = 0.0;
        }
        int b = static_cast<int>(std::floor(uc));
        b = std::min(b, n[a] - 2);
        base[a] = b;
        t[a] = uc - b;
    }
    TrilinearStencil s;
    int c = 0;
    for (int di = 0; di < 2; ++di) {
        const double wx = di ? t[0] : 1.0 - t[0];
        const double dx = di ? dt[0] : -dt[0];
        for (int dj = 0; dj < 2; ++dj) {
            const double wy = dj ? t[1] : 1.0 - t[1];
            const double dy = dj ? dt[1] : -dt[1];
            for (int dk = 0; dk < 2; ++dk) {
                const double wz = dk ? t[2] : 1.0 - t[2];
                const double dz = dk ? dt[2] : -dt[2];
                s.index[c] = volume.Index(base[0] + di, base[1] + dj,
                                          base[2] + dk);
                s.weight[c] = wx * wy * wz;
                s.dweight[c] = {dx * wy * wz, wx * dy * wz, wx * wy * dz};
                ++c;
            }
        }
    }
    return s;
}

Eigen::MatrixXd TrilinearSample(const FeatureVolume &volume,
                                const Points &queries) {
    Require(volume.dims.h >= 2 && volume.dims.w >= 2 && volume.dims.d >= 2,
            "feature volume needs at least 2 voxels per axis");
    Eigen::MatrixXd out(volume.channels(), queries.cols());
    for (Eigen::Index m = 0; m < queries.cols(); ++m) {
        Require(queries.col(m).allFinite(), "non-finite query coordinate");
        const TrilinearStencil s = ComputeStencil(volume, queries.col(m));
        out.col(m).setZero();
        for (int c = 0; c < 8; ++c) {
            if (s.weight[c] != 0.0) {
                out.col(m) += s.weight[c] * volume.values.col(s.index[c]);
            }
        }
    }
    return out;
}

std::vector<int> Nms(const Points &candidates, std::span<const double> scores,
                     double radius) {
    Require(static_cast<Eigen::Index>(scores.size()) == candidates.cols(),
            "NMS: candidate and score counts differ");
    Require(radius >= 0.0, "NMS radius must be non-negative");
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });
    const double r2 = radius * radius;
    std::vector<int> selected;
    for (int idx : order) {
        bool keep = true;
        for (int s : selected) {
            if ((candidates.col(idx) - candidates.col(s)).squaredNorm() < r2) {
                keep = false;
                break;
            }
        }
        if (keep) selected.push_back(idx);
    }
    return selected;
}

std::vector<int> NearestIndices(const Points &queries, const Points &cloud) {
    Require(cloud.cols() > 0, "nearest-neighbour search on an empty cloud");
    std::vector<int> out(static_cast<size_t>(queries.cols()));
    for (Eigen::Index q = 0; q < queries.cols(); ++q) {
        Eigen::Index best = 0;
        (cloud.colwise() - queries.col(q)).colwise().squaredNorm().minCoeff(&best);
        out[static_cast<size_t>(q)] = static_cast<int>(best);
    }
    return out;
}

Points SnapToInput(const Points &keypoints, const PointCloud &cloud) {
    const std::vector<int> idx = NearestIndices(keypoints, cloud.points());
    Points out(3, keypoints.cols());
    for (Eigen::Index i = 0; i < keypoints.cols(); ++i) {
        out.col(i) = cloud.points().col(idx[static_cast<size_t>(i)]);
    }
    return out;
}

}  // namespace kpf
