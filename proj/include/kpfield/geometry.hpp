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
#include <Eigen/Geometry>
#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace kpf {

using Rng = std::mt19937_64;
using Points = Eigen::Matrix3Xd;

/// A point cloud expressed in the canonical frame [-0.5, 0.5]^3.
class PointCloud {
public:
    PointCloud() = default;
    /// Validates finiteness and non-emptiness. Coordinates are not required to
    /// lie inside the cube: augmented views may stick out slightly.
    explicit PointCloud(Points points);

    const Points &points() const { return points_; }
    Eigen::Index size() const { return points_.cols(); }
    Eigen::Vector3d point(Eigen::Index i) const { return points_.col(i); }

    /// True when every coordinate lies in [-0.5 - tol, 0.5 + tol].
    bool IsCanonical(double tol = 1e-9) const;

private:
    Points points_;
};

struct NormParams {
    Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
    double scale = 1.0;

    Points ToCanonical(const Points &raw) const;
    Points ToRaw(const Points &canonical) const;
};

struct NormalizedCloud {
    PointCloud cloud;
    NormParams params;
};

/// Centers the bounding box at the origin and scales its longest side to 1.
NormalizedCloud NormalizeCloud(const Points &raw);

class RigidTransform {
public:
    RigidTransform();
    /// Throws unless `rotation` is orthonormal with det +1 (tolerance 1e-6).
    RigidTransform(const Eigen::Matrix3d &rotation,
                   const Eigen::Vector3d &translation);

    static RigidTransform Identity() { return {}; }

    const Eigen::Matrix3d &rotation() const { return rotation_; }
    const Eigen::Vector3d &translation() const { return translation_; }

    Eigen::Vector3d operator*(const Eigen::Vector3d &p) const {
        return rotation_ * p + translation_;
    }
    /// Composition: (a * b)(x) = a(b(x)).
    RigidTransform operator*(const RigidTransform &other) const;
    RigidTransform Inverse() const;

    /// Geodesic rotation angle in radians.
    double RotationAngle() const;

private:
    Eigen::Matrix3d rotation_;
    Eigen::Vector3d translation_;
};

Points ApplyTransform(const Points &points, const RigidTransform &t);
PointCloud ApplyTransform(const PointCloud &cloud, const RigidTransform &t);

/// Rotation uniform on SO(3) conditioned on angle <= max_angle, translation
/// uniform in the ball of radius max_translation.
RigidTransform RandomSe3(Rng &rng, double max_angle, double max_translation);

/// Uniform subset of size floor(N / rate) without replacement. Subset order
/// follows the input order.
PointCloud RandomDownsample(const PointCloud &cloud, double rate, Rng &rng);

PointCloud AddGaussianNoise(const PointCloud &cloud, double sigma, Rng &rng);

struct GridResolution {
    int h = 8;
    int w = 8;
    int d = 8;
    int Count() const { return h * w * d; }
    bool operator==(const GridResolution &) const = default;
};

struct QueryGrid {
    Eigen::Vector3d center;
    double extent = 0.0;  // side length 1/U
    GridResolution resolution;
    Points points;  // 3 x (h*w*d), x-major then y then z
};

/// Lattice of `res` points spanning [center - extent/2, center + extent/2]^3.
Points MakeLattice(const Eigen::Vector3d &center, double extent,
                   const GridResolution &res);

std::vector<QueryGrid> BuildQueryGrids(const PointCloud &cloud, int n,
                                       double grid_scale,
                                       const GridResolution &res, Rng &rng);

/// Dense C x (H*W*D) feature grid whose voxel centers tile the canonical
/// cube. Voxel (i, j, k) sits at origin + (i, j, k) * spacing and is stored in
/// column (i * W + j) * D + k.
struct FeatureVolume {
    Eigen::MatrixXd values;
    GridResolution dims;
    Eigen::Vector3d origin;
    Eigen::Vector3d spacing;

    static FeatureVolume Canonical(int channels, const GridResolution &dims);

    int channels() const { return static_cast<int>(values.rows()); }
    Eigen::Index Index(int i, int j, int k) const {
        return (static_cast<Eigen::Index>(i) * dims.w + j) * dims.d + k;
    }
    Eigen::Vector3d VoxelCenter(int i, int j, int k) const;
};

/// Interpolation stencil of one query: 8 voxel columns plus weights and the
/// derivative of each weight with respect to the query coordinates.
struct TrilinearStencil {
    std::array<Eigen::Index, 8> index;
    std::array<double, 8> weight;
    std::array<Eigen::Vector3d, 8> dweight;
};

TrilinearStencil ComputeStencil(const FeatureVolume &volume,
                                const Eigen::Vector3d &q);

/// C x M features at the given query points (clamped to the outermost voxel
/// centers).
Eigen::MatrixXd TrilinearSample(const FeatureVolume &volume,
                                const Points &queries);

/// Greedy suppression in descending score order; ties resolved by lower index.
std::vector<int> Nms(const Points &candidates, std::span<const double> scores,
                     double radius);

/// Index of the nearest cloud point for each query (ties: lower index).
std::vector<int> NearestIndices(const Points &queries, const Points &cloud);

Points SnapToInput(const Points &keypoints, const PointCloud &cloud);

}  // namespace kpf
