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
#include <string>
#include <vector>

#include "kpfield/field_model.hpp"
#include "kpfield/geometry.hpp"

namespace kpf {

struct ExtractParams {
    double lambda = 1e-3;
    int iterations = 10;  // J
    double thr_o = 0.5;
    double thr_s = 0.7;
    /// Lattice for the initial queries; zero components mean "use the
    /// feature-volume resolution".
    GridResolution infer_resolution{0, 0, 0};
    double nms_radius = 0.1;
    int max_keypoints = 0;  // 0 keeps every survivor
    bool snap_to_input = false;

    void Validate() const;
};

struct KeypointSet {
    Points coords = Points(3, 0);  // canonical frame, descending score
    Eigen::VectorXd scores;
    // Counts after each stage of the extraction.
    Eigen::Index lattice = 0;
    Eigen::Index occupied = 0;
    Eigen::Index salient = 0;
    Eigen::Index after_nms = 0;
    int iterations = 0;
    std::string diagnostic;

    Eigen::Index size() const { return coords.cols(); }
};

/// Mean of (1 - saliency) over the queries. Writes the 3 x M gradient with
/// respect to the query coordinates when `grad` is non-null.
double SaliencyEnergy(const FieldModel &model, const FeatureVolume &volume,
                      const Points &queries, Points *grad = nullptr);

/// Lattice of voxel centers covering the canonical cube.
Points InferenceLattice(const GridResolution &res);

/// Runs `iterations` fixed steps of descent on each query's own energy term
/// 1 - saliency(q), clamping to the canonical cube after every step.
Points RefineQueries(const FieldModel &model, const FeatureVolume &volume,
                     Points queries, double lambda, int iterations);

KeypointSet ExtractKeypoints(const FieldModel &model, const PointCloud &cloud,
                             const ExtractParams &params);
KeypointSet ExtractKeypoints(const FieldModel &model, const FeatureVolume &volume,
                             const PointCloud &cloud, const ExtractParams &params);

struct SurfaceMesh {
    Points vertices = Points(3, 0);
    Eigen::Matrix<int, 3, Eigen::Dynamic> triangles =
        Eigen::Matrix<int, 3, Eigen::Dynamic>(3, 0);
    std::string diagnostic;
};

inline constexpr double kDefaultIso = 0.4;

/// Isosurface of a scalar field sampled on the inclusive lattice spanning
/// [-0.5, 0.5]^3 with `resolution` points per axis (x-major order, as
/// MakeLattice). Each lattice cell is split into six tetrahedra sharing the
/// main diagonal, so neighbouring cells agree on their shared faces.
SurfaceMesh ExtractIsosurface(const Eigen::VectorXd &field, int resolution,
                              double iso);

SurfaceMesh ReconstructSurface(const FieldModel &model, const PointCloud &cloud,
                               double iso = kDefaultIso, int resolution = 64);

enum class FieldKind { kOccupancy, kSaliency };
enum class SliceMode { kMid, kMaxProject };

/// resolution x resolution image over the two axes other than `axis`
/// (in increasing axis order). Pixel (r, c) samples the inclusive lattice
/// coordinate -0.5 + r / (resolution - 1) on the first remaining axis and the
/// same for c on the second.
Eigen::MatrixXd FieldSlice(const FieldModel &model, const FeatureVolume &volume,
                           FieldKind field, int axis, SliceMode mode,
                           int resolution);

}  // namespace kpf
