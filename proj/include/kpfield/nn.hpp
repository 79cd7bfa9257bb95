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

// Minimal reverse-mode building blocks. Every layer keeps its parameters in a
// shared flat vector (see ParameterSet) and exposes an explicit Forward /
// Backward pair; activations are stored column-wise (features x batch).

#include <Eigen/Core>
#include <string>
#include <vector>

#include "kpfield/geometry.hpp"

namespace kpf::nn {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

struct ParamSection {
    std::string name;
    Index offset = 0;
    Index rows = 0;
    Index cols = 0;
    Index size() const { return rows * cols; }
};

/// Flat parameter storage with named sections.
class ParameterSet {
public:
    /// Appends a rows x cols block and returns its offset.
    Index Add(const std::string &name, Index rows, Index cols);

    VectorXd &values() { return values_; }
    const VectorXd &values() const { return values_; }
    Index size() const { return values_.size(); }
    const std::vector<ParamSection> &sections() const { return sections_; }

private:
    std::vector<ParamSection> sections_;
    VectorXd values_;
};

inline Eigen::Map<const MatrixXd> View(const VectorXd &flat, Index offset,
                                       Index rows, Index cols) {
    return {flat.data() + offset, rows, cols};
}
inline Eigen::Map<MatrixXd> View(VectorXd &flat, Index offset, Index rows,
                                 Index cols) {
    return {flat.data() + offset, rows, cols};
}

/// Y = W X + b.
struct Linear {
    int in = 0;
    int out = 0;
    bool bias = true;
    Index w_offset = 0;
    Index b_offset = 0;

    Linear() = default;
    Linear(ParameterSet &params, const std::string &name, int in, int out,
           bool bias = true);

    void Init(VectorXd &theta, Rng &rng) const;
    MatrixXd Forward(const VectorXd &theta, const MatrixXd &x) const;
    /// Accumulates parameter gradients into `grad` when non-null and returns
    /// dL/dX when `need_dx`.
    MatrixXd Backward(const VectorXd &theta, const MatrixXd &x,
                      const MatrixXd &dy, VectorXd *grad, bool need_dx) const;
};

/// Residual fully connected block: y = shortcut(x) + fc1(relu(fc0(relu(x)))).
struct ResBlockFc {
    Linear fc0;
    Linear fc1;
    Linear shortcut;  // used only when in != out
    bool has_shortcut = false;

    struct Tape {
        MatrixXd x;
        MatrixXd h;  // fc0 pre-activation
    };

    ResBlockFc() = default;
    ResBlockFc(ParameterSet &params, const std::string &name, int in, int out);

    void Init(VectorXd &theta, Rng &rng) const;
    MatrixXd Forward(const VectorXd &theta, const MatrixXd &x,
                     Tape *tape) const;
    MatrixXd Backward(const VectorXd &theta, const Tape &tape,
                      const MatrixXd &dy, VectorXd *grad, bool need_dx) const;
};

MatrixXd Relu(const MatrixXd &x);
/// dy masked by (pre > 0).
MatrixXd ReluBackward(const MatrixXd &pre, const MatrixXd &dy);

/// 3x3x3 convolution with zero padding and stride 1 over a C x (H*W*D)
/// volume.
struct Conv3d {
    int in = 0;
    int out = 0;
    Index w_offset = 0;
    Index b_offset = 0;

    Conv3d() = default;
    Conv3d(ParameterSet &params, const std::string &name, int in, int out);

    void Init(VectorXd &theta, Rng &rng) const;
    MatrixXd Forward(const VectorXd &theta, const MatrixXd &x,
                     const GridResolution &dims) const;
    MatrixXd Backward(const VectorXd &theta, const MatrixXd &x,
                      const GridResolution &dims, const MatrixXd &dy,
                      VectorXd *grad, bool need_dx) const;
};

/// Voxel assignment of a set of points and per-voxel counts.
struct VoxelAssignment {
    std::vector<Index> voxel;  // per point
    std::vector<int> count;    // per voxel
    GridResolution dims;
};

VoxelAssignment AssignVoxels(const Points &points, const GridResolution &dims);

/// Mean of point features per voxel; empty voxels are zero.
MatrixXd ScatterMean(const MatrixXd &point_features,
                     const VoxelAssignment &assign);
/// Adjoint of ScatterMean.
MatrixXd ScatterMeanBackward(const MatrixXd &dvoxel,
                             const VoxelAssignment &assign);
/// Per-point copy of the feature of its voxel.
MatrixXd Gather(const MatrixXd &voxel_features, const VoxelAssignment &assign);
MatrixXd GatherBackward(const MatrixXd &dpoint, const VoxelAssignment &assign,
                        Index voxels);

/// 2x average pooling; every dimension must be even.
MatrixXd AvgPool2(const MatrixXd &x, const GridResolution &dims);
MatrixXd AvgPool2Backward(const MatrixXd &dy, const GridResolution &dims);
/// 2x nearest-neighbour upsampling from `coarse` dims.
MatrixXd Upsample2(const MatrixXd &x, const GridResolution &coarse);
MatrixXd Upsample2Backward(const MatrixXd &dy, const GridResolution &coarse);

GridResolution Half(const GridResolution &dims);

}  // namespace kpf::nn
