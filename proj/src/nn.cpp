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

#include "kpfield/nn.hpp"

#include <algorithm>
#include <cmath>

#include "kpfield/error.hpp"

namespace kpf::nn {

namespace {

constexpr Index kConvChunk = 2048;

void UniformInit(VectorXd &theta, Index offset, Index size, double bound,
                 Rng &rng) {
    std::uniform_real_distribution<double> uniform(-bound, bound);
    for (Index i = 0; i < size; ++i) theta[offset + i] = uniform(rng);
}

// Fills `cols` (in*27 x count) with the 3x3x3 neighbourhoods of voxels
// [first, first + count).
void Im2Col(const MatrixXd &x, const GridResolution &dims, Index first,
            Index count, MatrixXd &cols) {
    const int cin = static_cast<int>(x.rows());
    cols.resize(cin * 27, count);
    for (Index c = 0; c < count; ++c) {
        const Index v = first + c;
        const int k = static_cast<int>(v % dims.d);
        const int j = static_cast<int>((v / dims.d) % dims.w);
        const int i = static_cast<int>(v / (static_cast<Index>(dims.d) * dims.w));
        int off = 0;
        for (int di = -1; di <= 1; ++di) {
            for (int dj = -1; dj <= 1; ++dj) {
                for (int dk = -1; dk <= 1; ++dk, ++off) {
                    const int ii = i + di, jj = j + dj, kk = k + dk;
                    auto block = cols.block(off * cin, c, cin, 1);
                    if (ii < 0 || jj < 0 || kk < 0 || ii >= dims.h ||
                        jj >= dims.w || kk >= dims.d) {
                        block.setZero();
                    } else {
                        block = x.col((static_cast<Index>(ii) * dims.w + jj) *
                                          dims.d + kk);
                    }
                }
            }
        }
    }
}

void Col2ImAdd(const MatrixXd &dcols, const GridResolution &dims, Index first,
               Index count, int cin, MatrixXd &dx) {
    for (Index c = 0; c < count; ++c) {
        const Index v = first + c;
        const int k = static_cast<int>(v % dims.d);
        const int j = static_cast<int>((v / dims.d) % dims.w);
        const int i = static_cast<int>(v / (static_cast<Index>(dims.d) * dims.w));
        int off = 0;
        for (int di = -1; di <= 1; ++di) {
            for (int dj = -1; dj <= 1; ++dj) {
                for (int dk = -1; dk <= 1; ++dk, ++off) {
                    const int ii = i + di, jj = j + dj, kk = k + dk;
                    if (ii < 0 || jj < 0 || kk < 0 || ii >= dims.h ||
                        jj >= dims.w || kk >= dims.d) {
                        continue;
                    }
                    dx.col((static_cast<Index>(ii) * dims.w + jj) * dims.d + kk) +=
                        dcols.block(off * cin, c, cin, 1);
                }
            }
        }
    }
}

}  // namespace

Index ParameterSet::Add(const std::string &name, Index rows, Index cols) {
    ParamSection s{name, values_.size(), rows, cols};
    sections_.push_back(s);
    values_.conservativeResize(values_.size() + rows * cols);
    values_.tail(rows * cols).setZero();
    return s.offset;
}

Linear::Linear(ParameterSet &params, const std::string &name, int in_, int out_,
               bool bias_)
    : in(in_), out(out_), bias(bias_) {
    w_offset = params.Add(name + ".weight", out, in);
    if (bias) b_offset = params.Add(name + ".bias", out, 1);
}

void Linear::Init(VectorXd &theta, Rng &rng) const {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    UniformInit(theta, w_offset, static_cast<Index>(in) * out, bound, rng);
    if (bias) UniformInit(theta, b_offset, out, bound, rng);
}

MatrixXd Linear::Forward(const VectorXd &theta, const MatrixXd &x) const {
    MatrixXd y(out, x.cols());
    y.noalias() = View(theta, w_offset, out, in) * x;
    if (bias) y.colwise() += View(theta, b_offset, out, 1).col(0);
    return y;
}

MatrixXd Linear::Backward(const VectorXd &theta, const MatrixXd &x,
                          const MatrixXd &dy, VectorXd *grad,
                          bool need_dx) const {
    if (grad != nullptr) {
        View(*grad, w_offset, out, in).noalias() += dy * x.transpose();
        if (bias) View(*grad, b_offset, out, 1).col(0) += dy.rowwise().sum();
    }
    MatrixXd dx;
    if (need_dx) dx.noalias() = View(theta, w_offset, out, in).transpose() * dy;
    return dx;
}

MatrixXd Relu(const MatrixXd &x) { return x.cwiseMax(0.0); }

MatrixXd ReluBackward(const MatrixXd &pre, const MatrixXd &dy) {
    return (pre.array() > 0.0).select(dy, 0.0);
}

ResBlockFc::ResBlockFc(ParameterSet &params, const std::string &name, int in,
                       int out) {
    const int hidden = std::min(in, out);
    fc0 = Linear(params, name + ".fc0", in, hidden);
    fc1 = Linear(params, name + ".fc1", hidden, out);
    has_shortcut = in != out;
    if (has_shortcut) {
        shortcut = Linear(params, name + ".shortcut", in, out, /*bias=*/false);
    }
}

void ResBlockFc::Init(VectorXd &theta, Rng &rng) const {
    fc0.Init(theta, rng);
    fc1.Init(theta, rng);
    if (has_shortcut) shortcut.Init(theta, rng);
}

MatrixXd ResBlockFc::Forward(const VectorXd &theta, const MatrixXd &x,
                             Tape *tape) const {
    MatrixXd h = fc0.Forward(theta, Relu(x));
    MatrixXd y = fc1.Forward(theta, Relu(h));
    if (has_shortcut) {
        y += shortcut.Forward(theta, x);
    } else {
        y += x;
    }
    if (tape != nullptr) {
        tape->x = x;
        tape->h = std::move(h);
    }
    return y;
}

MatrixXd ResBlockFc::Backward(const VectorXd &theta, const Tape &tape,
                              const MatrixXd &dy, VectorXd *grad,
                              bool need_dx) const {
    const MatrixXd dh =
        ReluBackward(tape.h, fc1.Backward(theta, Relu(tape.h), dy, grad, true));
    MatrixXd dx = ReluBackward(
        tape.x, fc0.Backward(theta, Relu(tape.x), dh, grad, true));
    if (has_shortcut) {
        MatrixXd ds = shortcut.Backward(theta, tape.x, dy, grad, need_dx);
        if (need_dx) dx += ds;
    } else {
        dx += dy;
    }
    return dx;
}

Conv3d::Conv3d(ParameterSet &params, const std::string &name, int in_, int out_)
    : in(in_), out(out_) {
    w_offset = params.Add(name + ".weight", out, static_cast<Index>(in) * 27);
    b_offset = params.Add(name + ".bias", out, 1);
}

void Conv3d::Init(VectorXd &theta, Rng &rng) const {
    const double bound = 1.0 / std::sqrt(27.0 * in);
    UniformInit(theta, w_offset, static_cast<Index>(out) * in * 27, bound, rng);
    UniformInit(theta, b_offset, out, bound, rng);
}

MatrixXd Conv3d::Forward(const VectorXd &theta, const MatrixXd &x,
                         const GridResolution &dims) const {
    const Index voxels = dims.Count();
    Require(x.rows() == in && x.cols() == voxels, "conv3d: input shape mismatch");
    const auto w = View(theta, w_offset, out, static_cast<Index>(in) * 27);
    const auto b = View(theta, b_offset, out, 1);
    MatrixXd y(out, voxels);
    MatrixXd cols;
    for (Index first = 0; first < voxels; first += kConvChunk) {
        const Index count = std::min(kConvChunk, voxels - first);
        Im2Col(x, dims, first, count, cols);
        y.middleCols(first, count).noalias() = w * cols;
    }
    y.colwise() += b.col(0);
    return y;
}

MatrixXd Conv3d::Backward(const VectorXd &theta, const MatrixXd &x,
                          const GridResolution &dims, const MatrixXd &dy,
                          VectorXd *grad, bool need_dx) const {
    const Index voxels = dims.Count();
    const auto w = View(theta, w_offset, out, static_cast<Index>(in) * 27);
    MatrixXd dx;
    if (need_dx) dx = MatrixXd::Zero(in, voxels);
    MatrixXd cols, dcols;
    for (Index first = 0; first < voxels; first += kConvChunk) {
        const Index count = std::min(kConvChunk, voxels - first);
        if (grad != nullptr) {
            Im2Col(x, dims, first, count, cols);
            View(*grad, w_offset, out, static_cast<Index>(in) * 27).noalias() +=
                dy.middleCols(first, count) * cols.transpose();
        }
        if (need_dx) {
            dcols.noalias() = w.transpose() * dy.middleCols(first, count);
            Col2ImAdd(dcols, dims, first, count, in, dx);
        }
    }
    if (grad != nullptr) View(*grad, b_offset, out, 1).col(0) += dy.rowwise().sum();
    return dx;
}

VoxelAssignment AssignVoxels(const Points &points, const GridResolution &dims) {
    VoxelAssignment a;
    a.dims = dims;
    a.voxel.resize(static_cast<size_t>(points.cols()));
    a.count.assign(static_cast<size_t>(dims.Count()), 0);
    const std::array<int, 3> n = {dims.h, dims.w, dims.d};
    for (Index p = 0; p < points.cols(); ++p) {
        std::array<int, 3> idx{};
        for (int ax = 0; ax < 3; ++ax) {
            const double u = (points(ax, p) + 0.5) * n[ax];
            idx[ax] = std::clamp(static_cast<int>(std::floor(u)), 0, n[ax] - 1);
        }
        const Index v = (static_cast<Index>(idx[0]) * dims.w + idx[1]) * dims.d + idx[2];
        a.voxel[static_cast<size_t>(p)] = v;
        ++a.count[static_cast<size_t>(v)];
    }
    return a;
}

MatrixXd ScatterMean(const MatrixXd &point_features,
                     const VoxelAssignment &assign) {
    MatrixXd out = MatrixXd::Zero(point_features.rows(), assign.dims.Count());
    for (Index p = 0; p < point_features.cols(); ++p) {
        out.col(assign.voxel[static_cast<size_t>(p)]) += point_features.col(p);
    }
    for (Index v = 0; v < out.cols(); ++v) {
        const int c = assign.count[static_cast<size_t>(v)];
        if (c > 1) out.col(v) /= c;
    }
    return out;
}

MatrixXd ScatterMeanBackward(const MatrixXd &dvoxel,
                             const VoxelAssignment &assign) {
    MatrixXd out(dvoxel.rows(), static_cast<Index>(assign.voxel.size()));
    for (Index p = 0; p < out.cols(); ++p) {
        const Index v = assign.voxel[static_cast<size_t>(p)];
        out.col(p) = dvoxel.col(v) / assign.count[static_cast<size_t>(v)];
    }
    return out;
}

MatrixXd Gather(const MatrixXd &voxel_features, const VoxelAssignment &assign) {
    MatrixXd out(voxel_features.rows(), static_cast<Index>(assign.voxel.size()));
    for (Index p = 0; p < out.cols(); ++p) {
        out.col(p) = voxel_features.col(assign.voxel[static_cast<size_t>(p)]);
    }
    return out;
}

MatrixXd GatherBackward(const MatrixXd &dpoint, const VoxelAssignment &assign,
                        Index voxels) {
    MatrixXd out = MatrixXd::Zero(dpoint.rows(), voxels);
    for (Index p = 0; p < dpoint.cols(); ++p) {
        out.col(assign.voxel[static_cast<size_t>(p)]) += dpoint.col(p);
    }
    return out;
}

GridResolution Half(const GridResolution &dims) {
    return {dims.h / 2, dims.w / 2, dims.d / 2};
}

MatrixXd AvgPool2(const MatrixXd &x, const GridResolution &dims) {
    Require(dims.h % 2 == 0 && dims.w % 2 == 0 && dims.d % 2 == 0,
            "avg-pool requires even volume dimensions");
    const GridResolution half = Half(dims);
    MatrixXd out = MatrixXd::Zero(x.rows(), half.Count());
    for (int i = 0; i < dims.h; ++i) {
        for (int j = 0; j < dims.w; ++j) {
            for (int k = 0; k < dims.d; ++k) {
                const Index src = (static_cast<Index>(i) * dims.w + j) * dims.d + k;
                const Index dst =
                    (static_cast<Index>(i / 2) * half.w + j / 2) * half.d + k / 2;
                out.col(dst) += x.col(src);
            }
        }
    }
    return out / 8.0;
}

MatrixXd AvgPool2Backward(const MatrixXd &dy, const GridResolution &dims) {
    const GridResolution half = Half(dims);
    MatrixXd dx(dy.rows(), dims.Count());
    for (int i = 0; i < dims.h; ++i) {
        for (int j = 0; j < dims.w; ++j) {
            for (int k = 0; k < dims.d; ++k) {
                const Index src = (static_cast<Index>(i) * dims.w + j) * dims.d + k;
                const Index dst =
                    (static_cast<Index>(i / 2) * half.w + j / 2) * half.d + k / 2;
                dx.col(src) = dy.col(dst) / 8.0;
            }
        }
    }
    return dx;
}

MatrixXd Upsample2(const MatrixXd &x, const GridResolution &coarse) {
    const GridResolution fine{coarse.h * 2, coarse.w * 2, coarse.d * 2};
    MatrixXd out(x.rows(), fine.Count());
    for (int i = 0; i < fine.h; ++i) {
        for (int j = 0; j < fine.w; ++j) {
            for (int k = 0; k < fine.d; ++k) {
                out.col((static_cast<Index>(i) * fine.w + j) * fine.d + k) =
                    x.col((static_cast<Index>(i / 2) * coarse.w + j / 2) *
                              coarse.d + k / 2);
            }
        }
    }
    return out;
}

MatrixXd Upsample2Backward(const MatrixXd &dy, const GridResolution &coarse) {
    const GridResolution fine{coarse.h * 2, coarse.w * 2, coarse.d * 2};
    MatrixXd dx = MatrixXd::Zero(dy.rows(), coarse.Count());
    for (int i = 0; i < fine.h; ++i) {
        for (int j = 0; j < fine.w; ++j) {
            for (int k = 0; k < fine.d; ++k) {
                dx.col((static_cast<Index>(i / 2) * coarse.w + j / 2) * coarse.d +
                       k / 2) +=
                    dy.col((static_cast<Index>(i) * fine.w + j) * fine.d + k);
            }
        }
    }
    return dx;
}

}  // namespace kpf::nn
