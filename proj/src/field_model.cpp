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

#include "kpfield/field_model.hpp"

#include <cmath>
#include <string>

#include "kpfield/error.hpp"

namespace kpf {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Inputs slightly outside the canonical cube (rotated or noised views) are
// accepted; anything beyond this bound is treated as un-normalized input.
constexpr double kEncodeBound = 1.0;
constexpr Index kQueryChunk = 8192;

MatrixXd VStack(const MatrixXd &top, const MatrixXd &bottom) {
    MatrixXd out(top.rows() + bottom.rows(), top.cols());
    out << top, bottom;
    return out;
}

}  // namespace

void ModelConfig::Validate() const {
    Require(c1 >= 1 && c2 >= 1 && ce >= 1, "feature widths must be >= 1");
    Require(volume.h >= 2 && volume.w >= 2 && volume.d >= 2,
            "volume resolution must be at least 2 per axis");
    Require(point_hidden >= 1 && pos_hidden >= 1 && decoder_hidden >= 1,
            "hidden widths must be >= 1");
    Require(decoder_blocks >= 0, "decoder block count must be >= 0");
    if (encoder == EncoderVariant::kFull) {
        Require(unet_levels >= 1 && unet_base >= 1,
                "U-Net needs at least one level and one channel");
        const int div = 1 << (unet_levels - 1);
        Require(volume.h % div == 0 && volume.w % div == 0 && volume.d % div == 0,
                "volume resolution must be divisible by 2^(levels-1)");
        Require(volume.h / div >= 1, "volume too small for U-Net depth");
    }
}

Decoder::Decoder(nn::ParameterSet &params, const std::string &name, int in,
                 int hidden, int n_blocks) {
    fc_in = nn::Linear(params, name + ".fc_in", in, hidden);
    for (int b = 0; b < n_blocks; ++b) {
        blocks.emplace_back(params, name + ".block" + std::to_string(b), hidden,
                            hidden);
    }
    fc_out = nn::Linear(params, name + ".fc_out", hidden, 1);
}

void Decoder::Init(VectorXd &theta, Rng &rng) const {
    fc_in.Init(theta, rng);
    for (const auto &b : blocks) b.Init(theta, rng);
    fc_out.Init(theta, rng);
}

VectorXd Decoder::Forward(const VectorXd &theta, const MatrixXd &input,
                          Tape *tape) const {
    MatrixXd x = fc_in.Forward(theta, input);
    if (tape != nullptr) tape->blocks.resize(blocks.size());
    for (size_t b = 0; b < blocks.size(); ++b) {
        x = blocks[b].Forward(theta, x, tape ? &tape->blocks[b] : nullptr);
    }
    const MatrixXd logits = fc_out.Forward(theta, nn::Relu(x));
    VectorXd prob = logits.row(0).transpose().unaryExpr(
        [](double v) { return Sigmoid(v); });
    if (tape != nullptr) {
        tape->input = input;
        tape->last = std::move(x);
        tape->prob = prob;
    }
    return prob;
}

MatrixXd Decoder::Backward(const VectorXd &theta, const Tape &tape,
                           const VectorXd &dprob, VectorXd *grad,
                           bool need_dinput) const {
    MatrixXd dlogit(1, dprob.size());
    dlogit.row(0) =
        (dprob.array() * tape.prob.array() * (1.0 - tape.prob.array()))
            .transpose();
    MatrixXd dx = nn::ReluBackward(
        tape.last, fc_out.Backward(theta, nn::Relu(tape.last), dlogit, grad, true));
    for (size_t b = blocks.size(); b-- > 0;) {
        dx = blocks[b].Backward(theta, tape.blocks[b], dx, grad, true);
    }
    return fc_in.Backward(theta, tape.input, dx, grad, need_dinput);
}

FieldModel::FieldModel(const ModelConfig &config, std::uint64_t seed)
    : config_(config) {
    config_.Validate();
    Build();
    Rng rng(seed);
    VectorXd &theta = params_.values();
    point_fc0_.Init(theta, rng);
    for (const auto &b : point_blocks_) b.Init(theta, rng);
    point_out_.Init(theta, rng);
    for (const auto &[a, b] : down_) {
        a.Init(theta, rng);
        b.Init(theta, rng);
    }
    for (const auto &[a, b] : up_) {
        a.Init(theta, rng);
        b.Init(theta, rng);
    }
    if (config_.encoder == EncoderVariant::kFull) volume_out_.Init(theta, rng);
    pos_fc0_.Init(theta, rng);
    pos_fc1_.Init(theta, rng);
    occupancy_.Init(theta, rng);
    saliency_.Init(theta, rng);
}

void FieldModel::Build() {
    const ModelConfig &c = config_;
    const int hp = c.point_hidden;
    if (c.encoder == EncoderVariant::kLite) {
        point_fc0_ = nn::Linear(params_, "encoder.point.fc0", 6, hp);
        point_out_ = nn::Linear(params_, "encoder.point.out", hp, c.c1);
        down_.emplace_back(nn::Conv3d(params_, "encoder.conv0", c.c1, c.c2),
                           nn::Conv3d(params_, "encoder.conv1", c.c2, c.c2));
    } else {
        point_fc0_ = nn::Linear(params_, "encoder.point.lift", 6, 2 * hp);
        for (int b = 0; b < 3; ++b) {
            point_blocks_.emplace_back(
                params_, "encoder.point.block" + std::to_string(b), 2 * hp, hp);
        }
        point_out_ = nn::Linear(params_, "encoder.point.out", hp, c.c1);
        int in = c.c1;
        for (int l = 0; l < c.unet_levels; ++l) {
            const int ch = c.unet_base << l;
            const std::string name = "encoder.unet.down" + std::to_string(l);
            down_.emplace_back(nn::Conv3d(params_, name + ".a", in, ch),
                               nn::Conv3d(params_, name + ".b", ch, ch));
            in = ch;
        }
        for (int l = 0; l + 1 < c.unet_levels; ++l) {
            const int ch = c.unet_base << l;
            const int from = c.unet_base << (l + 1);
            const std::string name = "encoder.unet.up" + std::to_string(l);
            up_.emplace_back(nn::Conv3d(params_, name + ".a", from + ch, ch),
                             nn::Conv3d(params_, name + ".b", ch, ch));
        }
        volume_out_ =
            nn::Linear(params_, "encoder.unet.out", c.unet_base, c.c2);
    }
    pos_fc0_ = nn::Linear(params_, "pos.fc0", 3, c.pos_hidden);
    pos_fc1_ = nn::Linear(params_, "pos.fc1", c.pos_hidden, c.ce);
    occupancy_ = Decoder(params_, "occupancy", c.ce + c.c2, c.decoder_hidden,
                         c.decoder_blocks);
    saliency_ = Decoder(params_, "saliency", c.ce + c.c2, c.decoder_hidden,
                        c.decoder_blocks);
}

MatrixXd FieldModel::EncodePoints(const PointCloud &cloud,
                                  const nn::VoxelAssignment &assign,
                                  EncoderTape *tape) const {
    const VectorXd &theta = params_.values();
    const Points &p = cloud.points();
    const FeatureVolume grid = FeatureVolume::Canonical(1, config_.volume);
    // Absolute position plus offset from the voxel center in voxel units.
    MatrixXd in(6, p.cols());
    for (Index i = 0; i < p.cols(); ++i) {
        const Index v = assign.voxel[static_cast<size_t>(i)];
        const int k = static_cast<int>(v % config_.volume.d);
        const int j = static_cast<int>((v / config_.volume.d) % config_.volume.w);
        const int h = static_cast<int>(v / (static_cast<Index>(config_.volume.d) *
                                            config_.volume.w));
        in.block<3, 1>(0, i) = p.col(i);
        in.block<3, 1>(3, i) =
            (p.col(i) - grid.VoxelCenter(h, j, k)).cwiseQuotient(grid.spacing);
    }
    MatrixXd last;
    if (config_.encoder == EncoderVariant::kLite) {
        MatrixXd pre = point_fc0_.Forward(theta, in);
        last = nn::Relu(pre);
        if (tape != nullptr) tape->point_hidden_pre = std::move(pre);
    } else {
        MatrixXd x = point_fc0_.Forward(theta, in);
        if (tape != nullptr) {
            tape->point_lift = x;
            tape->point_blocks.resize(point_blocks_.size());
        }
        for (size_t b = 0; b < point_blocks_.size(); ++b) {
            MatrixXd y = point_blocks_[b].Forward(
                theta, x, tape ? &tape->point_blocks[b] : nullptr);
            if (b + 1 < point_blocks_.size()) {
                x = VStack(y, nn::Gather(nn::ScatterMean(y, assign), assign));
            } else {
                last = std::move(y);
            }
        }
    }
    MatrixXd feats = point_out_.Forward(theta, last);
    if (tape != nullptr) {
        tape->point_in = std::move(in);
        tape->point_last = std::move(last);
    }
    return feats;
}

MatrixXd FieldModel::Refine(const MatrixXd &scattered, EncoderTape *tape) const {
    const VectorXd &theta = params_.values();
    if (config_.encoder == EncoderVariant::kLite) {
        const auto &[conv_a, conv_b] = down_[0];
        MatrixXd pre_a = conv_a.Forward(theta, scattered, config_.volume);
        MatrixXd pre_b = conv_b.Forward(theta, nn::Relu(pre_a), config_.volume);
        MatrixXd out = pre_b;
        if (config_.c1 == config_.c2) out += scattered;
        if (tape != nullptr) {
            tape->down.push_back({scattered, std::move(pre_a), std::move(pre_b),
                                  config_.volume});
        }
        return out;
    }

    const int levels = config_.unet_levels;
    std::vector<MatrixXd> skips(static_cast<size_t>(levels));
    std::vector<GridResolution> dims(static_cast<size_t>(levels));
    MatrixXd x = scattered;
    GridResolution d = config_.volume;
    for (int l = 0; l < levels; ++l) {
        if (l > 0) {
            x = nn::AvgPool2(skips[static_cast<size_t>(l - 1)], d);
            d = nn::Half(d);
        }
        dims[static_cast<size_t>(l)] = d;
        const auto &[conv_a, conv_b] = down_[static_cast<size_t>(l)];
        MatrixXd pre_a = conv_a.Forward(theta, x, d);
        MatrixXd pre_b = conv_b.Forward(theta, nn::Relu(pre_a), d);
        skips[static_cast<size_t>(l)] = nn::Relu(pre_b);
        if (tape != nullptr) {
            tape->down.push_back({std::move(x), std::move(pre_a),
                                  std::move(pre_b), d});
        }
    }
    MatrixXd y = skips.back();
    if (tape != nullptr) tape->up.resize(up_.size());
    for (int l = levels - 2; l >= 0; --l) {
        const GridResolution &fine = dims[static_cast<size_t>(l)];
        MatrixXd c = VStack(nn::Upsample2(y, dims[static_cast<size_t>(l + 1)]),
                            skips[static_cast<size_t>(l)]);
        const auto &[conv_a, conv_b] = up_[static_cast<size_t>(l)];
        MatrixXd pre_a = conv_a.Forward(theta, c, fine);
        MatrixXd pre_b = conv_b.Forward(theta, nn::Relu(pre_a), fine);
        y = nn::Relu(pre_b);
        if (tape != nullptr) {
            tape->up[static_cast<size_t>(l)] = {std::move(c), std::move(pre_a),
                                                std::move(pre_b), fine};
        }
    }
    MatrixXd out = volume_out_.Forward(theta, y);
    if (tape != nullptr) tape->unet_out = std::move(y);
    return out;
}

FeatureVolume FieldModel::Encode(const PointCloud &cloud,
                                 EncoderTape *tape) const {
    Require(cloud.size() > 0, "cannot encode an empty point cloud");
    Require(cloud.points().cwiseAbs().maxCoeff() <= kEncodeBound,
            "point cloud lies outside the canonical frame; normalize it first");
    nn::VoxelAssignment assign = nn::AssignVoxels(cloud.points(), config_.volume);
    const MatrixXd feats = EncodePoints(cloud, assign, tape);
    MatrixXd scattered = nn::ScatterMean(feats, assign);
    FeatureVolume volume = FeatureVolume::Canonical(config_.c2, config_.volume);
    volume.values = Refine(scattered, tape);
    if (tape != nullptr) {
        tape->scattered = std::move(scattered);
        tape->assign = std::move(assign);
    }
    return volume;
}

void FieldModel::EncodeBackward(const EncoderTape &tape, const MatrixXd &dvolume,
                                VectorXd *grad) const {
    const VectorXd &theta = params_.values();
    MatrixXd dscattered;
    if (config_.encoder == EncoderVariant::kLite) {
        const auto &stage = tape.down[0];
        const auto &[conv_a, conv_b] = down_[0];
        const MatrixXd dr = conv_b.Backward(theta, nn::Relu(stage.pre_a),
                                            stage.dims, dvolume, grad, true);
        dscattered = conv_a.Backward(theta, stage.input, stage.dims,
                                     nn::ReluBackward(stage.pre_a, dr), grad,
                                     true);
        if (config_.c1 == config_.c2) dscattered += dvolume;
    } else {
        const int levels = config_.unet_levels;
        std::vector<MatrixXd> dskip(static_cast<size_t>(levels));
        for (int l = 0; l < levels; ++l) {
            const auto &st = tape.down[static_cast<size_t>(l)];
            dskip[static_cast<size_t>(l)] =
                MatrixXd::Zero(st.pre_b.rows(), st.pre_b.cols());
        }
        MatrixXd dy = volume_out_.Backward(theta, tape.unet_out, dvolume, grad, true);
        for (int l = 0; l + 1 < levels; ++l) {
            const auto &st = tape.up[static_cast<size_t>(l)];
            const auto &[conv_a, conv_b] = up_[static_cast<size_t>(l)];
            const MatrixXd dr =
                conv_b.Backward(theta, nn::Relu(st.pre_a), st.dims,
                                nn::ReluBackward(st.pre_b, dy), grad, true);
            const MatrixXd dc =
                conv_a.Backward(theta, st.input, st.dims,
                                nn::ReluBackward(st.pre_a, dr), grad, true);
            const Index skip_rows = dskip[static_cast<size_t>(l)].rows();
            dskip[static_cast<size_t>(l)] += dc.bottomRows(skip_rows);
            dy = nn::Upsample2Backward(dc.topRows(dc.rows() - skip_rows),
                                       tape.down[static_cast<size_t>(l + 1)].dims);
        }
        dskip.back() += dy;
        for (int l = levels - 1; l >= 0; --l) {
            const auto &st = tape.down[static_cast<size_t>(l)];
            const auto &[conv_a, conv_b] = down_[static_cast<size_t>(l)];
            const MatrixXd dr = conv_b.Backward(
                theta, nn::Relu(st.pre_a), st.dims,
                nn::ReluBackward(st.pre_b, dskip[static_cast<size_t>(l)]), grad,
                true);
            const MatrixXd dx =
                conv_a.Backward(theta, st.input, st.dims,
                                nn::ReluBackward(st.pre_a, dr), grad, true);
            if (l > 0) {
                dskip[static_cast<size_t>(l - 1)] += nn::AvgPool2Backward(
                    dx, tape.down[static_cast<size_t>(l - 1)].dims);
            } else {
                dscattered = dx;
            }
        }
    }

    const MatrixXd dfeats = nn::ScatterMeanBackward(dscattered, tape.assign);
    MatrixXd dlast = point_out_.Backward(theta, tape.point_last, dfeats, grad, true);
    if (config_.encoder == EncoderVariant::kLite) {
        point_fc0_.Backward(theta, tape.point_in,
                            nn::ReluBackward(tape.point_hidden_pre, dlast), grad,
                            false);
        return;
    }
    MatrixXd dy = std::move(dlast);
    for (size_t b = point_blocks_.size(); b-- > 0;) {
        const MatrixXd dx =
            point_blocks_[b].Backward(theta, tape.point_blocks[b], dy, grad, true);
        if (b == 0) {
            point_fc0_.Backward(theta, tape.point_in, dx, grad, false);
        } else {
            const Index h = dx.rows() / 2;
            dy = dx.topRows(h) +
                 nn::ScatterMeanBackward(
                     nn::GatherBackward(dx.bottomRows(h), tape.assign,
                                        config_.volume.Count()),
                     tape.assign);
        }
    }
}

MatrixXd FieldModel::PositionalEncode(const Points &queries) const {
    const VectorXd &theta = params_.values();
    return pos_fc1_.Forward(theta, nn::Relu(pos_fc0_.Forward(theta, queries)));
}

MatrixXd FieldModel::PositionalJacobian(const Eigen::Vector3d &q) const {
    const VectorXd &theta = params_.values();
    const MatrixXd pre = pos_fc0_.Forward(theta, Points(q));
    const auto w0 = nn::View(theta, pos_fc0_.w_offset, pos_fc0_.out, 3);
    const auto w1 = nn::View(theta, pos_fc1_.w_offset, pos_fc1_.out, pos_fc1_.in);
    const VectorXd mask = (pre.col(0).array() > 0.0).cast<double>();
    return w1 * mask.asDiagonal() * w0;
}

VectorXd FieldModel::DecodeOccupancy(const MatrixXd &qe, const MatrixXd &gq) const {
    Require(qe.rows() == config_.ce && gq.rows() == config_.c2 &&
                qe.cols() == gq.cols(),
            "decoder input widths do not match the model configuration");
    return occupancy_.Forward(params_.values(), VStack(qe, gq), nullptr);
}

VectorXd FieldModel::DecodeSaliency(const MatrixXd &qe, const MatrixXd &gq) const {
    Require(qe.rows() == config_.ce && gq.rows() == config_.c2 &&
                qe.cols() == gq.cols(),
            "decoder input widths do not match the model configuration");
    return saliency_.Forward(params_.values(), VStack(qe, gq), nullptr);
}

QueryResult FieldModel::Query(const FeatureVolume &volume, const Points &queries,
                              unsigned heads, QueryTape *tape) const {
    Require(volume.channels() == config_.c2,
            "feature volume width does not match the model configuration");
    const VectorXd &theta = params_.values();
    const Index m = queries.cols();
    std::vector<TrilinearStencil> stencils(static_cast<size_t>(m));
    MatrixXd gq(volume.channels(), m);
    for (Index i = 0; i < m; ++i) {
        Require(queries.col(i).allFinite(), "non-finite query coordinate");
        const TrilinearStencil &s = stencils[static_cast<size_t>(i)] =
            ComputeStencil(volume, queries.col(i));
        gq.col(i).setZero();
        for (int c = 0; c < 8; ++c) {
            if (s.weight[c] != 0.0) gq.col(i) += s.weight[c] * volume.values.col(s.index[c]);
        }
    }
    MatrixXd pos_pre = pos_fc0_.Forward(theta, queries);
    MatrixXd qe = pos_fc1_.Forward(theta, nn::Relu(pos_pre));
    const MatrixXd input = VStack(qe, gq);

    QueryResult result;
    if (heads & kOccupancyHead) {
        result.occupancy =
            occupancy_.Forward(theta, input, tape ? &tape->occupancy : nullptr);
    }
    if (heads & kSaliencyHead) {
        result.saliency =
            saliency_.Forward(theta, input, tape ? &tape->saliency : nullptr);
    }
    if (tape != nullptr) {
        tape->queries = queries;
        tape->stencils = std::move(stencils);
        tape->pos_pre = std::move(pos_pre);
        tape->qe = std::move(qe);
        tape->gq = std::move(gq);
    }
    return result;
}

void FieldModel::QueryBackward(const FeatureVolume &volume, const QueryTape &tape,
                               const VectorXd *docc, const VectorXd *dsal,
                               VectorXd *grad, MatrixXd *dvolume,
                               Points *dqueries) const {
    const VectorXd &theta = params_.values();
    const Index m = tape.queries.cols();
    if (grad == nullptr && dvolume == nullptr && dqueries == nullptr) return;
    MatrixXd dinput = MatrixXd::Zero(config_.ce + config_.c2, m);
    if (docc != nullptr) {
        Require(tape.occupancy.prob.size() == m, "occupancy head was not taped");
        dinput += occupancy_.Backward(theta, tape.occupancy, *docc, grad, true);
    }
    if (dsal != nullptr) {
        Require(tape.saliency.prob.size() == m, "saliency head was not taped");
        dinput += saliency_.Backward(theta, tape.saliency, *dsal, grad, true);
    }
    const MatrixXd dqe = dinput.topRows(config_.ce);
    const MatrixXd dgq = dinput.bottomRows(config_.c2);

    if (grad != nullptr || dqueries != nullptr) {
        const MatrixXd dh = nn::ReluBackward(
            tape.pos_pre,
            pos_fc1_.Backward(theta, nn::Relu(tape.pos_pre), dqe, grad, true));
        const MatrixXd dq =
            pos_fc0_.Backward(theta, tape.queries, dh, grad, dqueries != nullptr);
        if (dqueries != nullptr) {
            if (dqueries->cols() != m) *dqueries = Points::Zero(3, m);
            *dqueries += dq;
        }
    }
    if (dvolume != nullptr) {
        if (dvolume->rows() != volume.channels() ||
            dvolume->cols() != volume.values.cols()) {
            *dvolume = MatrixXd::Zero(volume.channels(), volume.values.cols());
        }
        for (Index i = 0; i < m; ++i) {
            const TrilinearStencil &s = tape.stencils[static_cast<size_t>(i)];
            for (int c = 0; c < 8; ++c) {
                if (s.weight[c] != 0.0) dvolume->col(s.index[c]) += s.weight[c] * dgq.col(i);
            }
        }
    }
    if (dqueries != nullptr) {
        for (Index i = 0; i < m; ++i) {
            const TrilinearStencil &s = tape.stencils[static_cast<size_t>(i)];
            for (int c = 0; c < 8; ++c) {
                dqueries->col(i) +=
                    s.dweight[c] * volume.values.col(s.index[c]).dot(dgq.col(i));
            }
        }
    }
}

std::vector<FieldSample> FieldModel::EvaluateField(const PointCloud &cloud,
                                                   const Points &queries) const {
    if (queries.cols() == 0) return {};
    return EvaluateField(Encode(cloud), queries);
}

std::vector<FieldSample> FieldModel::EvaluateField(const FeatureVolume &volume,
                                                   const Points &queries) const {
    std::vector<FieldSample> out(static_cast<size_t>(queries.cols()));
    for (Index first = 0; first < queries.cols(); first += kQueryChunk) {
        const Index count = std::min(kQueryChunk, queries.cols() - first);
        const QueryResult r =
            Query(volume, queries.middleCols(first, count), kBothHeads);
        for (Index i = 0; i < count; ++i) {
            out[static_cast<size_t>(first + i)] = {r.occupancy[i], r.saliency[i]};
        }
    }
    return out;
}

void FieldModel::SetSaliencyBias(double bias) {
    nn::View(params_.values(), saliency_.fc_out.w_offset, 1, config_.decoder_hidden)
        .setZero();
    params_.values()[saliency_.fc_out.b_offset] = bias;
}

void FieldModel::SetOccupancyBias(double bias) {
    nn::View(params_.values(), occupancy_.fc_out.w_offset, 1, config_.decoder_hidden)
        .setZero();
    params_.values()[occupancy_.fc_out.b_offset] = bias;
}

}  // namespace kpf
