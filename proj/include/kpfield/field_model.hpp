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
#include <cmath>
#include <cstdint>
#include <vector>

#include "kpfield/geometry.hpp"
#include "kpfield/nn.hpp"

namespace kpf {

enum class EncoderVariant { kFull, kLite };

struct ModelConfig {
    int c1 = 32;  // per-point feature width
    int c2 = 32;  // feature-volume width
    int ce = 32;  // positional-encoding width
    GridResolution volume{64, 64, 64};
    EncoderVariant encoder = EncoderVariant::kFull;
    int point_hidden = 32;
    int pos_hidden = 32;
    int decoder_hidden = 32;
    int decoder_blocks = 5;
    int unet_levels = 3;
    int unet_base = 32;

    void Validate() const;
    bool operator==(const ModelConfig &) const = default;
};

struct FieldSample {
    double occupancy = 0.0;
    double saliency = 0.0;
};

enum Heads : unsigned {
    kOccupancyHead = 1u,
    kSaliencyHead = 2u,
    kBothHeads = 3u,
};

/// Occupancy/saliency decoder: linear lift, residual blocks, sigmoid output.
struct Decoder {
    nn::Linear fc_in;
    std::vector<nn::ResBlockFc> blocks;
    nn::Linear fc_out;

    struct Tape {
        Eigen::MatrixXd input;
        std::vector<nn::ResBlockFc::Tape> blocks;
        Eigen::MatrixXd last;  // pre-activation feeding fc_out
        Eigen::VectorXd prob;
    };

    Decoder() = default;
    Decoder(nn::ParameterSet &params, const std::string &name, int in,
            int hidden, int n_blocks);
    void Init(Eigen::VectorXd &theta, Rng &rng) const;
    Eigen::VectorXd Forward(const Eigen::VectorXd &theta,
                            const Eigen::MatrixXd &input, Tape *tape) const;
    /// Gradient with respect to the decoder input given dL/dprob.
    Eigen::MatrixXd Backward(const Eigen::VectorXd &theta, const Tape &tape,
                             const Eigen::VectorXd &dprob,
                             Eigen::VectorXd *grad, bool need_dinput) const;
};

/// Everything the encoder backward pass needs.
struct EncoderTape {
    nn::VoxelAssignment assign;
    Eigen::MatrixXd point_in;
    // lite path
    Eigen::MatrixXd point_hidden_pre;
    // full path
    Eigen::MatrixXd point_lift;
    std::vector<nn::ResBlockFc::Tape> point_blocks;
    // shared
    Eigen::MatrixXd point_last;  // input of the final point projection
    Eigen::MatrixXd scattered;   // c1 x V
    struct ConvStage {
        Eigen::MatrixXd input;
        Eigen::MatrixXd pre_a;
        Eigen::MatrixXd pre_b;
        GridResolution dims;
    };
    std::vector<ConvStage> down;
    std::vector<ConvStage> up;
    Eigen::MatrixXd unet_out;  // input of the final 1x1 projection
};

struct QueryTape {
    Points queries;
    std::vector<TrilinearStencil> stencils;
    Eigen::MatrixXd pos_pre;
    Eigen::MatrixXd qe;
    Eigen::MatrixXd gq;
    Decoder::Tape occupancy;
    Decoder::Tape saliency;
};

struct QueryResult {
    Eigen::VectorXd occupancy;  // empty unless requested
    Eigen::VectorXd saliency;
};

/// The conditional implicit network: point-cloud encoder to a feature volume,
/// positional encoder and the two decoders.
class FieldModel {
public:
    explicit FieldModel(const ModelConfig &config, std::uint64_t seed = 0);

    const ModelConfig &config() const { return config_; }
    const nn::ParameterSet &parameters() const { return params_; }
    Eigen::VectorXd &theta() { return params_.values(); }
    const Eigen::VectorXd &theta() const { return params_.values(); }

    FeatureVolume Encode(const PointCloud &cloud,
                         EncoderTape *tape = nullptr) const;
    void EncodeBackward(const EncoderTape &tape, const Eigen::MatrixXd &dvolume,
                        Eigen::VectorXd *grad) const;

    Eigen::MatrixXd PositionalEncode(const Points &queries) const;
    /// ce x 3 Jacobian of the positional encoding at q.
    Eigen::MatrixXd PositionalJacobian(const Eigen::Vector3d &q) const;
    Eigen::VectorXd DecodeOccupancy(const Eigen::MatrixXd &qe,
                                    const Eigen::MatrixXd &gq) const;
    Eigen::VectorXd DecodeSaliency(const Eigen::MatrixXd &qe,
                                   const Eigen::MatrixXd &gq) const;

    /// Evaluates the requested heads at `queries`. When `tape` is given it is
    /// filled for QueryBackward.
    QueryResult Query(const FeatureVolume &volume, const Points &queries,
                      unsigned heads, QueryTape *tape = nullptr) const;

    /// Back-propagates dL/docc and dL/dsal (either may be null). Outputs are
    /// accumulated into whichever of grad / dvolume / dqueries is non-null.
    void QueryBackward(const FeatureVolume &volume, const QueryTape &tape,
                       const Eigen::VectorXd *docc, const Eigen::VectorXd *dsal,
                       Eigen::VectorXd *grad, Eigen::MatrixXd *dvolume,
                       Points *dqueries) const;

    std::vector<FieldSample> EvaluateField(const PointCloud &cloud,
                                           const Points &queries) const;
    std::vector<FieldSample> EvaluateField(const FeatureVolume &volume,
                                           const Points &queries) const;

    /// Pins a head to a constant output logit by zeroing its output weights.
    void SetSaliencyBias(double bias);
    void SetOccupancyBias(double bias);

private:
    void Build();
    Eigen::MatrixXd EncodePoints(const PointCloud &cloud,
                                 const nn::VoxelAssignment &assign,
                                 EncoderTape *tape) const;
    Eigen::MatrixXd Refine(const Eigen::MatrixXd &scattered,
                           EncoderTape *tape) const;

    ModelConfig config_;
    nn::ParameterSet params_;

    // point network
    nn::Linear point_fc0_;  // lite: hidden layer; full: lift
    std::vector<nn::ResBlockFc> point_blocks_;
    nn::Linear point_out_;
    // volumetric refinement
    std::vector<std::pair<nn::Conv3d, nn::Conv3d>> down_;
    std::vector<std::pair<nn::Conv3d, nn::Conv3d>> up_;
    nn::Linear volume_out_;
    // query side
    nn::Linear pos_fc0_;
    nn::Linear pos_fc1_;
    Decoder occupancy_;
    Decoder saliency_;
};

inline double Sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace kpf
