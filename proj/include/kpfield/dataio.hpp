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

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kpfield/field_model.hpp"
#include "kpfield/geometry.hpp"
#include "kpfield/inference.hpp"
#include "kpfield/trainer.hpp"

namespace kpf {

// ---- point clouds and meshes ----

/// Reads ASCII or binary little-endian PLY (by `.ply` extension) or
/// whitespace-separated XYZ text (anything else). Extra PLY properties and
/// extra XYZ columns are ignored.
Points LoadCloud(const std::string &path);

void SaveCloudPly(const std::string &path, const Points &points, bool binary = false);
void SaveCloudXyz(const std::string &path, const Points &points);
void SaveMeshPly(const std::string &path, const SurfaceMesh &mesh);

/// Writes `contents` to a temporary sibling and renames it over `path`.
void WriteFileAtomic(const std::string &path, const std::string &contents);

// ---- manifests ----

struct ManifestRecord {
    std::string cloud;  // resolved path
    std::string annotation;
    std::string partner;
    std::optional<RigidTransform> transform;  // maps this cloud onto partner
    double unit_scale = 1.0;                  // meters per raw unit
    std::string split = "train";
};

/// One record per non-comment line, as whitespace-separated key=value tokens:
///   cloud=<path> [split=train|test] [annotation=<path>] [partner=<path>]
///   [transform=r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz] [unit_scale=<m>]
/// Relative paths resolve against the manifest's directory.
std::vector<ManifestRecord> LoadManifest(const std::string &path);

// ---- checkpoints ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig config;
    std::vector<nn::ParamSection> sections;
    Eigen::VectorXd theta;
    AdamState adam;
    int epoch = 0;
    std::int64_t step = 0;
    std::string rng_state;
    std::vector<LossReport> history;
};

Checkpoint MakeCheckpoint(const TrainState &state);
void SaveCheckpoint(const std::string &path, const Checkpoint &checkpoint);
Checkpoint LoadCheckpoint(const std::string &path);

/// Copies a checkpoint into `state`; rejects a different model configuration.
void RestoreState(const Checkpoint &checkpoint, TrainState &state);
FieldModel ModelFromCheckpoint(const Checkpoint &checkpoint);

// ---- configuration ----

struct RunConfig {
    std::string preset;
    TrainConfig train;
    ExtractParams extract;

    bool operator==(const RunConfig &) const;
};

std::vector<std::string> PresetNames();
/// Throws kConfig for an unknown name.
RunConfig Preset(const std::string &name);

/// Applies one `section.key=value` assignment.
void ApplyOverride(RunConfig &config, const std::string &assignment);

/// Parses the sectioned key-value text format. A file naming a `preset` in
/// its top section starts from that preset; otherwise every Table-style key
/// (see RequiredConfigKeys) must be present.
RunConfig ParseConfig(const std::string &text);
RunConfig LoadConfig(const std::string &path);
std::vector<std::string> RequiredConfigKeys();

/// Fully resolved config in the same text format.
std::string FormatConfig(const RunConfig &config);

// ---- small text outputs ----

void SaveKeypoints(const std::string &path, const Points &raw_coords,
                   const Eigen::VectorXd &scores, const std::string &header);
void SaveImagePgm(const std::string &path, const Eigen::MatrixXd &image);
void SaveMatrixCsv(const std::string &path, const Eigen::MatrixXd &image);

}  // namespace kpf
