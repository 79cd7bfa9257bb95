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
#include <functional>
#include <string>
#include <vector>

#include "kpfield/geometry.hpp"

namespace kpf {

enum class ShapeKind { kSphere, kBox, kCylinder, kLBracket, kTwoBoxScene };

ShapeKind ParseShapeKind(const std::string &name);
std::string ShapeKindName(ShapeKind kind);

/// Analytic test surfaces. Sizes are in canonical units; an empty `size`
/// selects the defaults:
///   sphere   {radius}                      default {0.4}
///   box      {sx, sy, sz}                  default {0.6, 0.5, 0.4}
///   cylinder {radius, height}              default {0.3, 0.7}
///   l-bracket {width, height, thickness, depth}  default {0.7, 0.7, 0.2, 0.4}
///   two-box  {side, gap}                   default {0.3, 0.2}
struct SyntheticShapeSpec {
    ShapeKind kind = ShapeKind::kSphere;
    std::vector<double> size;
    int n_points = 2048;
    std::uint64_t seed = 0;
};

struct SyntheticShape {
    PointCloud cloud;
    /// Unsigned distance to the analytic surface.
    std::function<double(const Eigen::Vector3d &)> surface_distance;
    /// Polyhedral corners (empty for sphere and cylinder).
    Points corners;
    /// Uniform samples of the same surface, independent of `cloud`.
    std::function<Points(int n, Rng &rng)> sample;
};

SyntheticShape GenerateSynthetic(const SyntheticShapeSpec &spec);

}  // namespace kpf
