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

#include "kpfield/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "kpfield/error.hpp"

namespace kpf {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Planar rectangle c + s*u + t*v with s, t in [-1, 1] and u orthogonal to v.
struct Rect {
    Eigen::Vector3d c, u, v;
    double Area() const { return 4.0 * u.norm() * v.norm(); }
    double Distance(const Eigen::Vector3d &x) const {
        const Eigen::Vector3d d = x - c;
        const double s = std::clamp(d.dot(u) / u.squaredNorm(), -1.0, 1.0);
        const double t = std::clamp(d.dot(v) / v.squaredNorm(), -1.0, 1.0);
        return (x - (c + s * u + t * v)).norm();
    }
};

// Axis-aligned rectangle spanning [lo, hi] on two axes at fixed `at` on the
// third.
Rect AxisRect(int normal_axis, double at, Eigen::Vector2d lo, Eigen::Vector2d hi) {
    const int a = (normal_axis + 1) % 3, b = (normal_axis + 2) % 3;
    Rect r;
    r.c.setZero();
    r.u.setZero();
    r.v.setZero();
    r.c[normal_axis] = at;
    r.c[a] = 0.5 * (lo[0] + hi[0]);
    r.c[b] = 0.5 * (lo[1] + hi[1]);
    r.u[a] = 0.5 * (hi[0] - lo[0]);
    r.v[b] = 0.5 * (hi[1] - lo[1]);
    return r;
}

void AddBox(std::vector<Rect> &rects, const Eigen::Vector3d &center,
            const Eigen::Vector3d &side) {
    const Eigen::Vector3d lo = center - side / 2, hi = center + side / 2;
    for (int ax = 0; ax < 3; ++ax) {
        const int a = (ax + 1) % 3, b = (ax + 2) % 3;
        const Eigen::Vector2d l(lo[a], lo[b]), h(hi[a], hi[b]);
        rects.push_back(AxisRect(ax, lo[ax], l, h));
        rects.push_back(AxisRect(ax, hi[ax], l, h));
    }
}

Points BoxCorners(const Eigen::Vector3d &center, const Eigen::Vector3d &side) {
    Points out(3, 8);
    int c = 0;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            for (int k = 0; k < 2; ++k)
                out.col(c++) = center + Eigen::Vector3d((i - 0.5) * side.x(),
                                                        (j - 0.5) * side.y(),
                                                        (k - 0.5) * side.z());
    return out;
}

struct RectSurface {
    std::vector<Rect> rects;
    std::vector<double> cumulative;  // cumulative area

    explicit RectSurface(std::vector<Rect> r) : rects(std::move(r)) {
        double acc = 0.0;
        for (const auto &rect : rects) cumulative.push_back(acc += rect.Area());
    }
    Points Sample(int n, Rng &rng) const {
        std::uniform_real_distribution<double> area(0.0, cumulative.back());
        std::uniform_real_distribution<double> unit(-1.0, 1.0);
        Points out(3, n);
        for (int i = 0; i < n; ++i) {
            const auto it =
                std::upper_bound(cumulative.begin(), cumulative.end(), area(rng));
            const size_t k = std::min<size_t>(
                static_cast<size_t>(it - cumulative.begin()), rects.size() - 1);
            const Rect &r = rects[k];
            const double s = unit(rng), t = unit(rng);
            out.col(i) = r.c + s * r.u + t * r.v;
        }
        return out;
    }
    double Distance(const Eigen::Vector3d &x) const {
        double best = std::numeric_limits<double>::infinity();
        for (const auto &r : rects) best = std::min(best, r.Distance(x));
        return best;
    }
};

void CheckSizes(const std::vector<double> &size, size_t expected,
                const char *kind) {
    Require(size.size() == expected,
            std::string("wrong number of size parameters for ") + kind);
    for (double s : size) {
        Require(std::isfinite(s) && s > 0.0,
                std::string("size parameters must be positive for ") + kind);
    }
}

}  // namespace

ShapeKind ParseShapeKind(const std::string &name) {
    if (name == "sphere") return ShapeKind::kSphere;
    if (name == "box") return ShapeKind::kBox;
    if (name == "cylinder") return ShapeKind::kCylinder;
    if (name == "l-bracket" || name == "lbracket") return ShapeKind::kLBracket;
    if (name == "two-box" || name == "twobox") return ShapeKind::kTwoBoxScene;
    Fail(ErrorCode::kInvalidArgument, "unknown shape kind '" + name + "'");
}

std::string ShapeKindName(ShapeKind kind) {
    switch (kind) {
        case ShapeKind::kSphere: return "sphere";
        case ShapeKind::kBox: return "box";
        case ShapeKind::kCylinder: return "cylinder";
        case ShapeKind::kLBracket: return "l-bracket";
        case ShapeKind::kTwoBoxScene: return "two-box";
    }
    return "unknown";
}

SyntheticShape GenerateSynthetic(const SyntheticShapeSpec &spec) {
    Require(spec.n_points >= 1, "synthetic shape needs at least one point");
    Rng rng(spec.seed);
    SyntheticShape shape;
    std::vector<double> size = spec.size;

    switch (spec.kind) {
        case ShapeKind::kSphere: {
            if (size.empty()) size = {0.4};
            CheckSizes(size, 1, "sphere");
            const double r = size[0];
            Require(r <= 0.5, "sphere does not fit the canonical cube");
            shape.sample = [r](int n, Rng &g) {
                std::normal_distribution<double> normal(0.0, 1.0);
                Points out(3, n);
                for (int i = 0; i < n; ++i) {
                    Eigen::Vector3d v;
                    do {
                        v = {normal(g), normal(g), normal(g)};
                    } while (v.norm() < 1e-12);
                    out.col(i) = r * v.normalized();
                }
                return out;
            };
            shape.surface_distance = [r](const Eigen::Vector3d &x) {
                return std::abs(x.norm() - r);
            };
            shape.corners = Points(3, 0);
            break;
        }
        case ShapeKind::kCylinder: {
            if (size.empty()) size = {0.3, 0.7};
            CheckSizes(size, 2, "cylinder");
            const double r = size[0], h = size[1];
            Require(r <= 0.5 && h <= 1.0, "cylinder does not fit the canonical cube");
            shape.sample = [r, h](int n, Rng &g) {
                const double lateral = 2 * kPi * r * h, cap = kPi * r * r;
                std::uniform_real_distribution<double> unit(0.0, 1.0);
                Points out(3, n);
                for (int i = 0; i < n; ++i) {
                    const double pick = unit(g) * (lateral + 2 * cap);
                    const double theta = 2 * kPi * unit(g);
                    if (pick < lateral) {
                        out.col(i) = Eigen::Vector3d(r * std::cos(theta),
                                                     r * std::sin(theta),
                                                     (unit(g) - 0.5) * h);
                    } else {
                        const double rho = r * std::sqrt(unit(g));
                        const double z = pick < lateral + cap ? -h / 2 : h / 2;
                        out.col(i) = Eigen::Vector3d(rho * std::cos(theta),
                                                     rho * std::sin(theta), z);
                    }
                }
                return out;
            };
            shape.surface_distance = [r, h](const Eigen::Vector3d &x) {
                const double rho = std::hypot(x.x(), x.y());
                const double dz = std::max(std::abs(x.z()) - h / 2, 0.0);
                const double side = std::hypot(rho - r, dz);
                const double drho = std::max(rho - r, 0.0);
                const double cap = std::hypot(drho, std::abs(std::abs(x.z()) - h / 2));
                return std::min(side, cap);
            };
            shape.corners = Points(3, 0);
            break;
        }
        case ShapeKind::kBox:
        case ShapeKind::kLBracket:
        case ShapeKind::kTwoBoxScene: {
            std::vector<Rect> rects;
            Points corners;
            if (spec.kind == ShapeKind::kBox) {
                if (size.empty()) size = {0.6, 0.5, 0.4};
                CheckSizes(size, 3, "box");
                const Eigen::Vector3d side(size[0], size[1], size[2]);
                Require(side.maxCoeff() <= 1.0, "box does not fit the canonical cube");
                AddBox(rects, Eigen::Vector3d::Zero(), side);
                corners = BoxCorners(Eigen::Vector3d::Zero(), side);
            } else if (spec.kind == ShapeKind::kTwoBoxScene) {
                if (size.empty()) size = {0.3, 0.2};
                CheckSizes(size, 2, "two-box");
                const double s = size[0], gap = size[1];
                Require(2 * s + gap <= 1.0, "two-box scene does not fit the canonical cube");
                const Eigen::Vector3d side = Eigen::Vector3d::Constant(s);
                const Eigen::Vector3d offset((s + gap) / 2, 0.0, 0.0);
                AddBox(rects, -offset, side);
                AddBox(rects, offset, side);
                corners.resize(3, 16);
                corners << BoxCorners(-offset, side), BoxCorners(offset, side);
            } else {
                if (size.empty()) size = {0.7, 0.7, 0.2, 0.4};
                CheckSizes(size, 4, "l-bracket");
                const double w = size[0], h = size[1], t = size[2], depth = size[3];
                Require(t < w && t < h, "l-bracket thickness must be below width and height");
                Require(w <= 1.0 && h <= 1.0 && depth <= 1.0,
                        "l-bracket does not fit the canonical cube");
                // L profile in (x, z), extruded along y, centered on its bbox.
                const double x0 = -w / 2, z0 = -h / 2, y0 = -depth / 2, y1 = depth / 2;
                const std::vector<Eigen::Vector2d> profile = {
                    {x0, z0}, {x0 + w, z0}, {x0 + w, z0 + t},
                    {x0 + t, z0 + t}, {x0 + t, z0 + h}, {x0, z0 + h}};
                // Caps (y = const), each split into foot and upright rectangles.
                for (double y : {y0, y1}) {
                    rects.push_back(AxisRect(1, y, {z0, x0}, {z0 + t, x0 + w}));
                    rects.push_back(AxisRect(1, y, {z0 + t, x0}, {z0 + h, x0 + t}));
                }
                // Side walls: one rectangle per profile edge.
                for (size_t e = 0; e < profile.size(); ++e) {
                    const Eigen::Vector2d a = profile[e];
                    const Eigen::Vector2d b = profile[(e + 1) % profile.size()];
                    Rect r;
                    r.c = Eigen::Vector3d(0.5 * (a.x() + b.x()), 0.0, 0.5 * (a.y() + b.y()));
                    r.u = Eigen::Vector3d(0.5 * (b.x() - a.x()), 0.0, 0.5 * (b.y() - a.y()));
                    r.v = Eigen::Vector3d(0.0, depth / 2, 0.0);
                    rects.push_back(r);
                }
                corners.resize(3, 12);
                for (size_t e = 0; e < profile.size(); ++e) {
                    corners.col(static_cast<Eigen::Index>(e)) =
                        Eigen::Vector3d(profile[e].x(), y0, profile[e].y());
                    corners.col(static_cast<Eigen::Index>(e + 6)) =
                        Eigen::Vector3d(profile[e].x(), y1, profile[e].y());
                }
            }
            auto surface = std::make_shared<RectSurface>(std::move(rects));
            shape.sample = [surface](int n, Rng &g) { return surface->Sample(n, g); };
            shape.surface_distance = [surface](const Eigen::Vector3d &x) {
                return surface->Distance(x);
            };
            shape.corners = std::move(corners);
            break;
        }
    }
    shape.cloud = PointCloud(shape.sample(spec.n_points, rng));
    return shape;
}

}  // namespace kpf
