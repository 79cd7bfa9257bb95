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

#include "kpfield/inference.hpp"

#include <algorithm>
#include <array>
#include <numeric>
#include <unordered_map>

#include "kpfield/error.hpp"

namespace kpf {

namespace {

constexpr Eigen::Index kChunk = 8192;

GridResolution ResolveLattice(const ExtractParams &params, const FeatureVolume &volume) {
    const GridResolution r = params.infer_resolution;
    return (r.h > 0 && r.w > 0 && r.d > 0) ? r : volume.dims;
}

Points Columns(const Points &src, const std::vector<Eigen::Index> &idx) {
    Points out(3, static_cast<Eigen::Index>(idx.size()));
    for (size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = src.col(idx[i]);
    return out;
}

Eigen::VectorXd QueryHead(const FieldModel &model, const FeatureVolume &volume,
                          const Points &q, unsigned head) {
    Eigen::VectorXd out(q.cols());
    for (Eigen::Index s = 0; s < q.cols(); s += kChunk) {
        const Eigen::Index n = std::min(kChunk, q.cols() - s);
        const QueryResult r = model.Query(volume, q.middleCols(s, n), head);
        out.segment(s, n) = head == kOccupancyHead ? r.occupancy : r.saliency;
    }
    return out;
}

// Gradient of the summed saliency with respect to each query.
Points SaliencyGradient(const FieldModel &model, const FeatureVolume &volume,
                        const Points &q) {
    Points grad(3, q.cols());
    for (Eigen::Index s = 0; s < q.cols(); s += kChunk) {
        const Eigen::Index n = std::min(kChunk, q.cols() - s);
        QueryTape tape;
        model.Query(volume, q.middleCols(s, n), kSaliencyHead, &tape);
        const Eigen::VectorXd ones = Eigen::VectorXd::Ones(n);
        Points dq;
        model.QueryBackward(volume, tape, nullptr, &ones, nullptr, nullptr, &dq);
        grad.middleCols(s, n) = dq;
    }
    return grad;
}

}  // namespace

void ExtractParams::Validate() const {
    Require(lambda > 0.0, "lambda must be positive");
    Require(iterations >= 0, "iterations must be >= 0");
    Require(thr_o > 0.0 && thr_o <= 0.5, "thr_o must lie in (0, 0.5]");
    Require(thr_s > 0.0 && thr_s < 1.0, "thr_s must lie in (0, 1)");
    Require(nms_radius >= 0.0, "nms_radius must be >= 0");
    Require(max_keypoints >= 0, "max_keypoints must be >= 0");
    const GridResolution r = infer_resolution;
    const bool unset = r.h == 0 && r.w == 0 && r.d == 0;
    Require(unset || (r.h >= 2 && r.w >= 2 && r.d >= 2),
            "infer_resolution components must be >= 2");
}

double SaliencyEnergy(const FieldModel &model, const FeatureVolume &volume,
                      const Points &queries, Points *grad) {
    Require(queries.cols() > 0, "saliency energy needs at least one query");
    const double m = static_cast<double>(queries.cols());
    const Eigen::VectorXd s = QueryHead(model, volume, queries, kSaliencyHead);
    if (grad) *grad = -SaliencyGradient(model, volume, queries) / m;
    return (1.0 - s.array()).mean();
}

Points InferenceLattice(const GridResolution &res) {
    Require(res.h >= 1 && res.w >= 1 && res.d >= 1, "lattice resolution must be positive");
    Points out(3, res.Count());
    Eigen::Index c = 0;
    for (int i = 0; i < res.h; ++i)
        for (int j = 0; j < res.w; ++j)
            for (int k = 0; k < res.d; ++k)
                out.col(c++) = Eigen::Vector3d(-0.5 + (i + 0.5) / res.h,
                                               -0.5 + (j + 0.5) / res.w,
                                               -0.5 + (k + 0.5) / res.d);
    return out;
}

Points RefineQueries(const FieldModel &model, const FeatureVolume &volume,
                     Points queries, double lambda, int iterations) {
    for (int it = 0; it < iterations && queries.cols() > 0; ++it) {
        // Each query descends its own term 1 - saliency(q).
        queries += lambda * SaliencyGradient(model, volume, queries);
        queries = queries.cwiseMax(-0.5).cwiseMin(0.5);
    }
    return queries;
}

KeypointSet ExtractKeypoints(const FieldModel &model, const PointCloud &cloud,
                             const ExtractParams &params) {
    return ExtractKeypoints(model, model.Encode(cloud), cloud, params);
}

KeypointSet ExtractKeypoints(const FieldModel &model, const FeatureVolume &volume,
                             const PointCloud &cloud, const ExtractParams &params) {
    params.Validate();
    KeypointSet out;
    const Points lattice = InferenceLattice(ResolveLattice(params, volume));
    out.lattice = lattice.cols();

    const Eigen::VectorXd occ = QueryHead(model, volume, lattice, kOccupancyHead);
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < occ.size(); ++i) {
        if (occ[i] > 1.0 - params.thr_o) keep.push_back(i);
    }
    out.occupied = static_cast<Eigen::Index>(keep.size());
    if (keep.empty()) {
        out.diagnostic = "no lattice query passed the occupancy filter";
        return out;
    }

    const Points refined =
        RefineQueries(model, volume, Columns(lattice, keep), params.lambda, params.iterations);
    out.iterations = params.iterations;
    const Eigen::VectorXd sal = QueryHead(model, volume, refined, kSaliencyHead);
    std::vector<Eigen::Index> salient;
    for (Eigen::Index i = 0; i < sal.size(); ++i) {
        if (sal[i] > params.thr_s) salient.push_back(i);
    }
    out.salient = static_cast<Eigen::Index>(salient.size());
    if (salient.empty()) {
        out.diagnostic = "no refined query passed the saliency threshold";
        return out;
    }

    const Points cand = Columns(refined, salient);
    std::vector<double> scores(salient.size());
    for (size_t i = 0; i < salient.size(); ++i) scores[i] = sal[salient[i]];
    std::vector<int> chosen = Nms(cand, scores, params.nms_radius);
    out.after_nms = static_cast<Eigen::Index>(chosen.size());
    if (params.max_keypoints > 0 && chosen.size() > static_cast<size_t>(params.max_keypoints)) {
        chosen.resize(static_cast<size_t>(params.max_keypoints));
    }

    out.coords.resize(3, static_cast<Eigen::Index>(chosen.size()));
    out.scores.resize(static_cast<Eigen::Index>(chosen.size()));
    for (size_t i = 0; i < chosen.size(); ++i) {
        out.coords.col(static_cast<Eigen::Index>(i)) = cand.col(chosen[i]);
        out.scores[static_cast<Eigen::Index>(i)] = scores[static_cast<size_t>(chosen[i])];
    }
    if (params.snap_to_input) out.coords = SnapToInput(out.coords, cloud);
    return out;
}

SurfaceMesh ExtractIsosurface(const Eigen::VectorXd &field, int resolution, double iso) {
    Require(resolution >= 2, "isosurface resolution must be >= 2");
    const Eigen::Index n = resolution;
    Require(field.size() == n * n * n, "field size does not match the resolution");
    const auto index = [n](Eigen::Index i, Eigen::Index j, Eigen::Index k) {
        return (i * n + j) * n + k;
    };
    const double step = 1.0 / static_cast<double>(n - 1);
    const auto position = [&](Eigen::Index v) {
        const Eigen::Index k = v % n, j = (v / n) % n, i = v / (n * n);
        return Eigen::Vector3d(-0.5 + i * step, -0.5 + j * step, -0.5 + k * step);
    };

    std::vector<Eigen::Vector3d> verts;
    std::vector<std::array<int, 3>> tris;
    std::unordered_map<std::uint64_t, int> edge_vertex;
    const auto vertex_on = [&](Eigen::Index a, Eigen::Index b) {
        if (a > b) std::swap(a, b);
        const std::uint64_t key = static_cast<std::uint64_t>(a) * static_cast<std::uint64_t>(field.size()) +
                                  static_cast<std::uint64_t>(b);
        const auto it = edge_vertex.find(key);
        if (it != edge_vertex.end()) return it->second;
        const double t = (iso - field[a]) / (field[b] - field[a]);
        verts.push_back(position(a) + t * (position(b) - position(a)));
        const int id = static_cast<int>(verts.size()) - 1;
        edge_vertex.emplace(key, id);
        return id;
    };
    // Orients the triangle so its normal points from the inside (above iso)
    // towards the outside, then drops it if degenerate.
    const auto emit = [&](int a, int b, int c, const Eigen::Vector3d &toward_out) {
        if (a == b || b == c || a == c) return;
        Eigen::Vector3d nrm = (verts[b] - verts[a]).cross(verts[c] - verts[a]);
        if (nrm.norm() < 1e-14) return;
        if (nrm.dot(toward_out) < 0) std::swap(b, c);
        tris.push_back({a, b, c});
    };

    // Six tetrahedra around the cell diagonal 0 -> 7 (corner bits: x, y, z).
    static constexpr int kAxisPerm[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2},
                                            {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
    for (Eigen::Index i = 0; i + 1 < n; ++i) {
        for (Eigen::Index j = 0; j + 1 < n; ++j) {
            for (Eigen::Index k = 0; k + 1 < n; ++k) {
                Eigen::Index corner[8];
                for (int c = 0; c < 8; ++c) {
                    corner[c] = index(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                }
                for (const auto &perm : kAxisPerm) {
                    const int b1 = 1 << perm[0];
                    const int b2 = b1 | (1 << perm[1]);
                    const Eigen::Index tet[4] = {corner[0], corner[b1], corner[b2], corner[7]};
                    std::vector<Eigen::Index> in, out;
                    for (Eigen::Index v : tet) (field[v] > iso ? in : out).push_back(v);
                    if (in.empty() || out.empty()) continue;
                    Eigen::Vector3d ci = Eigen::Vector3d::Zero(), co = Eigen::Vector3d::Zero();
                    for (auto v : in) ci += position(v) / static_cast<double>(in.size());
                    for (auto v : out) co += position(v) / static_cast<double>(out.size());
                    const Eigen::Vector3d dir = co - ci;
                    if (in.size() == 1 || out.size() == 1) {
                        const bool lone_in = in.size() == 1;
                        const Eigen::Index apex = lone_in ? in[0] : out[0];
                        const auto &others = lone_in ? out : in;
                        emit(vertex_on(apex, others[0]), vertex_on(apex, others[1]),
                             vertex_on(apex, others[2]), dir);
                    } else {
                        const int a = vertex_on(in[0], out[0]);
                        const int b = vertex_on(in[0], out[1]);
                        const int c = vertex_on(in[1], out[1]);
                        const int d = vertex_on(in[1], out[0]);
                        emit(a, b, c, dir);
                        emit(a, c, d, dir);
                    }
                }
            }
        }
    }

    SurfaceMesh mesh;
    // Vertices only referenced by dropped triangles are compacted away.
    std::vector<int> remap(verts.size(), -1);
    int used = 0;
    for (const auto &t : tris)
        for (int v : t)
            if (remap[static_cast<size_t>(v)] < 0) remap[static_cast<size_t>(v)] = used++;
    mesh.vertices.resize(3, used);
    for (size_t v = 0; v < verts.size(); ++v) {
        if (remap[v] >= 0) mesh.vertices.col(remap[v]) = verts[v];
    }
    mesh.triangles.resize(3, static_cast<Eigen::Index>(tris.size()));
    for (size_t t = 0; t < tris.size(); ++t) {
        for (int c = 0; c < 3; ++c) {
            mesh.triangles(c, static_cast<Eigen::Index>(t)) = remap[static_cast<size_t>(tris[t][c])];
        }
    }
    if (tris.empty()) mesh.diagnostic = "field never crosses the iso value";
    return mesh;
}

SurfaceMesh ReconstructSurface(const FieldModel &model, const PointCloud &cloud,
                               double iso, int resolution) {
    Require(resolution >= 2, "reconstruction resolution must be >= 2");
    const FeatureVolume volume = model.Encode(cloud);
    const Points lattice =
        MakeLattice(Eigen::Vector3d::Zero(), 1.0, {resolution, resolution, resolution});
    return ExtractIsosurface(QueryHead(model, volume, lattice, kOccupancyHead),
                             resolution, iso);
}

Eigen::MatrixXd FieldSlice(const FieldModel &model, const FeatureVolume &volume,
                           FieldKind field, int axis, SliceMode mode, int resolution) {
    Require(axis >= 0 && axis <= 2, "slice axis must be x, y or z");
    Require(resolution >= 2, "slice resolution must be >= 2");
    const int a = axis == 0 ? 1 : 0;
    const int b = axis == 2 ? 1 : 2;
    const int depth = mode == SliceMode::kMid ? 1 : resolution;
    const double step = 1.0 / (resolution - 1);
    Points q(3, static_cast<Eigen::Index>(resolution) * resolution * depth);
    Eigen::Index c = 0;
    for (int r = 0; r < resolution; ++r) {
        for (int s = 0; s < resolution; ++s) {
            for (int t = 0; t < depth; ++t) {
                Eigen::Vector3d p;
                p[a] = -0.5 + r * step;
                p[b] = -0.5 + s * step;
                p[axis] = mode == SliceMode::kMid ? 0.0 : -0.5 + t * step;
                q.col(c++) = p;
            }
        }
    }
    const Eigen::VectorXd v = QueryHead(
        model, volume, q, field == FieldKind::kOccupancy ? kOccupancyHead : kSaliencyHead);
    Eigen::MatrixXd image(resolution, resolution);
    for (int r = 0; r < resolution; ++r) {
        for (int s = 0; s < resolution; ++s) {
            image(r, s) = v.segment((static_cast<Eigen::Index>(r) * resolution + s) * depth, depth).maxCoeff();
        }
    }
    return image;
}

}  // namespace kpf
