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

#include "kpfield/evalsuite.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>
#include <tuple>

#include "kpfield/error.hpp"

namespace kpf {

namespace {

constexpr double kRadToDeg = 180.0 / 3.14159265358979323846;

double NearestDistance(const Points &set, const Eigen::Vector3d &q) {
    return std::sqrt((set.colwise() - q).colwise().squaredNorm().minCoeff());
}

}  // namespace

double RelativeRepeatability(const Points &a, const Points &b,
                             const RigidTransform &t_ab, double epsilon, bool *empty) {
    Require(epsilon > 0.0, "repeatability epsilon must be positive");
    if (empty) *empty = a.cols() == 0;
    if (a.cols() == 0 || b.cols() == 0) return 0.0;
    Eigen::Index hits = 0;
    for (Eigen::Index i = 0; i < a.cols(); ++i) {
        if (NearestDistance(b, t_ab * Eigen::Vector3d(a.col(i))) <= epsilon) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(a.cols());
}

RepeatabilityPair BidirectionalRepeatability(const Points &a, const Points &b,
                                             const RigidTransform &t_ab, double epsilon) {
    return {RelativeRepeatability(a, b, t_ab, epsilon),
            RelativeRepeatability(b, a, t_ab.Inverse(), epsilon)};
}

Eigen::MatrixXd GeodesicDistances(const PointCloud &cloud, const std::vector<int> &sources,
                                  const std::vector<int> &targets, int k) {
    Require(k >= 4, "geodesic graph needs k >= 4");
    const Eigen::Index n = cloud.size();
    for (int s : sources) Require(s >= 0 && s < n, "geodesic source index out of range");
    for (int t : targets) Require(t >= 0 && t < n, "geodesic target index out of range");
    const Points &p = cloud.points();

    // Symmetrized k-NN adjacency.
    std::vector<std::vector<std::pair<int, double>>> adj(static_cast<size_t>(n));
    const Eigen::Index kk = std::min<Eigen::Index>(k, n - 1);
    std::vector<int> order(static_cast<size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::VectorXd d2 = (p.colwise() - p.col(i)).colwise().squaredNorm();
        std::iota(order.begin(), order.end(), 0);
        std::partial_sort(order.begin(), order.begin() + kk + 1, order.end(),
                          [&](int a, int b) { return std::tie(d2[a], a) < std::tie(d2[b], b); });
        int taken = 0;
        for (size_t r = 0; r < order.size() && taken < kk; ++r) {
            const int j = order[r];
            if (j == i) continue;
            const double w = std::sqrt(d2[j]);
            adj[static_cast<size_t>(i)].push_back({j, w});
            adj[static_cast<size_t>(j)].push_back({static_cast<int>(i), w});
            ++taken;
        }
    }

    const double inf = std::numeric_limits<double>::infinity();
    Eigen::MatrixXd out(static_cast<Eigen::Index>(sources.size()),
                        static_cast<Eigen::Index>(targets.size()));
    std::vector<double> dist(static_cast<size_t>(n));
    using Entry = std::pair<double, int>;
    for (size_t s = 0; s < sources.size(); ++s) {
        std::fill(dist.begin(), dist.end(), inf);
        std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
        dist[static_cast<size_t>(sources[s])] = 0.0;
        heap.push({0.0, sources[s]});
        while (!heap.empty()) {
            const auto [d, u] = heap.top();
            heap.pop();
            if (d > dist[static_cast<size_t>(u)]) continue;
            for (const auto &[v, w] : adj[static_cast<size_t>(u)]) {
                if (d + w < dist[static_cast<size_t>(v)]) {
                    dist[static_cast<size_t>(v)] = d + w;
                    heap.push({d + w, v});
                }
            }
        }
        for (size_t t = 0; t < targets.size(); ++t) {
            out(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(t)) =
                dist[static_cast<size_t>(targets[t])];
        }
    }
    return out;
}

int GreedyMatchCount(const Eigen::MatrixXd &distances, double threshold) {
    std::vector<std::tuple<double, Eigen::Index, Eigen::Index>> pairs;
    for (Eigen::Index i = 0; i < distances.rows(); ++i) {
        for (Eigen::Index j = 0; j < distances.cols(); ++j) {
            if (distances(i, j) <= threshold) pairs.emplace_back(distances(i, j), i, j);
        }
    }
    std::sort(pairs.begin(), pairs.end());
    std::vector<bool> row_used(static_cast<size_t>(distances.rows()), false);
    std::vector<bool> col_used(static_cast<size_t>(distances.cols()), false);
    int matched = 0;
    for (const auto &[d, i, j] : pairs) {
        if (row_used[static_cast<size_t>(i)] || col_used[static_cast<size_t>(j)]) continue;
        row_used[static_cast<size_t>(i)] = col_used[static_cast<size_t>(j)] = true;
        ++matched;
    }
    return matched;
}

double MatchIou(int matched, Eigen::Index n_pred, Eigen::Index n_ref) {
    if (n_pred == 0) return 0.0;
    return matched / static_cast<double>(n_pred + n_ref - matched);
}

std::vector<double> SemanticMiouAnnotated(const std::vector<Eigen::MatrixXd> &distances,
                                          const std::vector<double> &thresholds) {
    std::vector<double> out;
    for (double t : thresholds) {
        double sum = 0.0;
        for (const auto &d : distances) sum += MatchIou(GreedyMatchCount(d, t), d.rows(), d.cols());
        out.push_back(distances.empty() ? 0.0 : sum / static_cast<double>(distances.size()));
    }
    return out;
}

Points SurfaceCorrespondence::Map(const Points &points) const {
    Require(source.cols() == target.cols() && source.cols() > 0,
            "correspondence needs equal, non-empty source and target sets");
    const std::vector<int> idx = NearestIndices(points, source);
    Points out(3, points.cols());
    for (Eigen::Index i = 0; i < points.cols(); ++i) out.col(i) = target.col(idx[static_cast<size_t>(i)]);
    return out;
}

std::vector<double> SemanticMiouPairwise(const std::vector<PairwiseInstance> &instances,
                                         const std::vector<double> &thresholds) {
    // Distance from each mapped model-1 keypoint to its nearest model-2 keypoint.
    std::vector<Eigen::VectorXd> nearest;
    for (const auto &inst : instances) {
        Eigen::VectorXd d = Eigen::VectorXd::Constant(inst.kps1.cols(),
                                                      std::numeric_limits<double>::infinity());
        if (inst.kps1.cols() > 0 && inst.kps2.cols() > 0) {
            const Points mapped = inst.correspondence.Map(inst.kps1);
            for (Eigen::Index i = 0; i < mapped.cols(); ++i) {
                d[i] = NearestDistance(inst.kps2, mapped.col(i));
            }
        }
        nearest.push_back(std::move(d));
    }
    std::vector<double> out;
    for (double t : thresholds) {
        double sum = 0.0;
        for (size_t n = 0; n < instances.size(); ++n) {
            const auto consistent = (nearest[n].array() <= t).count();
            const int matched = static_cast<int>(std::min(consistent, instances[n].kps2.cols()));
            sum += MatchIou(matched, instances[n].kps1.cols(), instances[n].kps2.cols());
        }
        out.push_back(instances.empty() ? 0.0 : sum / static_cast<double>(instances.size()));
    }
    return out;
}

std::vector<std::pair<int, int>> MatchDescriptors(const Eigen::MatrixXd &desc_a,
                                                  const Eigen::MatrixXd &desc_b) {
    std::vector<std::pair<int, int>> out;
    if (desc_a.cols() == 0 || desc_b.cols() == 0) return out;
    Require(desc_a.rows() == desc_b.rows(), "descriptor widths differ");
    const auto nearest = [](const Eigen::MatrixXd &set, const Eigen::VectorXd &q) {
        Eigen::Index best = 0;
        (set.colwise() - q).colwise().squaredNorm().minCoeff(&best);
        return static_cast<int>(best);
    };
    std::vector<int> b_to_a(static_cast<size_t>(desc_b.cols()));
    for (Eigen::Index j = 0; j < desc_b.cols(); ++j) b_to_a[static_cast<size_t>(j)] = nearest(desc_a, desc_b.col(j));
    for (Eigen::Index i = 0; i < desc_a.cols(); ++i) {
        const int j = nearest(desc_b, desc_a.col(i));
        if (b_to_a[static_cast<size_t>(j)] == i) out.emplace_back(static_cast<int>(i), j);
    }
    return out;
}

RigidTransform Procrustes(const Points &src, const Points &dst) {
    Require(src.cols() == dst.cols() && src.cols() >= 3,
            "Procrustes needs at least 3 paired points");
    const Eigen::Vector3d cs = src.rowwise().mean(), cd = dst.rowwise().mean();
    const Eigen::Matrix3d h = (src.colwise() - cs) * (dst.colwise() - cd).transpose();
    const Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d fix = Eigen::Matrix3d::Identity();
    fix(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
    const Eigen::Matrix3d r = svd.matrixV() * fix * svd.matrixU().transpose();
    return RigidTransform(r, cd - r * cs);
}

namespace {

std::vector<int> Inliers(const Points &src, const Points &dst, const RigidTransform &t,
                         double radius) {
    std::vector<int> out;
    const Points moved = ApplyTransform(src, t);
    for (Eigen::Index i = 0; i < src.cols(); ++i) {
        if ((moved.col(i) - dst.col(i)).norm() <= radius) out.push_back(static_cast<int>(i));
    }
    return out;
}

Points Pick(const Points &p, const std::vector<int> &idx) {
    Points out(3, static_cast<Eigen::Index>(idx.size()));
    for (size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = p.col(idx[i]);
    return out;
}

}  // namespace

RansacResult RansacRigid(const Points &src, const Points &dst, double inlier_radius,
                         int iterations, Rng &rng) {
    Require(src.cols() == dst.cols(), "RANSAC: correspondence sets differ in size");
    Require(src.cols() >= 3, "RANSAC needs at least 3 correspondences");
    Require(inlier_radius > 0.0 && iterations >= 1, "invalid RANSAC parameters");
    const int n = static_cast<int>(src.cols());
    std::uniform_int_distribution<int> pick(0, n - 1);

    RansacResult best;
    bool found = false;
    for (int it = 0; it < iterations; ++it) {
        int s[3];
        s[0] = pick(rng);
        do s[1] = pick(rng); while (s[1] == s[0]);
        do s[2] = pick(rng); while (s[2] == s[0] || s[2] == s[1]);
        const std::vector<int> sample(s, s + 3);
        const Points a = Pick(src, sample);
        const Points b = Pick(dst, sample);
        if ((a.col(1) - a.col(0)).cross(a.col(2) - a.col(0)).norm() < 1e-12) continue;
        const RigidTransform t = Procrustes(a, b);
        std::vector<int> in = Inliers(src, dst, t, inlier_radius);
        if (!found || in.size() > best.inliers.size()) {
            best = {t, std::move(in)};
            found = true;
        }
        if (best.inliers.size() == static_cast<size_t>(n)) break;
    }
    if (!found) {
        best = {Procrustes(src, dst), {}};
        best.inliers = Inliers(src, dst, best.transform, inlier_radius);
    }
    if (best.inliers.size() >= 3) {
        const RigidTransform refined = Procrustes(Pick(src, best.inliers), Pick(dst, best.inliers));
        std::vector<int> in = Inliers(src, dst, refined, inlier_radius);
        if (in.size() >= best.inliers.size()) best = {refined, std::move(in)};
    }
    return best;
}

RegistrationReport RegistrationMetrics(const std::vector<RegistrationPair> &pairs,
                                       const DetectorFn &detector,
                                       const DescriptorFn &descriptor, int n_keypoints,
                                       const RegistrationParams &params) {
    Require(params.unit_scale > 0.0, "unit_scale must be positive");
    Require(n_keypoints >= 1, "n_keypoints must be >= 1");
    const double tau1 = params.tau1 / params.unit_scale;
    const double trans_tol = params.translation_tol / params.unit_scale;
    Rng rng(params.seed);

    RegistrationReport report;
    for (const auto &pair : pairs) {
        PairDiagnostics diag;
        const Points ka = detector(pair.a, n_keypoints);
        const Points kb = detector(pair.b, n_keypoints);
        diag.keypoints_a = ka.cols();
        diag.keypoints_b = kb.cols();
        if (ka.cols() > 0 && kb.cols() > 0) {
            const auto matches = MatchDescriptors(descriptor(pair.a, ka), descriptor(pair.b, kb));
            diag.matches = static_cast<Eigen::Index>(matches.size());
            Points src(3, diag.matches), dst(3, diag.matches);
            int inliers = 0;
            for (size_t m = 0; m < matches.size(); ++m) {
                src.col(static_cast<Eigen::Index>(m)) = ka.col(matches[m].first);
                dst.col(static_cast<Eigen::Index>(m)) = kb.col(matches[m].second);
                if ((pair.t_ab * Eigen::Vector3d(ka.col(matches[m].first)) -
                     kb.col(matches[m].second)).norm() <= tau1) {
                    ++inliers;
                }
            }
            if (!matches.empty()) diag.inlier_ratio = inliers / static_cast<double>(matches.size());
            if (matches.size() >= 3) {
                const RansacResult r =
                    RansacRigid(src, dst, tau1, params.ransac_iterations, rng);
                const RigidTransform err = r.transform * pair.t_ab.Inverse();
                diag.rotation_error_deg = err.RotationAngle() * kRadToDeg;
                diag.translation_error =
                    (r.transform.translation() - pair.t_ab.translation()).norm();
                diag.registered = diag.rotation_error_deg < params.rotation_tol_deg &&
                                  diag.translation_error < trans_tol;
            }
        }
        report.pairs.push_back(diag);
    }
    if (!pairs.empty()) {
        // Counts first, so that all-pass rates come out exactly 1.
        const double n = static_cast<double>(pairs.size());
        int matched = 0, registered = 0;
        for (const auto &d : report.pairs) {
            matched += d.inlier_ratio > params.tau2;
            registered += d.registered;
            report.inlier_ratio += d.inlier_ratio;
        }
        report.fmr = matched / n;
        report.rr = registered / n;
        report.inlier_ratio /= n;
    }
    return report;
}

std::vector<SweepRow> RepeatabilitySweep(const ViewDetectorFn &detector,
                                         const PointCloud &cloud, const SweepSpec &spec) {
    Require(spec.trials >= 1, "sweep needs at least one trial");
    Require(!spec.levels.empty(), "sweep needs at least one level");
    const Points a = detector(cloud);
    std::vector<SweepRow> rows;
    const auto view = [&](int trial, double rate, double sigma, RigidTransform *t) {
        Rng rng(spec.seed + 7919ULL * static_cast<std::uint64_t>(trial));
        *t = RandomSe3(rng, spec.max_angle, spec.max_translation);
        Rng perturb(spec.seed + 7919ULL * static_cast<std::uint64_t>(trial) + 1);
        PointCloud v = ApplyTransform(cloud, *t);
        if (rate > 1.0) v = RandomDownsample(v, rate, perturb);
        if (sigma > 0.0) v = AddGaussianNoise(v, sigma, perturb);
        return detector(v);
    };
    if (spec.kind == SweepKind::kThreshold) {
        rows.resize(spec.levels.size());
        for (size_t l = 0; l < spec.levels.size(); ++l) rows[l].level = spec.levels[l];
        for (int trial = 0; trial < spec.trials; ++trial) {
            RigidTransform t;
            const Points b = view(trial, 1.0, 0.0, &t);
            for (size_t l = 0; l < spec.levels.size(); ++l) {
                const RepeatabilityPair r = BidirectionalRepeatability(a, b, t, spec.levels[l]);
                rows[l].forward += r.forward;
                rows[l].backward += r.backward;
                rows[l].keypoints_b += static_cast<double>(b.cols());
            }
        }
    } else {
        for (double level : spec.levels) {
            SweepRow row;
            row.level = level;
            for (int trial = 0; trial < spec.trials; ++trial) {
                RigidTransform t;
                const Points b = spec.kind == SweepKind::kDownsample
                                     ? view(trial, level, 0.0, &t)
                                     : view(trial, 1.0, level, &t);
                const RepeatabilityPair r = BidirectionalRepeatability(a, b, t, spec.epsilon);
                row.forward += r.forward;
                row.backward += r.backward;
                row.keypoints_b += static_cast<double>(b.cols());
            }
            rows.push_back(row);
        }
    }
    for (auto &row : rows) {
        row.forward /= spec.trials;
        row.backward /= spec.trials;
        row.keypoints_b /= spec.trials;
        row.keypoints_a = static_cast<double>(a.cols());
        row.mean = 0.5 * (row.forward + row.backward);
    }
    return rows;
}

bool NonIncreasing(const std::vector<SweepRow> &rows, double tol) {
    for (size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].mean > rows[i - 1].mean + tol) return false;
    }
    return true;
}

bool NonDecreasing(const std::vector<double> &values) {
    for (size_t i = 1; i < values.size(); ++i) {
        if (values[i] < values[i - 1]) return false;
    }
    return true;
}

KeypointSet RandomDetector(const PointCloud &cloud, int n, Rng &rng) {
    Require(n >= 0 && n <= cloud.size(), "random detector: n exceeds the cloud size");
    std::vector<Eigen::Index> idx(static_cast<size_t>(cloud.size()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    for (int i = 0; i < n; ++i) {
        std::uniform_int_distribution<Eigen::Index> pick(i, cloud.size() - 1);
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(pick(rng))]);
    }
    idx.resize(static_cast<size_t>(n));
    std::sort(idx.begin(), idx.end());
    KeypointSet out;
    out.coords.resize(3, n);
    for (int i = 0; i < n; ++i) out.coords.col(i) = cloud.points().col(idx[static_cast<size_t>(i)]);
    out.scores = Eigen::VectorXd::Constant(n, n > 0 ? 1.0 / n : 0.0);
    out.lattice = out.occupied = out.salient = out.after_nms = n;
    return out;
}

Eigen::MatrixXd HistogramDescriptor(const PointCloud &cloud, const Points &keypoints,
                                    double radius, int angle_bins, int radial_bins) {
    Require(radius > 0.0 && angle_bins >= 1 && radial_bins >= 1,
            "invalid histogram descriptor parameters");
    const Points &p = cloud.points();
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(angle_bins * radial_bins, keypoints.cols());
    for (Eigen::Index k = 0; k < keypoints.cols(); ++k) {
        const Eigen::Vector3d c = keypoints.col(k);
        const Eigen::VectorXd d = (p.colwise() - c).colwise().norm();
        std::vector<Eigen::Index> nb;
        for (Eigen::Index i = 0; i < d.size(); ++i) {
            if (d[i] <= radius) nb.push_back(i);
        }
        if (nb.size() < 3) continue;
        Eigen::Vector3d mean = Eigen::Vector3d::Zero();
        for (auto i : nb) mean += p.col(i);
        mean /= static_cast<double>(nb.size());
        Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
        for (auto i : nb) cov += (p.col(i) - mean) * (p.col(i) - mean).transpose();
        const Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU);
        const Eigen::Vector3d normal = svd.matrixU().col(2);
        double total = 0.0;
        for (auto i : nb) {
            if (d[i] <= 0.0) continue;
            const double cosine = std::abs((p.col(i) - c).dot(normal)) / d[i];
            const int a = std::min(angle_bins - 1, static_cast<int>(cosine * angle_bins));
            const int r = std::min(radial_bins - 1, static_cast<int>(d[i] / radius * radial_bins));
            out(a * radial_bins + r, k) += 1.0;
            total += 1.0;
        }
        if (total > 0.0) out.col(k) /= total;
    }
    return out;
}

}  // namespace kpf
