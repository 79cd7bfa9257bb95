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

// Brute-force reference implementations shared by the unit tests and the
// acceptance checks. Each is written from the metric's definition with no
// shared code from the library beyond plain data types.

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "kpfield/geometry.hpp"

namespace kpf::testing {

/// Locates the cell from origin and spacing, then weights the eight corners.
inline Eigen::VectorXd TrilinearOracle(const FeatureVolume &v, const Eigen::Vector3d &q) {
    const int dims[3] = {v.dims.h, v.dims.w, v.dims.d};
    int base[3];
    double frac[3];
    for (int a = 0; a < 3; ++a) {
        double u = (q[a] - v.origin[a]) / v.spacing[a];
        u = std::clamp(u, 0.0, static_cast<double>(dims[a] - 1));
        base[a] = std::min(static_cast<int>(std::floor(u)), dims[a] - 2);
        frac[a] = u - base[a];
    }
    Eigen::VectorXd out = Eigen::VectorXd::Zero(v.channels());
    for (int di = 0; di < 2; ++di) {
        for (int dj = 0; dj < 2; ++dj) {
            for (int dk = 0; dk < 2; ++dk) {
                const double w = (di ? frac[0] : 1 - frac[0]) * (dj ? frac[1] : 1 - frac[1]) *
                                 (dk ? frac[2] : 1 - frac[2]);
                const Eigen::Index col =
                    (static_cast<Eigen::Index>(base[0] + di) * v.dims.w + base[1] + dj) *
                        v.dims.d +
                    base[2] + dk;
                out += w * v.values.col(col);
            }
        }
    }
    return out;
}

/// Repeatedly takes the best remaining candidate (lowest index on ties) and
/// deletes everything within the radius of it.
inline std::vector<int> NmsOracle(const Points &c, const std::vector<double> &s, double radius) {
    std::vector<bool> alive(s.size(), true);
    std::vector<int> out;
    for (;;) {
        int best = -1;
        for (size_t i = 0; i < s.size(); ++i) {
            if (alive[i] && (best < 0 || s[i] > s[static_cast<size_t>(best)])) {
                best = static_cast<int>(i);
            }
        }
        if (best < 0) return out;
        out.push_back(best);
        for (size_t i = 0; i < s.size(); ++i) {
            if (alive[i] && (c.col(static_cast<Eigen::Index>(i)) - c.col(best)).norm() < radius) {
                alive[i] = false;
            }
        }
    }
}

/// Nearest cloud point by linear scan, lowest index on ties.
inline Eigen::Index NearestOracle(const Eigen::Vector3d &q, const Points &cloud) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < cloud.cols(); ++j) {
        if ((q - cloud.col(j)).norm() < (q - cloud.col(best)).norm()) best = j;
    }
    return best;
}

inline double RepeatabilityOracle(const Points &a, const Points &b, const RigidTransform &t,
                                  double eps) {
    if (a.cols() == 0) return 0.0;
    int hits = 0;
    for (Eigen::Index i = 0; i < a.cols(); ++i) {
        const Eigen::Vector3d ta = t.rotation() * a.col(i) + t.translation();
        for (Eigen::Index j = 0; j < b.cols(); ++j) {
            if ((ta - b.col(j)).norm() <= eps) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / a.cols();
}

/// Greedy matching by repeated global-minimum search over unmatched pairs.
inline int GreedyOracle(const Eigen::MatrixXd &d, double t) {
    std::vector<bool> row(d.rows(), false), col(d.cols(), false);
    int matched = 0;
    for (;;) {
        Eigen::Index bi = -1, bj = -1;
        for (Eigen::Index i = 0; i < d.rows(); ++i) {
            if (row[i]) continue;
            for (Eigen::Index j = 0; j < d.cols(); ++j) {
                if (col[j] || d(i, j) > t) continue;
                if (bi < 0 || d(i, j) < d(bi, bj)) bi = i, bj = j;
            }
        }
        if (bi < 0) return matched;
        row[bi] = col[bj] = true;
        ++matched;
    }
}

inline double IouOracle(int m, Eigen::Index p, Eigen::Index r) {
    return p == 0 ? 0.0 : m / static_cast<double>(p + r - m);
}

/// Pairwise protocol for one instance: k1 maps through its nearest source
/// sample, and counts when some k2 lies within t of the image.
inline double PairwiseIouOracle(const Points &k1, const Points &k2, const Points &src,
                                const Points &dst, double t) {
    int consistent = 0;
    for (Eigen::Index i = 0; i < k1.cols(); ++i) {
        const Eigen::Vector3d image = dst.col(NearestOracle(k1.col(i), src));
        double best = std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < k2.cols(); ++j) best = std::min(best, (k2.col(j) - image).norm());
        consistent += best <= t;
    }
    const int m = std::min<int>(consistent, static_cast<int>(k2.cols()));
    return IouOracle(m, k1.cols(), k2.cols());
}

inline std::vector<std::pair<int, int>> MutualOracle(const Eigen::MatrixXd &a,
                                                     const Eigen::MatrixXd &b) {
    auto nn = [](const Eigen::MatrixXd &set, const Eigen::VectorXd &q) {
        int best = 0;
        for (int j = 1; j < set.cols(); ++j) {
            if ((set.col(j) - q).squaredNorm() < (set.col(best) - q).squaredNorm()) best = j;
        }
        return best;
    };
    std::vector<std::pair<int, int>> out;
    for (int i = 0; i < a.cols(); ++i) {
        const int j = nn(b, a.col(i));
        if (nn(a, b.col(j)) == i) out.emplace_back(i, j);
    }
    return out;
}

}  // namespace kpf::testing
