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
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "kpfield/geometry.hpp"
#include "kpfield/inference.hpp"

namespace kpf {

/// Fraction of keypoints in `a` whose image under `t_ab` has a keypoint of
/// `b` within `epsilon`. Returns 0 and sets `*empty` when `a` is empty.
double RelativeRepeatability(const Points &a, const Points &b,
                             const RigidTransform &t_ab, double epsilon,
                             bool *empty = nullptr);

struct RepeatabilityPair {
    double forward = 0.0;   // a -> b
    double backward = 0.0;  // b -> a
    double mean() const { return 0.5 * (forward + backward); }
};
RepeatabilityPair BidirectionalRepeatability(const Points &a, const Points &b,
                                             const RigidTransform &t_ab,
                                             double epsilon);

/// Shortest paths over the symmetrized k-nearest-neighbour graph of the
/// cloud with Euclidean edge weights. Rows follow `sources`, columns follow
/// `targets` (both cloud indices). Unreachable pairs are +infinity.
Eigen::MatrixXd GeodesicDistances(const PointCloud &cloud,
                                  const std::vector<int> &sources,
                                  const std::vector<int> &targets, int k = 8);

/// Greedy one-to-one matching by ascending distance (ties: lower row, then
/// lower column) over pairs with distance <= threshold. Returns the count.
int GreedyMatchCount(const Eigen::MatrixXd &distances, double threshold);

/// Intersection over union of a matching: matched / (n_pred + n_ref - matched).
/// Zero when there are no predictions.
double MatchIou(int matched, Eigen::Index n_pred, Eigen::Index n_ref);

/// Annotated-keypoint protocol. `distances[i]` is the pred x annotated
/// distance matrix of instance i. Returns one mIoU per threshold.
std::vector<double> SemanticMiouAnnotated(const std::vector<Eigen::MatrixXd> &distances,
                                          const std::vector<double> &thresholds);

/// Dense surface correspondence between two models, given as paired samples.
struct SurfaceCorrespondence {
    Points source;  // on model 1
    Points target;  // matching points on model 2
    /// Image of an arbitrary point through its nearest source sample.
    Points Map(const Points &points) const;
};

struct PairwiseInstance {
    Points kps1;
    Points kps2;
    SurfaceCorrespondence correspondence;
};

/// Pairwise protocol: k1 is consistent at t when the keypoint of model 2
/// nearest to its correspondence lies within t. The consistent count, capped
/// at |kps2|, is the match count of the IoU.
std::vector<double> SemanticMiouPairwise(const std::vector<PairwiseInstance> &instances,
                                         const std::vector<double> &thresholds);

/// Mutual nearest neighbours between descriptor columns (ties: lower index).
std::vector<std::pair<int, int>> MatchDescriptors(const Eigen::MatrixXd &desc_a,
                                                  const Eigen::MatrixXd &desc_b);

/// Least-squares rigid transform taking `src` columns onto `dst` columns.
RigidTransform Procrustes(const Points &src, const Points &dst);

struct RansacResult {
    RigidTransform transform;
    std::vector<int> inliers;
};

/// Correspondences are the paired columns of `src` and `dst`.
RansacResult RansacRigid(const Points &src, const Points &dst, double inlier_radius,
                         int iterations, Rng &rng);

using DetectorFn = std::function<Points(const PointCloud &cloud, int n)>;
using DescriptorFn =
    std::function<Eigen::MatrixXd(const PointCloud &cloud, const Points &keypoints)>;

struct RegistrationPair {
    PointCloud a;
    PointCloud b;
    RigidTransform t_ab;  // maps frame a onto frame b
};

struct RegistrationParams {
    double unit_scale = 1.0;      // meters per canonical unit
    double tau1 = 0.1;            // inlier distance, meters
    double tau2 = 0.05;           // inlier-ratio threshold for FMR
    double rotation_tol_deg = 15.0;
    double translation_tol = 0.3;  // meters
    int ransac_iterations = 1000;
    std::uint64_t seed = 0;
};

struct PairDiagnostics {
    Eigen::Index keypoints_a = 0;
    Eigen::Index keypoints_b = 0;
    Eigen::Index matches = 0;
    double inlier_ratio = 0.0;
    double rotation_error_deg = std::numeric_limits<double>::infinity();
    double translation_error = std::numeric_limits<double>::infinity();
    bool registered = false;
};

struct RegistrationReport {
    double fmr = 0.0;
    double inlier_ratio = 0.0;  // mean over pairs
    double rr = 0.0;
    std::vector<PairDiagnostics> pairs;
};

RegistrationReport RegistrationMetrics(const std::vector<RegistrationPair> &pairs,
                                       const DetectorFn &detector,
                                       const DescriptorFn &descriptor,
                                       int n_keypoints,
                                       const RegistrationParams &params);

enum class SweepKind { kThreshold, kDownsample, kNoise };

/// Repeatability under random rigid views of one cloud. View b of trial i is
/// T_i applied to the cloud, then downsampled and noised according to the
/// sweep level. Threshold sweeps vary epsilon over fixed views; the other
/// kinds use `epsilon` throughout.
struct SweepSpec {
    SweepKind kind = SweepKind::kThreshold;
    std::vector<double> levels;
    double epsilon = 0.04;
    int trials = 20;
    double max_angle = 3.14159265358979323846;
    double max_translation = 0.0;
    std::uint64_t seed = 0;
};

struct SweepRow {
    double level = 0.0;
    double forward = 0.0;
    double backward = 0.0;
    double mean = 0.0;
    double keypoints_a = 0.0;  // mean counts per trial
    double keypoints_b = 0.0;
};

using ViewDetectorFn = std::function<Points(const PointCloud &cloud)>;

std::vector<SweepRow> RepeatabilitySweep(const ViewDetectorFn &detector,
                                         const PointCloud &cloud, const SweepSpec &spec);

/// True when each row's mean is at most `tol` above the previous one.
bool NonIncreasing(const std::vector<SweepRow> &rows, double tol);
bool NonDecreasing(const std::vector<double> &values);

/// n distinct input points chosen uniformly, each with score 1/n.
KeypointSet RandomDetector(const PointCloud &cloud, int n, Rng &rng);

/// Histogram of (|cos| between neighbour offset and local normal, radial
/// distance) over neighbours within `radius`, normalized to sum 1.
Eigen::MatrixXd HistogramDescriptor(const PointCloud &cloud, const Points &keypoints,
                                    double radius, int angle_bins = 6,
                                    int radial_bins = 4);

}  // namespace kpf
