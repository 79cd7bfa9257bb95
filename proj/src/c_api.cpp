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

#include "kpfield/kpfield.h"

#include <cstdio>
#include <cstring>
#include <exception>
#include <filesystem>
#include <memory>
#include <new>
#include <sstream>
#include <string>
#include <vector>

#include "kpfield/dataio.hpp"
#include "kpfield/error.hpp"
#include "kpfield/evalsuite.hpp"
#include "kpfield/field_model.hpp"
#include "kpfield/inference.hpp"
#include "kpfield/synthetic.hpp"
#include "kpfield/trainer.hpp"

struct kpf_cloud {
    kpf::Points raw;
    kpf::NormalizedCloud norm;
};

struct kpf_config {
    kpf::RunConfig run;
};

struct kpf_model {
    explicit kpf_model(kpf::FieldModel m) : model(std::move(m)) {}
    kpf::FieldModel model;
};

struct kpf_trainer {
    explicit kpf_trainer(const kpf::RunConfig &c) : run(c), state(c.train) {}
    kpf::RunConfig run;
    kpf::TrainState state;
};

struct kpf_keypoints {
    kpf::KeypointSet set;
    kpf::Points raw;
    std::string header;
};

namespace {

thread_local std::string g_last_error;

kpf_status Record(kpf_status status, const std::string &message) {
    g_last_error = message;
    return status;
}

// Runs `body`, translating exceptions into a status and the thread's message.
template <class F>
kpf_status Guard(F &&body) {
    try {
        body();
        g_last_error.clear();
        return KPF_OK;
    } catch (const kpf::Error &e) {
        return Record(static_cast<kpf_status>(e.code()), e.what());
    } catch (const std::bad_alloc &) {
        return Record(KPF_ERR_INTERNAL, "out of memory");
    } catch (const std::exception &e) {
        return Record(KPF_ERR_INTERNAL, e.what());
    } catch (...) {
        return Record(KPF_ERR_INTERNAL, "unknown error");
    }
}

void NotNull(const void *p, const char *name) {
    kpf::Require(p != nullptr, std::string(name) + " is NULL");
}

kpf::NormalizedCloud Prepare(const kpf::Points &raw, bool normalize) {
    if (normalize) return kpf::NormalizeCloud(raw);
    kpf::NormalizedCloud out{kpf::PointCloud(raw), kpf::NormParams{}};
    kpf::Require(out.cloud.IsCanonical(1e-9),
                 "points lie outside the canonical cube; load with normalization");
    return out;
}

std::string KeypointHeader(const kpf::KeypointSet &k, const kpf::ExtractParams &p) {
    std::ostringstream s;
    s << "kpfield keypoints, raw frame, columns: x y z saliency\n";
    s << "count=" << k.size() << " lattice=" << k.lattice << " occupied=" << k.occupied
      << " salient=" << k.salient << " after_nms=" << k.after_nms << "\n";
    s << "thr_o=" << p.thr_o << " thr_s=" << p.thr_s << " lambda=" << p.lambda
      << " iterations=" << p.iterations << " nms_radius=" << p.nms_radius;
    if (!k.diagnostic.empty()) s << "\n" << k.diagnostic;
    return s.str();
}

void WriteCsv(const char *path, const std::string &text) {
    NotNull(path, "csv_path");
    kpf::WriteFileAtomic(path, text);
}

std::string Fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

}  // namespace

extern "C" {

const char *kpf_last_error(void) { return g_last_error.c_str(); }

const char *kpf_version(void) { return "0.1.0"; }

// ---- clouds ----

kpf_status kpf_cloud_load(const char *path, int normalize, kpf_cloud **out) {
    return Guard([&] {
        NotNull(path, "path");
        NotNull(out, "out");
        auto c = std::make_unique<kpf_cloud>();
        c->raw = kpf::LoadCloud(path);
        c->norm = Prepare(c->raw, normalize != 0);
        *out = c.release();
    });
}

kpf_status kpf_cloud_from_points(const double *xyz, size_t n, int normalize,
                                 kpf_cloud **out) {
    return Guard([&] {
        NotNull(xyz, "xyz");
        NotNull(out, "out");
        kpf::Require(n > 0, "cloud has zero points");
        auto c = std::make_unique<kpf_cloud>();
        c->raw = Eigen::Map<const kpf::Points>(xyz, 3, static_cast<Eigen::Index>(n));
        c->norm = Prepare(c->raw, normalize != 0);
        *out = c.release();
    });
}

kpf_status kpf_cloud_size(const kpf_cloud *cloud, size_t *n) {
    return Guard([&] {
        NotNull(cloud, "cloud");
        NotNull(n, "n");
        *n = static_cast<size_t>(cloud->raw.cols());
    });
}

kpf_status kpf_cloud_points(const kpf_cloud *cloud, double *xyz) {
    return Guard([&] {
        NotNull(cloud, "cloud");
        NotNull(xyz, "xyz");
        std::memcpy(xyz, cloud->raw.data(), sizeof(double) * cloud->raw.size());
    });
}

kpf_status kpf_cloud_save(const kpf_cloud *cloud, const char *path, int binary) {
    return Guard([&] {
        NotNull(cloud, "cloud");
        NotNull(path, "path");
        const std::string p = path;
        if (p.size() >= 4 && p.compare(p.size() - 4, 4, ".ply") == 0) {
            kpf::SaveCloudPly(p, cloud->raw, binary != 0);
        } else {
            kpf::SaveCloudXyz(p, cloud->raw);
        }
    });
}

void kpf_cloud_free(kpf_cloud *cloud) { delete cloud; }

kpf_status kpf_synth(const char *kind, const double *sizes, size_t n_sizes, int n_points,
                     uint64_t seed, kpf_cloud **out) {
    return Guard([&] {
        NotNull(kind, "kind");
        NotNull(out, "out");
        kpf::Require(n_sizes == 0 || sizes != nullptr, "sizes is NULL");
        kpf::SyntheticShapeSpec spec;
        spec.kind = kpf::ParseShapeKind(kind);
        if (n_sizes > 0) spec.size.assign(sizes, sizes + n_sizes);
        spec.n_points = n_points;
        spec.seed = seed;
        const kpf::SyntheticShape shape = kpf::GenerateSynthetic(spec);
        auto c = std::make_unique<kpf_cloud>();
        c->raw = shape.cloud.points();
        c->norm = Prepare(c->raw, false);
        *out = c.release();
    });
}

// ---- configuration ----

kpf_status kpf_config_preset(const char *name, kpf_config **out) {
    return Guard([&] {
        NotNull(name, "name");
        NotNull(out, "out");
        *out = new kpf_config{kpf::Preset(name)};
    });
}

kpf_status kpf_config_load(const char *path, kpf_config **out) {
    return Guard([&] {
        NotNull(path, "path");
        NotNull(out, "out");
        *out = new kpf_config{kpf::LoadConfig(path)};
    });
}

kpf_status kpf_config_set(kpf_config *config, const char *assignment) {
    return Guard([&] {
        NotNull(config, "config");
        NotNull(assignment, "assignment");
        kpf::RunConfig next = config->run;
        kpf::ApplyOverride(next, assignment);
        config->run = next;
    });
}

kpf_status kpf_config_format(const kpf_config *config, char *buf, size_t cap,
                             size_t *needed) {
    return Guard([&] {
        NotNull(config, "config");
        const std::string text = kpf::FormatConfig(config->run);
        if (needed) *needed = text.size() + 1;
        if (buf == nullptr || cap == 0) return;
        kpf::Require(cap > text.size(), "buffer too small for the config text");
        std::memcpy(buf, text.c_str(), text.size() + 1);
    });
}

void kpf_config_free(kpf_config *config) { delete config; }

// ---- training ----

kpf_status kpf_trainer_create(const kpf_config *config, kpf_trainer **out) {
    return Guard([&] {
        NotNull(config, "config");
        NotNull(out, "out");
        config->run.train.Validate();
        *out = new kpf_trainer(config->run);
    });
}

kpf_status kpf_trainer_resume(kpf_trainer *trainer, const char *checkpoint) {
    return Guard([&] {
        NotNull(trainer, "trainer");
        NotNull(checkpoint, "checkpoint");
        const kpf::Checkpoint ck = kpf::LoadCheckpoint(checkpoint);
        kpf::RestoreState(ck, trainer->state);
    });
}

kpf_status kpf_trainer_fit(kpf_trainer *trainer, const kpf_cloud *const *clouds,
                           size_t n_clouds, const char *checkpoint_dir, int workers,
                           int stop_after_epoch, kpf_progress_fn progress, void *user) {
    return Guard([&] {
        NotNull(trainer, "trainer");
        kpf::Require(clouds != nullptr && n_clouds > 0, "no training clouds");
        std::vector<kpf::PointCloud> dataset;
        for (size_t i = 0; i < n_clouds; ++i) {
            NotNull(clouds[i], "cloud");
            dataset.push_back(clouds[i]->norm.cloud);
        }
        std::string dir;
        if (checkpoint_dir != nullptr) {
            dir = checkpoint_dir;
            std::error_code ec;
            std::filesystem::create_directories(dir, ec);
            if (ec) kpf::Fail(kpf::ErrorCode::kIo, "cannot create " + dir + ": " + ec.message());
        }
        kpf::FitOptions options;
        options.workers = workers < 1 ? 1 : workers;
        options.stop_after_epoch = stop_after_epoch;
        if (progress != nullptr) {
            options.on_step = [&](int epoch, std::int64_t step, const kpf::LossReport &r,
                                  double lr) {
                progress(kpf::FormatProgress(epoch, step, r, lr).c_str(), user);
            };
        }
        if (!dir.empty()) {
            options.on_epoch = [&](const kpf::TrainState &s) {
                const kpf::Checkpoint ck = kpf::MakeCheckpoint(s);
                char name[32];
                std::snprintf(name, sizeof name, "epoch_%04d.ckpt", s.epoch);
                kpf::SaveCheckpoint((std::filesystem::path(dir) / name).string(), ck);
                kpf::SaveCheckpoint((std::filesystem::path(dir) / "last.ckpt").string(), ck);
            };
        }
        kpf::Fit(trainer->state, dataset, trainer->run.train, options);
    });
}

kpf_status kpf_trainer_save(const kpf_trainer *trainer, const char *path) {
    return Guard([&] {
        NotNull(trainer, "trainer");
        NotNull(path, "path");
        kpf::SaveCheckpoint(path, kpf::MakeCheckpoint(trainer->state));
    });
}

kpf_status kpf_trainer_epoch(const kpf_trainer *trainer, int *epoch) {
    return Guard([&] {
        NotNull(trainer, "trainer");
        NotNull(epoch, "epoch");
        *epoch = trainer->state.epoch;
    });
}

void kpf_trainer_free(kpf_trainer *trainer) { delete trainer; }

// ---- models ----

kpf_status kpf_model_load(const char *checkpoint, kpf_model **out) {
    return Guard([&] {
        NotNull(checkpoint, "checkpoint");
        NotNull(out, "out");
        *out = new kpf_model(kpf::ModelFromCheckpoint(kpf::LoadCheckpoint(checkpoint)));
    });
}

void kpf_model_free(kpf_model *model) { delete model; }

// ---- keypoints ----

kpf_status kpf_extract(const kpf_model *model, const kpf_cloud *cloud,
                       const kpf_config *config, kpf_keypoints **out) {
    return Guard([&] {
        NotNull(model, "model");
        NotNull(cloud, "cloud");
        NotNull(config, "config");
        NotNull(out, "out");
        const kpf::ExtractParams &p = config->run.extract;
        auto k = std::make_unique<kpf_keypoints>();
        k->set = kpf::ExtractKeypoints(model->model, cloud->norm.cloud, p);
        k->raw = cloud->norm.params.ToRaw(k->set.coords);
        k->header = KeypointHeader(k->set, p);
        *out = k.release();
    });
}

kpf_status kpf_keypoints_size(const kpf_keypoints *kps, size_t *n) {
    return Guard([&] {
        NotNull(kps, "keypoints");
        NotNull(n, "n");
        *n = static_cast<size_t>(kps->raw.cols());
    });
}

kpf_status kpf_keypoints_get(const kpf_keypoints *kps, double *xyz, double *scores) {
    return Guard([&] {
        NotNull(kps, "keypoints");
        if (xyz) std::memcpy(xyz, kps->raw.data(), sizeof(double) * kps->raw.size());
        if (scores) {
            std::memcpy(scores, kps->set.scores.data(),
                        sizeof(double) * kps->set.scores.size());
        }
    });
}

kpf_status kpf_keypoints_save(const kpf_keypoints *kps, const char *path) {
    return Guard([&] {
        NotNull(kps, "keypoints");
        NotNull(path, "path");
        kpf::SaveKeypoints(path, kps->raw, kps->set.scores, kps->header);
    });
}

void kpf_keypoints_free(kpf_keypoints *kps) { delete kps; }

// ---- reconstruction and slices ----

kpf_status kpf_reconstruct(const kpf_model *model, const kpf_cloud *cloud, double iso,
                           int resolution, const char *out_ply, size_t *n_vertices,
                           size_t *n_triangles) {
    return Guard([&] {
        NotNull(model, "model");
        NotNull(cloud, "cloud");
        NotNull(out_ply, "out_ply");
        kpf::SurfaceMesh mesh =
            kpf::ReconstructSurface(model->model, cloud->norm.cloud, iso, resolution);
        mesh.vertices = cloud->norm.params.ToRaw(mesh.vertices);
        kpf::SaveMeshPly(out_ply, mesh);
        if (n_vertices) *n_vertices = static_cast<size_t>(mesh.vertices.cols());
        if (n_triangles) *n_triangles = static_cast<size_t>(mesh.triangles.cols());
    });
}

kpf_status kpf_slice(const kpf_model *model, const kpf_cloud *cloud, kpf_field field,
                     int axis, kpf_slice_mode mode, int resolution, double *image) {
    return Guard([&] {
        NotNull(model, "model");
        NotNull(cloud, "cloud");
        NotNull(image, "image");
        kpf::Require(field == KPF_FIELD_OCCUPANCY || field == KPF_FIELD_SALIENCY,
                     "unknown field");
        kpf::Require(mode == KPF_SLICE_MID || mode == KPF_SLICE_MAX, "unknown slice mode");
        const kpf::FeatureVolume volume = model->model.Encode(cloud->norm.cloud);
        const Eigen::MatrixXd img = kpf::FieldSlice(
            model->model, volume,
            field == KPF_FIELD_OCCUPANCY ? kpf::FieldKind::kOccupancy
                                         : kpf::FieldKind::kSaliency,
            axis, mode == KPF_SLICE_MID ? kpf::SliceMode::kMid : kpf::SliceMode::kMaxProject,
            resolution);
        Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            image, img.rows(), img.cols()) = img;
    });
}

// ---- evaluation ----

kpf_status kpf_eval_repeat(const kpf_model *model, const kpf_cloud *cloud,
                           const kpf_config *config, kpf_sweep_kind kind,
                           const double *levels, size_t n_levels, double epsilon,
                           int trials, uint64_t seed, const char *csv_path, int *monotone) {
    return Guard([&] {
        NotNull(model, "model");
        NotNull(cloud, "cloud");
        NotNull(config, "config");
        kpf::Require(levels != nullptr && n_levels > 0, "no sweep levels");
        kpf::SweepSpec spec;
        switch (kind) {
            case KPF_SWEEP_THRESHOLD: spec.kind = kpf::SweepKind::kThreshold; break;
            case KPF_SWEEP_DOWNSAMPLE: spec.kind = kpf::SweepKind::kDownsample; break;
            case KPF_SWEEP_NOISE: spec.kind = kpf::SweepKind::kNoise; break;
            default: kpf::Fail(kpf::ErrorCode::kInvalidArgument, "unknown sweep kind");
        }
        spec.levels.assign(levels, levels + n_levels);
        spec.epsilon = epsilon;
        spec.trials = trials;
        spec.seed = seed;
        const kpf::ExtractParams params = config->run.extract;
        const kpf::FieldModel &m = model->model;
        const auto rows = kpf::RepeatabilitySweep(
            [&](const kpf::PointCloud &view) {
                return kpf::ExtractKeypoints(m, view, params).coords;
            },
            cloud->norm.cloud, spec);
        bool ok;
        if (spec.kind == kpf::SweepKind::kThreshold) {
            std::vector<double> means;
            for (const auto &r : rows) means.push_back(r.mean);
            ok = kpf::NonDecreasing(means);
        } else {
            ok = kpf::NonIncreasing(rows, 0.05);
        }
        std::string csv = "level,forward,backward,mean,keypoints_a,keypoints_b,monotone\n";
        for (const auto &r : rows) {
            csv += Fmt(r.level) + "," + Fmt(r.forward) + "," + Fmt(r.backward) + "," +
                   Fmt(r.mean) + "," + Fmt(r.keypoints_a) + "," + Fmt(r.keypoints_b) + "," +
                   (ok ? "1" : "0") + "\n";
        }
        WriteCsv(csv_path, csv);
        if (monotone) *monotone = ok ? 1 : 0;
    });
}

kpf_status kpf_eval_semantic(const kpf_model *model, const char *manifest,
                             const kpf_config *config, kpf_miou_protocol protocol,
                             const double *thresholds, size_t n_thresholds, int geodesic_k,
                             const char *csv_path) {
    return Guard([&] {
        NotNull(model, "model");
        NotNull(manifest, "manifest");
        NotNull(config, "config");
        kpf::Require(thresholds != nullptr && n_thresholds > 0, "no thresholds");
        const std::vector<double> ts(thresholds, thresholds + n_thresholds);
        const kpf::ExtractParams &params = config->run.extract;
        const auto records = kpf::LoadManifest(manifest);
        kpf::Require(!records.empty(), "manifest has no records");

        auto detect = [&](const kpf::NormalizedCloud &nc) {
            return kpf::ExtractKeypoints(model->model, nc.cloud, params).coords;
        };

        std::vector<double> miou;
        if (protocol == KPF_MIOU_ANNOTATED) {
            std::vector<Eigen::MatrixXd> distances;
            for (const auto &rec : records) {
                if (rec.annotation.empty()) {
                    kpf::Fail(kpf::ErrorCode::kConfig,
                              "record " + rec.cloud + " has no annotation");
                }
                const kpf::NormalizedCloud nc = kpf::NormalizeCloud(kpf::LoadCloud(rec.cloud));
                const kpf::Points pred = detect(nc);
                const kpf::Points annot =
                    nc.params.ToCanonical(kpf::LoadCloud(rec.annotation));
                // Geodesics run between cloud points; keypoints ride on their
                // nearest input point.
                const auto src = kpf::NearestIndices(pred, nc.cloud.points());
                const auto dst = kpf::NearestIndices(annot, nc.cloud.points());
                distances.push_back(src.empty() ? Eigen::MatrixXd(0, dst.size())
                                                : kpf::GeodesicDistances(nc.cloud, src, dst,
                                                                         geodesic_k));
            }
            miou = kpf::SemanticMiouAnnotated(distances, ts);
        } else if (protocol == KPF_MIOU_PAIRWISE) {
            std::vector<kpf::PairwiseInstance> instances;
            for (const auto &rec : records) {
                if (rec.partner.empty()) {
                    kpf::Fail(kpf::ErrorCode::kConfig, "record " + rec.cloud + " has no partner");
                }
                const kpf::NormalizedCloud a = kpf::NormalizeCloud(kpf::LoadCloud(rec.cloud));
                const kpf::NormalizedCloud b = kpf::NormalizeCloud(kpf::LoadCloud(rec.partner));
                if (a.cloud.size() != b.cloud.size()) {
                    kpf::Fail(kpf::ErrorCode::kFormat,
                              "partner clouds must correspond point by point: " + rec.cloud);
                }
                kpf::PairwiseInstance inst;
                inst.kps1 = detect(a);
                inst.kps2 = detect(b);
                inst.correspondence.source = a.cloud.points();
                inst.correspondence.target = b.cloud.points();
                instances.push_back(std::move(inst));
            }
            miou = kpf::SemanticMiouPairwise(instances, ts);
        } else {
            kpf::Fail(kpf::ErrorCode::kInvalidArgument, "unknown mIoU protocol");
        }
        std::string csv = "threshold,miou\n";
        for (size_t i = 0; i < ts.size(); ++i) csv += Fmt(ts[i]) + "," + Fmt(miou[i]) + "\n";
        WriteCsv(csv_path, csv);
    });
}

kpf_status kpf_eval_register(const kpf_model *model, const char *manifest,
                             const kpf_config *config, const int *budgets, size_t n_budgets,
                             double descriptor_radius, uint64_t seed, const char *csv_path) {
    return Guard([&] {
        NotNull(manifest, "manifest");
        NotNull(config, "config");
        kpf::Require(budgets != nullptr && n_budgets > 0, "no keypoint budgets");
        kpf::Require(descriptor_radius > 0.0, "descriptor radius must be positive");

        // Both views of a pair share one normalization so the ground-truth
        // transform stays rigid in canonical units.
        struct Loaded {
            kpf::RegistrationPair pair;
            double unit_scale;
        };
        std::vector<Loaded> pairs;
        for (const auto &rec : kpf::LoadManifest(manifest)) {
            if (rec.partner.empty() || !rec.transform) continue;
            const kpf::Points a = kpf::LoadCloud(rec.cloud);
            const kpf::Points b = kpf::LoadCloud(rec.partner);
            kpf::Points both(3, a.cols() + b.cols());
            both << a, b;
            const kpf::NormParams np = kpf::NormalizeCloud(both).params;
            const Eigen::Matrix3d &r = rec.transform->rotation();
            const Eigen::Vector3d t =
                (r * np.centroid + rec.transform->translation() - np.centroid) / np.scale;
            pairs.push_back({{kpf::PointCloud(np.ToCanonical(a)),
                              kpf::PointCloud(np.ToCanonical(b)), kpf::RigidTransform(r, t)},
                             rec.unit_scale * np.scale});
        }
        kpf::Require(!pairs.empty(), "manifest has no records with partner= and transform=");

        kpf::ExtractParams params = config->run.extract;
        const kpf::DescriptorFn descriptor = [&](const kpf::PointCloud &c,
                                                 const kpf::Points &k) {
            return kpf::HistogramDescriptor(c, k, descriptor_radius);
        };
        kpf::Rng detector_rng(seed ^ 0x5bd1e995u);

        std::string csv = "budget,fmr,inlier_ratio,rr\n";
        for (size_t bi = 0; bi < n_budgets; ++bi) {
            const int budget = budgets[bi];
            kpf::Require(budget > 0, "keypoint budgets must be positive");
            params.max_keypoints = budget;
            const kpf::DetectorFn detector = [&](const kpf::PointCloud &c, int n) {
                if (model == nullptr) return kpf::RandomDetector(c, n, detector_rng).coords;
                // Each view is encoded in its own full-cube frame.
                const kpf::NormalizedCloud nc = kpf::NormalizeCloud(c.points());
                kpf::ExtractParams p = params;
                p.max_keypoints = n;
                return nc.params.ToRaw(kpf::ExtractKeypoints(model->model, nc.cloud, p).coords);
            };
            // Pairs may carry different unit scales; evaluate one at a time
            // and pool the results.
            double fmr = 0.0, ir = 0.0, rr = 0.0;
            for (size_t i = 0; i < pairs.size(); ++i) {
                kpf::RegistrationParams rp;
                rp.unit_scale = pairs[i].unit_scale;
                rp.seed = seed + 104729ull * i;
                const auto rep = kpf::RegistrationMetrics({pairs[i].pair}, detector, descriptor,
                                                          budget, rp);
                fmr += rep.fmr;
                ir += rep.inlier_ratio;
                rr += rep.rr;
            }
            const double n = static_cast<double>(pairs.size());
            csv += std::to_string(budget) + "," + Fmt(fmr / n) + "," + Fmt(ir / n) + "," +
                   Fmt(rr / n) + "\n";
        }
        WriteCsv(csv_path, csv);
    });
}

}  // extern "C"
