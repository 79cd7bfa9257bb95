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

/* C interface to the kpfield library.
 *
 * All objects are opaque handles released with the matching *_free call.
 * Every function returns a kpf_status; on failure kpf_last_error() returns a
 * one-line message for the calling thread. Coordinates passed in and out are
 * in the raw frame of the cloud unless stated otherwise. */
#ifndef KPFIELD_H_
#define KPFIELD_H_

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define KPF_API __declspec(dllexport)
#else
#define KPF_API __attribute__((visibility("default")))
#endif

typedef enum {
    KPF_OK = 0,
    KPF_ERR_INVALID_ARGUMENT = 1,
    KPF_ERR_IO = 2,
    KPF_ERR_FORMAT = 3,
    KPF_ERR_CONFIG = 4,
    KPF_ERR_NUMERIC = 5,
    KPF_ERR_INTERNAL = 6
} kpf_status;

typedef struct kpf_cloud kpf_cloud;
typedef struct kpf_config kpf_config;
typedef struct kpf_model kpf_model;
typedef struct kpf_trainer kpf_trainer;
typedef struct kpf_keypoints kpf_keypoints;

KPF_API const char *kpf_last_error(void);
KPF_API const char *kpf_version(void);

/* ---- clouds ---- */

/* A cloud keeps its raw points and the map to the canonical cube. With
 * normalize != 0 the bounding box is centered and scaled to the cube;
 * otherwise the points must already lie inside it and are used as they are. */
KPF_API kpf_status kpf_cloud_load(const char *path, int normalize, kpf_cloud **out);
KPF_API kpf_status kpf_cloud_from_points(const double *xyz, size_t n, int normalize,
                                         kpf_cloud **out);
KPF_API kpf_status kpf_cloud_size(const kpf_cloud *cloud, size_t *n);
/* Copies 3*n doubles (x0 y0 z0 x1 ...). */
KPF_API kpf_status kpf_cloud_points(const kpf_cloud *cloud, double *xyz);
KPF_API kpf_status kpf_cloud_save(const kpf_cloud *cloud, const char *path, int binary);
KPF_API void kpf_cloud_free(kpf_cloud *cloud);

/* Synthetic surface sampled in canonical units. kind: sphere, box, cylinder,
 * l-bracket, two-box. sizes may be NULL for the defaults. */
KPF_API kpf_status kpf_synth(const char *kind, const double *sizes, size_t n_sizes,
                             int n_points, uint64_t seed, kpf_cloud **out);

/* ---- configuration ---- */

KPF_API kpf_status kpf_config_preset(const char *name, kpf_config **out);
KPF_API kpf_status kpf_config_load(const char *path, kpf_config **out);
/* "section.key=value" */
KPF_API kpf_status kpf_config_set(kpf_config *config, const char *assignment);
/* Writes the resolved config text; *needed receives its size including NUL. */
KPF_API kpf_status kpf_config_format(const kpf_config *config, char *buf, size_t cap,
                                     size_t *needed);
KPF_API void kpf_config_free(kpf_config *config);

/* ---- training ---- */

typedef void (*kpf_progress_fn)(const char *line, void *user);

KPF_API kpf_status kpf_trainer_create(const kpf_config *config, kpf_trainer **out);
KPF_API kpf_status kpf_trainer_resume(kpf_trainer *trainer, const char *checkpoint);
/* Trains until epochs_total, or until stop_after_epoch when it is positive.
 * When checkpoint_dir is non-NULL, epoch_XXXX.ckpt and last.ckpt are written
 * there after every epoch. */
KPF_API kpf_status kpf_trainer_fit(kpf_trainer *trainer, const kpf_cloud *const *clouds,
                                   size_t n_clouds, const char *checkpoint_dir,
                                   int workers, int stop_after_epoch,
                                   kpf_progress_fn progress, void *user);
KPF_API kpf_status kpf_trainer_save(const kpf_trainer *trainer, const char *path);
KPF_API kpf_status kpf_trainer_epoch(const kpf_trainer *trainer, int *epoch);
KPF_API void kpf_trainer_free(kpf_trainer *trainer);

/* ---- models ---- */

KPF_API kpf_status kpf_model_load(const char *checkpoint, kpf_model **out);
KPF_API void kpf_model_free(kpf_model *model);

/* ---- keypoints ---- */

/* Uses the [extract] section of config. */
KPF_API kpf_status kpf_extract(const kpf_model *model, const kpf_cloud *cloud,
                               const kpf_config *config, kpf_keypoints **out);
KPF_API kpf_status kpf_keypoints_size(const kpf_keypoints *kps, size_t *n);
/* 3*n raw coordinates and n scores; either pointer may be NULL. */
KPF_API kpf_status kpf_keypoints_get(const kpf_keypoints *kps, double *xyz, double *scores);
/* "x y z saliency" lines under a comment header describing the run. */
KPF_API kpf_status kpf_keypoints_save(const kpf_keypoints *kps, const char *path);
KPF_API void kpf_keypoints_free(kpf_keypoints *kps);

/* ---- reconstruction and slices ---- */

/* Writes an ASCII PLY mesh with raw-frame vertices. */
KPF_API kpf_status kpf_reconstruct(const kpf_model *model, const kpf_cloud *cloud,
                                   double iso, int resolution, const char *out_ply,
                                   size_t *n_vertices, size_t *n_triangles);

typedef enum { KPF_FIELD_OCCUPANCY = 0, KPF_FIELD_SALIENCY = 1 } kpf_field;
typedef enum { KPF_SLICE_MID = 0, KPF_SLICE_MAX = 1 } kpf_slice_mode;

/* Fills resolution*resolution values, row-major. */
KPF_API kpf_status kpf_slice(const kpf_model *model, const kpf_cloud *cloud, kpf_field field,
                             int axis, kpf_slice_mode mode, int resolution, double *image);

/* ---- evaluation ---- */

typedef enum {
    KPF_SWEEP_THRESHOLD = 0,
    KPF_SWEEP_DOWNSAMPLE = 1,
    KPF_SWEEP_NOISE = 2
} kpf_sweep_kind;

/* Repeatability of the model's keypoints under random rigid views, one CSV
 * row per level. *monotone is set to 1 when the curve has the expected
 * direction (non-decreasing in epsilon, otherwise non-increasing within
 * 0.05). */
KPF_API kpf_status kpf_eval_repeat(const kpf_model *model, const kpf_cloud *cloud,
                                   const kpf_config *config, kpf_sweep_kind kind,
                                   const double *levels, size_t n_levels, double epsilon,
                                   int trials, uint64_t seed, const char *csv_path,
                                   int *monotone);

typedef enum { KPF_MIOU_ANNOTATED = 0, KPF_MIOU_PAIRWISE = 1 } kpf_miou_protocol;

/* Manifest records need annotation= (annotated protocol) or partner=
 * (pairwise protocol; partner clouds correspond point by point). */
KPF_API kpf_status kpf_eval_semantic(const kpf_model *model, const char *manifest,
                                     const kpf_config *config, kpf_miou_protocol protocol,
                                     const double *thresholds, size_t n_thresholds,
                                     int geodesic_k, const char *csv_path);

/* Manifest records with partner= and transform=. model may be NULL to use
 * the random detector. One CSV row per keypoint budget. */
KPF_API kpf_status kpf_eval_register(const kpf_model *model, const char *manifest,
                                     const kpf_config *config, const int *budgets,
                                     size_t n_budgets, double descriptor_radius,
                                     uint64_t seed, const char *csv_path);

#ifdef __cplusplus
}
#endif

#endif /* KPFIELD_H_ */
