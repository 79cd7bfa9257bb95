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

// kpfield command-line driver. Talks to the library only through kpfield.h.

#include <malloc.h>

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "kpfield/kpfield.h"

namespace {

// Failure inside the library; carries the status for the exit code.
struct ApiFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void Check(kpf_status status, const std::string &what) {
    if (status != KPF_OK) throw ApiFailure(what + ": " + kpf_last_error());
}

// Small RAII holders over the opaque handles.
template <class T, void (*Free)(T *)>
struct Handle {
    T *p = nullptr;
    Handle() = default;
    Handle(const Handle &) = delete;
    Handle &operator=(const Handle &) = delete;
    ~Handle() { Free(p); }
    T **out() { return &p; }
    T *get() const { return p; }
};
using Cloud = Handle<kpf_cloud, kpf_cloud_free>;
using Config = Handle<kpf_config, kpf_config_free>;
using Model = Handle<kpf_model, kpf_model_free>;
using Trainer = Handle<kpf_trainer, kpf_trainer_free>;
using Keypoints = Handle<kpf_keypoints, kpf_keypoints_free>;

struct Common {
    std::string config_path;
    std::string preset;
    std::vector<std::string> overrides;
    long long seed = -1;
    int workers = 1;
    std::string out;
};

void AddCommon(CLI::App *cmd, Common &c, const std::string &default_out) {
    cmd->add_option("--config", c.config_path, "Config file");
    cmd->add_option("--preset", c.preset, "Named preset (default keypointnet)");
    cmd->add_option("--set", c.overrides, "Override, section.key=value (repeatable)");
    cmd->add_option("--seed", c.seed, "Seed for every random choice");
    cmd->add_option("--workers", c.workers, "Worker threads")->check(CLI::PositiveNumber);
    cmd->add_option("--out", c.out, "Output path")->default_str(default_out);
    c.out = default_out;
}

void ResolveConfig(const Common &c, Config &config) {
    if (!c.config_path.empty() && !c.preset.empty()) {
        throw CLI::ValidationError("--config and --preset are mutually exclusive");
    }
    if (!c.config_path.empty()) {
        Check(kpf_config_load(c.config_path.c_str(), config.out()), "loading config");
    } else {
        const std::string name = c.preset.empty() ? "keypointnet" : c.preset;
        Check(kpf_config_preset(name.c_str(), config.out()), "loading preset");
    }
    if (c.seed >= 0) {
        const std::string s = "train.seed=" + std::to_string(c.seed);
        Check(kpf_config_set(config.get(), s.c_str()), "applying --seed");
    }
    for (const auto &o : c.overrides) Check(kpf_config_set(config.get(), o.c_str()), "--set " + o);

    size_t needed = 0;
    Check(kpf_config_format(config.get(), nullptr, 0, &needed), "formatting config");
    std::string text(needed, '\0');
    Check(kpf_config_format(config.get(), text.data(), text.size(), &needed), "formatting config");
    text.resize(needed - 1);
    std::cerr << "# resolved config\n" << text;
    if (!text.empty() && text.back() != '\n') std::cerr << "\n";
}

std::uint64_t SeedOr(const Common &c, std::uint64_t fallback) {
    return c.seed >= 0 ? static_cast<std::uint64_t>(c.seed) : fallback;
}

void LoadCloud(const std::string &path, bool canonical, Cloud &cloud) {
    Check(kpf_cloud_load(path.c_str(), canonical ? 0 : 1, cloud.out()), "loading " + path);
}

void Progress(const char *line, void *) { std::cout << line << std::endl; }

void Need(bool present, const std::string &name) {
    if (!present) throw CLI::ValidationError(name + " is required");
}

}  // namespace

int main(int argc, char **argv) {
    // Training allocates and frees large temporaries every step; keeping them
    // on the heap instead of fresh mappings avoids page-fault churn.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);

    CLI::App app{"Implicit occupancy and saliency fields for 3D keypoints"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kpf_version()));

    // train
    Common train_c;
    std::vector<std::string> train_clouds;
    std::string resume, ckpt_dir;
    int stop_after = 0;
    bool train_canonical = false;
    auto *train = app.add_subcommand("train", "Fit a model to one or more clouds");
    AddCommon(train, train_c, "model.ckpt");
    train->add_option("clouds", train_clouds, "Training clouds (.ply or .xyz)");
    train->add_option("--resume", resume, "Continue from a checkpoint");
    train->add_option("--checkpoint-dir", ckpt_dir, "Write a checkpoint after every epoch");
    train->add_option("--stop-after-epoch", stop_after, "Stop once this many epochs are done");
    train->add_flag("--canonical", train_canonical, "Inputs are already in the canonical cube");

    // extract
    Common ex_c;
    std::string ex_model, ex_cloud;
    bool ex_canonical = false;
    auto *extract = app.add_subcommand("extract", "Detect keypoints on a cloud");
    AddCommon(extract, ex_c, "keypoints.txt");
    extract->add_option("--model", ex_model, "Checkpoint");
    extract->add_option("cloud", ex_cloud, "Input cloud");
    extract->add_flag("--canonical", ex_canonical, "Input is already in the canonical cube");

    // reconstruct
    Common rc_c;
    std::string rc_model, rc_cloud;
    double iso = 0.4;
    int rc_res = 64;
    bool rc_canonical = false;
    auto *recon = app.add_subcommand("reconstruct", "Mesh the occupancy field");
    AddCommon(recon, rc_c, "mesh.ply");
    recon->add_option("--model", rc_model, "Checkpoint");
    recon->add_option("cloud", rc_cloud, "Input cloud");
    recon->add_option("--iso", iso, "Iso level")->capture_default_str();
    recon->add_option("--resolution", rc_res, "Lattice points per axis")->capture_default_str();
    recon->add_flag("--canonical", rc_canonical, "Input is already in the canonical cube");

    // slice
    Common sl_c;
    std::string sl_model, sl_cloud, field = "occupancy", mode = "mid";
    int axis = 2, sl_res = 64;
    bool sl_canonical = false;
    auto *slice = app.add_subcommand("slice", "Write a field slice as PGM or CSV");
    AddCommon(slice, sl_c, "slice.pgm");
    slice->add_option("--model", sl_model, "Checkpoint");
    slice->add_option("cloud", sl_cloud, "Input cloud");
    slice->add_option("--field", field, "occupancy or saliency")
        ->check(CLI::IsMember({"occupancy", "saliency"}))
        ->capture_default_str();
    slice->add_option("--mode", mode, "mid or max")
        ->check(CLI::IsMember({"mid", "max"}))
        ->capture_default_str();
    slice->add_option("--axis", axis, "Axis normal to the slice")
        ->check(CLI::Range(0, 2))
        ->capture_default_str();
    slice->add_option("--resolution", sl_res, "Pixels per side")->capture_default_str();
    slice->add_flag("--canonical", sl_canonical, "Input is already in the canonical cube");

    // eval-repeat
    Common er_c;
    std::string er_model, er_cloud, sweep = "threshold";
    std::vector<double> levels;
    double epsilon = 0.04;
    int trials = 20;
    bool strict = false, er_canonical = false;
    auto *erep = app.add_subcommand("eval-repeat", "Repeatability sweep under random views");
    AddCommon(erep, er_c, "repeatability.csv");
    erep->add_option("--model", er_model, "Checkpoint");
    erep->add_option("cloud", er_cloud, "Input cloud");
    erep->add_option("--sweep", sweep, "threshold, downsample or noise")
        ->check(CLI::IsMember({"threshold", "downsample", "noise"}))
        ->capture_default_str();
    erep->add_option("--levels,--eps,--rates,--sigmas", levels, "Sweep levels")
        ->delimiter(',');
    erep->add_option("--epsilon", epsilon, "Distance threshold for non-threshold sweeps")
        ->capture_default_str();
    erep->add_option("--trials", trials, "Random views per level")->capture_default_str();
    erep->add_flag("--strict", strict, "Fail when the curve has the wrong direction");
    erep->add_flag("--canonical", er_canonical, "Input is already in the canonical cube");

    // eval-semantic
    Common es_c;
    std::string es_model, es_manifest, protocol = "annotated";
    std::vector<double> thresholds;
    int geodesic_k = 8;
    auto *esem = app.add_subcommand("eval-semantic", "Semantic consistency mIoU");
    AddCommon(esem, es_c, "miou.csv");
    esem->add_option("--model", es_model, "Checkpoint");
    esem->add_option("--manifest", es_manifest, "Dataset manifest");
    esem->add_option("--protocol", protocol, "annotated or pairwise")
        ->check(CLI::IsMember({"annotated", "pairwise"}))
        ->capture_default_str();
    esem->add_option("--thresholds", thresholds, "Distance thresholds")->delimiter(',');
    esem->add_option("--geodesic-k", geodesic_k, "Neighbours in the geodesic graph")
        ->capture_default_str();

    // eval-register
    Common eg_c;
    std::string eg_model, eg_manifest;
    std::vector<int> budgets;
    double radius = 0.1;
    bool random_detector = false;
    auto *ereg = app.add_subcommand("eval-register", "Registration FMR, IR and RR");
    AddCommon(ereg, eg_c, "registration.csv");
    ereg->add_option("--model", eg_model, "Checkpoint");
    ereg->add_flag("--random-detector", random_detector, "Use random keypoints instead");
    ereg->add_option("--manifest", eg_manifest, "Dataset manifest");
    ereg->add_option("--budgets", budgets, "Keypoint budgets")->delimiter(',');
    ereg->add_option("--descriptor-radius", radius, "Descriptor support radius")
        ->capture_default_str();

    // synth
    Common sy_c;
    std::string kind = "box";
    int n_points = 2048;
    std::vector<double> sizes;
    auto *synth = app.add_subcommand("synth", "Sample a synthetic surface");
    AddCommon(synth, sy_c, "shape.ply");
    synth->add_option("--kind", kind, "sphere, box, cylinder, l-bracket or two-box")
        ->capture_default_str();
    synth->add_option("--n", n_points, "Number of points")->capture_default_str();
    synth->add_option("--size", sizes, "Shape dimensions")->delimiter(',');

    if (argc > 1 && argv[1][0] != '-' && app.get_subcommand_no_throw(argv[1]) == nullptr) {
        std::cerr << "error: unknown subcommand " << argv[1] << "\n";
        return 2;
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        std::string msg = e.what();
        for (auto &ch : msg) if (ch == '\n') ch = ' ';
        std::cerr << "error: " << msg << "\n";
        return 2;
    }

    try {
        // Required inputs are checked after parsing so that an unknown flag
        // is reported first.
        if (*train) Need(!train_clouds.empty(), "at least one training cloud");
        if (*extract) Need(!ex_model.empty(), "--model"), Need(!ex_cloud.empty(), "cloud");
        if (*recon) Need(!rc_model.empty(), "--model"), Need(!rc_cloud.empty(), "cloud");
        if (*slice) Need(!sl_model.empty(), "--model"), Need(!sl_cloud.empty(), "cloud");
        if (*erep) Need(!er_model.empty(), "--model"), Need(!er_cloud.empty(), "cloud");
        if (*esem) Need(!es_model.empty(), "--model"), Need(!es_manifest.empty(), "--manifest");
        if (*ereg) Need(!eg_manifest.empty(), "--manifest");

        if (*train) {
            Config config;
            ResolveConfig(train_c, config);
            std::vector<Cloud> clouds(train_clouds.size());
            std::vector<const kpf_cloud *> ptrs;
            for (size_t i = 0; i < train_clouds.size(); ++i) {
                LoadCloud(train_clouds[i], train_canonical, clouds[i]);
                ptrs.push_back(clouds[i].get());
            }
            Trainer trainer;
            Check(kpf_trainer_create(config.get(), trainer.out()), "creating trainer");
            if (!resume.empty()) Check(kpf_trainer_resume(trainer.get(), resume.c_str()), "resuming");
            Check(kpf_trainer_fit(trainer.get(), ptrs.data(), ptrs.size(),
                                  ckpt_dir.empty() ? nullptr : ckpt_dir.c_str(),
                                  train_c.workers, stop_after, Progress, nullptr),
                  "training");
            Check(kpf_trainer_save(trainer.get(), train_c.out.c_str()), "saving checkpoint");
            int epoch = 0;
            Check(kpf_trainer_epoch(trainer.get(), &epoch), "reading epoch");
            std::cout << "wrote " << train_c.out << " after epoch " << epoch << "\n";
        } else if (*extract) {
            Config config;
            ResolveConfig(ex_c, config);
            Model model;
            Check(kpf_model_load(ex_model.c_str(), model.out()), "loading model");
            Cloud cloud;
            LoadCloud(ex_cloud, ex_canonical, cloud);
            Keypoints kps;
            Check(kpf_extract(model.get(), cloud.get(), config.get(), kps.out()), "extracting");
            Check(kpf_keypoints_save(kps.get(), ex_c.out.c_str()), "saving keypoints");
            size_t n = 0;
            Check(kpf_keypoints_size(kps.get(), &n), "counting keypoints");
            std::cout << "wrote " << n << " keypoints to " << ex_c.out << "\n";
        } else if (*recon) {
            Config config;
            ResolveConfig(rc_c, config);
            Model model;
            Check(kpf_model_load(rc_model.c_str(), model.out()), "loading model");
            Cloud cloud;
            LoadCloud(rc_cloud, rc_canonical, cloud);
            size_t nv = 0, nt = 0;
            Check(kpf_reconstruct(model.get(), cloud.get(), iso, rc_res, rc_c.out.c_str(), &nv, &nt),
                  "reconstructing");
            std::cout << "wrote " << nv << " vertices and " << nt << " triangles to " << rc_c.out
                      << "\n";
        } else if (*slice) {
            Config config;
            ResolveConfig(sl_c, config);
            Model model;
            Check(kpf_model_load(sl_model.c_str(), model.out()), "loading model");
            Cloud cloud;
            LoadCloud(sl_cloud, sl_canonical, cloud);
            std::vector<double> image(static_cast<size_t>(sl_res) * sl_res);
            Check(kpf_slice(model.get(), cloud.get(),
                            field == "occupancy" ? KPF_FIELD_OCCUPANCY : KPF_FIELD_SALIENCY, axis,
                            mode == "mid" ? KPF_SLICE_MID : KPF_SLICE_MAX, sl_res, image.data()),
                  "slicing");
            const bool csv = sl_c.out.size() >= 4 && sl_c.out.substr(sl_c.out.size() - 4) == ".csv";
            std::string text = csv ? "" : "P2\n" + std::to_string(sl_res) + " " +
                                              std::to_string(sl_res) + "\n255\n";
            for (int r = 0; r < sl_res; ++r) {
                for (int c = 0; c < sl_res; ++c) {
                    const double v = image[static_cast<size_t>(r) * sl_res + c];
                    char buf[32];
                    if (csv) {
                        std::snprintf(buf, sizeof buf, "%.9g", v);
                    } else {
                        const double clamped = v < 0 ? 0 : (v > 1 ? 1 : v);
                        std::snprintf(buf, sizeof buf, "%d", static_cast<int>(clamped * 255 + 0.5));
                    }
                    text += buf;
                    text += c + 1 < sl_res ? (csv ? "," : " ") : "\n";
                }
            }
            const std::string tmp = sl_c.out + ".tmp";
            FILE *f = std::fopen(tmp.c_str(), "wb");
            if (!f || std::fwrite(text.data(), 1, text.size(), f) != text.size() ||
                std::fclose(f) != 0 || std::rename(tmp.c_str(), sl_c.out.c_str()) != 0) {
                throw ApiFailure("cannot write " + sl_c.out);
            }
            std::cout << "wrote " << sl_c.out << "\n";
        } else if (*erep) {
            Config config;
            ResolveConfig(er_c, config);
            Model model;
            Check(kpf_model_load(er_model.c_str(), model.out()), "loading model");
            Cloud cloud;
            LoadCloud(er_cloud, er_canonical, cloud);
            kpf_sweep_kind k = KPF_SWEEP_THRESHOLD;
            if (sweep == "downsample") k = KPF_SWEEP_DOWNSAMPLE;
            if (sweep == "noise") k = KPF_SWEEP_NOISE;
            if (levels.empty()) {
                if (k == KPF_SWEEP_THRESHOLD) levels = {0.02, 0.04, 0.06, 0.08, 0.1};
                if (k == KPF_SWEEP_DOWNSAMPLE) levels = {1, 2, 4, 8};
                if (k == KPF_SWEEP_NOISE) levels = {0, 0.02, 0.04, 0.06};
            }
            int monotone = 0;
            Check(kpf_eval_repeat(model.get(), cloud.get(), config.get(), k, levels.data(),
                                  levels.size(), epsilon, trials, SeedOr(er_c, 0),
                                  er_c.out.c_str(), &monotone),
                  "evaluating repeatability");
            std::cout << "wrote " << er_c.out << " monotone=" << monotone << "\n";
            if (!monotone) {
                std::cerr << (strict ? "error: " : "warning: ") << sweep
                          << " sweep is not monotone within tolerance\n";
                if (strict) return 1;
            }
        } else if (*esem) {
            Config config;
            ResolveConfig(es_c, config);
            Model model;
            Check(kpf_model_load(es_model.c_str(), model.out()), "loading model");
            if (thresholds.empty()) thresholds = {0.01, 0.02, 0.04, 0.06, 0.08, 0.1};
            Check(kpf_eval_semantic(model.get(), es_manifest.c_str(), config.get(),
                                    protocol == "annotated" ? KPF_MIOU_ANNOTATED
                                                            : KPF_MIOU_PAIRWISE,
                                    thresholds.data(), thresholds.size(), geodesic_k,
                                    es_c.out.c_str()),
                  "evaluating mIoU");
            std::cout << "wrote " << es_c.out << " (greedy-matching IoU)\n";
        } else if (*ereg) {
            if (eg_model.empty() == !random_detector) {
                throw CLI::ValidationError("give exactly one of --model and --random-detector");
            }
            Config config;
            ResolveConfig(eg_c, config);
            Model model;
            if (!eg_model.empty()) {
                Check(kpf_model_load(eg_model.c_str(), model.out()), "loading model");
            }
            if (budgets.empty()) budgets = {250, 500, 1000};
            Check(kpf_eval_register(model.get(), eg_manifest.c_str(), config.get(), budgets.data(),
                                    budgets.size(), radius, SeedOr(eg_c, 0), eg_c.out.c_str()),
                  "evaluating registration");
            std::cout << "wrote " << eg_c.out << "\n";
        } else if (*synth) {
            Cloud cloud;
            Check(kpf_synth(kind.c_str(), sizes.empty() ? nullptr : sizes.data(), sizes.size(),
                            n_points, SeedOr(sy_c, 0), cloud.out()),
                  "generating shape");
            Check(kpf_cloud_save(cloud.get(), sy_c.out.c_str(), 0), "saving cloud");
            std::cout << "wrote " << n_points << " points to " << sy_c.out << "\n";
        }
    } catch (const CLI::ValidationError &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception &e) {
        std::string msg = e.what();
        for (auto &ch : msg) if (ch == '\n') ch = ' ';
        std::cerr << "error: " << msg << "\n";
        return 1;
    }
    return 0;
}
