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

// Exercises the shared library through its C header only.
#include "kpfield/kpfield.h"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace {

namespace fs = std::filesystem;

class CApi : public ::testing::Test {
  protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("kpf_capi_" +
                std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }
    std::string Path(const std::string &name) const { return (dir_ / name).string(); }
    fs::path dir_;
};

std::vector<std::string> ReadLines(const std::string &path) {
    std::ifstream in(path);
    std::vector<std::string> lines;
    for (std::string l; std::getline(in, l);) lines.push_back(l);
    return lines;
}

kpf_config *TinyConfig() {
    kpf_config *c = nullptr;
    EXPECT_EQ(kpf_config_preset("lite-overfit", &c), KPF_OK);
    for (const char *kv : {"model.volume=8/8/8", "train.n_points=256", "train.grid_resolution=4/4/4",
                           "train.n_grids=4", "train.epochs_first=2", "train.epochs_total=3",
                           "train.n_pos=64", "train.n_neg=64", "extract.thr_s=0.3"}) {
        EXPECT_EQ(kpf_config_set(c, kv), KPF_OK) << kpf_last_error();
    }
    return c;
}

TEST_F(CApi, ErrorsCarryCodesAndMessages) {
    kpf_cloud *c = nullptr;
    EXPECT_EQ(kpf_cloud_load(Path("absent.ply").c_str(), 1, &c), KPF_ERR_IO);
    EXPECT_NE(std::string(kpf_last_error()).find("absent.ply"), std::string::npos);
    EXPECT_EQ(c, nullptr);
    EXPECT_EQ(kpf_cloud_load(nullptr, 1, &c), KPF_ERR_INVALID_ARGUMENT);
    kpf_config *cfg = nullptr;
    EXPECT_EQ(kpf_config_preset("nope", &cfg), KPF_ERR_CONFIG);
    ASSERT_EQ(kpf_config_preset("smpl", &cfg), KPF_OK);
    EXPECT_STREQ(kpf_last_error(), "");
    EXPECT_EQ(kpf_config_set(cfg, "train.bogus=1"), KPF_ERR_CONFIG);
    EXPECT_NE(std::string(kpf_last_error()).find("train.bogus"), std::string::npos);
    kpf_config_free(cfg);
    kpf_cloud_free(nullptr);
    EXPECT_STRNE(kpf_version(), "");
}

TEST_F(CApi, CloudsRoundTripInRawUnits) {
    const std::vector<double> xyz{10, 20, 30, 12, 21, 35, 11, 25, 31, 14, 22, 33};
    kpf_cloud *c = nullptr;
    ASSERT_EQ(kpf_cloud_from_points(xyz.data(), 4, 1, &c), KPF_OK);
    size_t n = 0;
    kpf_cloud_size(c, &n);
    ASSERT_EQ(n, 4u);
    ASSERT_EQ(kpf_cloud_save(c, Path("c.ply").c_str(), 1), KPF_OK);
    kpf_cloud *back = nullptr;
    ASSERT_EQ(kpf_cloud_load(Path("c.ply").c_str(), 1, &back), KPF_OK);
    std::vector<double> got(12);
    kpf_cloud_points(back, got.data());
    EXPECT_EQ(got, xyz);
    kpf_cloud_free(back);
    kpf_cloud_free(c);
    // Without normalization the points must already be canonical.
    EXPECT_EQ(kpf_cloud_from_points(xyz.data(), 4, 0, &c), KPF_ERR_INVALID_ARGUMENT);
}

TEST_F(CApi, ConfigTextRoundTrips) {
    kpf_config *c = TinyConfig();
    size_t need = 0;
    EXPECT_EQ(kpf_config_format(c, nullptr, 0, &need), KPF_OK);
    std::string text(need, '\0');
    ASSERT_EQ(kpf_config_format(c, text.data(), text.size(), &need), KPF_OK);
    text.resize(need - 1);
    EXPECT_NE(text.find("thr_s = 0.3"), std::string::npos) << text;
    std::ofstream(Path("c.cfg")) << text;
    kpf_config *back = nullptr;
    ASSERT_EQ(kpf_config_load(Path("c.cfg").c_str(), &back), KPF_OK) << kpf_last_error();
    std::string again(need, '\0');
    kpf_config_format(back, again.data(), again.size(), &need);
    again.resize(need - 1);
    EXPECT_EQ(again, text);
    kpf_config_free(back);
    kpf_config_free(c);
}

TEST_F(CApi, TrainResumeExtractAndInspect) {
    kpf_config *cfg = TinyConfig();
    kpf_cloud *box = nullptr;
    ASSERT_EQ(kpf_synth("box", nullptr, 0, 512, 3, &box), KPF_OK);

    kpf_trainer *full = nullptr;
    ASSERT_EQ(kpf_trainer_create(cfg, &full), KPF_OK);
    std::vector<std::string> lines;
    auto sink = [](const char *line, void *user) {
        static_cast<std::vector<std::string> *>(user)->push_back(line);
    };
    const kpf_cloud *clouds[] = {box};
    ASSERT_EQ(kpf_trainer_fit(full, clouds, 1, Path("ck").c_str(), 1, 0, sink, &lines), KPF_OK)
        << kpf_last_error();
    EXPECT_EQ(lines.size(), 3u);
    EXPECT_EQ(lines[0].rfind("epoch=0 step=1 l_o=", 0), 0u) << lines[0];
    EXPECT_TRUE(fs::exists(Path("ck/epoch_0002.ckpt")));
    EXPECT_TRUE(fs::exists(Path("ck/last.ckpt")));

    kpf_trainer *part = nullptr;
    ASSERT_EQ(kpf_trainer_create(cfg, &part), KPF_OK);
    ASSERT_EQ(kpf_trainer_resume(part, Path("ck/epoch_0001.ckpt").c_str()), KPF_OK);
    int epoch = 0;
    kpf_trainer_epoch(part, &epoch);
    EXPECT_EQ(epoch, 1);
    ASSERT_EQ(kpf_trainer_fit(part, clouds, 1, nullptr, 2, 0, nullptr, nullptr), KPF_OK);
    kpf_trainer_save(part, Path("resumed.ckpt").c_str());
    kpf_trainer_save(full, Path("full.ckpt").c_str());
    std::stringstream a, b;
    a << std::ifstream(Path("resumed.ckpt"), std::ios::binary).rdbuf();
    b << std::ifstream(Path("full.ckpt"), std::ios::binary).rdbuf();
    EXPECT_EQ(a.str(), b.str());

    kpf_model *model = nullptr;
    ASSERT_EQ(kpf_model_load(Path("full.ckpt").c_str(), &model), KPF_OK);
    kpf_keypoints *kps = nullptr;
    ASSERT_EQ(kpf_extract(model, box, cfg, &kps), KPF_OK) << kpf_last_error();
    size_t n = 0;
    kpf_keypoints_size(kps, &n);
    std::vector<double> scores(n);
    kpf_keypoints_get(kps, nullptr, scores.data());
    for (double s : scores) EXPECT_GT(s, 0.3);
    ASSERT_EQ(kpf_keypoints_save(kps, Path("k.txt").c_str()), KPF_OK);
    const auto kl = ReadLines(Path("k.txt"));
    size_t data_lines = 0;
    for (const auto &l : kl) data_lines += !l.empty() && l[0] != '#';
    EXPECT_EQ(data_lines, n);
    kpf_keypoints_free(kps);

    size_t nv = 0, nt = 0;
    ASSERT_EQ(kpf_reconstruct(model, box, 0.4, 16, Path("m.ply").c_str(), &nv, &nt), KPF_OK);
    EXPECT_TRUE(fs::exists(Path("m.ply")));
    std::vector<double> img(9 * 9, -1);
    ASSERT_EQ(kpf_slice(model, box, KPF_FIELD_SALIENCY, 2, KPF_SLICE_MAX, 9, img.data()), KPF_OK);
    for (double v : img) EXPECT_TRUE(v >= 0 && v <= 1);
    EXPECT_EQ(kpf_slice(model, box, KPF_FIELD_SALIENCY, 3, KPF_SLICE_MAX, 9, img.data()),
              KPF_ERR_INVALID_ARGUMENT);

    const double sigmas[] = {0.0, 0.02};
    int monotone = -1;
    ASSERT_EQ(kpf_eval_repeat(model, box, cfg, KPF_SWEEP_NOISE, sigmas, 2, 0.06, 2, 1,
                              Path("r.csv").c_str(), &monotone),
              KPF_OK)
        << kpf_last_error();
    const auto rows = ReadLines(Path("r.csv"));
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0], "level,forward,backward,mean,keypoints_a,keypoints_b,monotone");
    EXPECT_TRUE(monotone == 0 || monotone == 1);

    kpf_model_free(model);
    kpf_trainer_free(part);
    kpf_trainer_free(full);
    kpf_cloud_free(box);
    kpf_config_free(cfg);
}

TEST_F(CApi, RegistrationWithRandomDetector) {
    // Two-box scene and a rotated copy, in raw units of centimeters.
    kpf_cloud *scene = nullptr;
    ASSERT_EQ(kpf_synth("two-box", nullptr, 0, 1024, 4, &scene), KPF_OK);
    std::vector<double> a(3 * 1024), b(3 * 1024);
    kpf_cloud_points(scene, a.data());
    const double c = std::cos(0.3), s = std::sin(0.3);
    for (size_t i = 0; i < 1024; ++i) {
        const double x = a[3 * i] * 100, y = a[3 * i + 1] * 100, z = a[3 * i + 2] * 100;
        a[3 * i] = x, a[3 * i + 1] = y, a[3 * i + 2] = z;
        b[3 * i] = c * x - s * y + 5;
        b[3 * i + 1] = s * x + c * y;
        b[3 * i + 2] = z;
    }
    kpf_cloud *ca = nullptr, *cb = nullptr;
    kpf_cloud_from_points(a.data(), 1024, 1, &ca);
    kpf_cloud_from_points(b.data(), 1024, 1, &cb);
    kpf_cloud_save(ca, Path("a.ply").c_str(), 0);
    kpf_cloud_save(cb, Path("b.ply").c_str(), 0);
    std::ofstream(Path("m.txt")) << std::setprecision(17) << "cloud=a.ply partner=b.ply unit_scale=0.01 transform=" << c
                                 << "," << -s << ",0," << s << "," << c
                                 << ",0,0,0,1,5,0,0\n";
    kpf_config *cfg = nullptr;
    kpf_config_preset("registration", &cfg);
    const int budgets[] = {64, 128};
    ASSERT_EQ(kpf_eval_register(nullptr, Path("m.txt").c_str(), cfg, budgets, 2, 0.1, 7,
                                Path("reg.csv").c_str()),
              KPF_OK)
        << kpf_last_error();
    const auto rows = ReadLines(Path("reg.csv"));
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0], "budget,fmr,inlier_ratio,rr");
    EXPECT_EQ(rows[1].rfind("64,", 0), 0u);
    kpf_config_free(cfg);
    kpf_cloud_free(ca);
    kpf_cloud_free(cb);
    kpf_cloud_free(scene);
}

}  // namespace
