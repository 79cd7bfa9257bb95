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

#include "kpfield/dataio.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "kpfield/error.hpp"
#include "kpfield/synthetic.hpp"
#include "test_support.hpp"

namespace kpf {
namespace {

namespace fs = std::filesystem;

class TempDir : public ::testing::Test {
  protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("kpf_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }
    std::string Path(const std::string &name) const { return (dir_ / name).string(); }
    void Write(const std::string &name, const std::string &text) const {
        std::ofstream(Path(name), std::ios::binary) << text;
    }
    fs::path dir_;
};

ErrorCode CodeOf(const std::function<void()> &f, std::string *message = nullptr) {
    try {
        f();
    } catch (const Error &e) {
        if (message) *message = e.what();
        return e.code();
    }
    return ErrorCode{};  // no error
}

Points AwkwardPoints() {
    Rng rng(1);
    Points p = testing::RandomPoints(rng, 57, 3.0);
    p(0, 0) = 1.0 / 3.0;
    p(1, 0) = -1e-300;
    p(2, 0) = 123456789.123456789;
    return p;
}

// ---- clouds ----

using CloudIo = TempDir;

TEST_F(CloudIo, RoundTripsAreBitwise) {
    const Points p = AwkwardPoints();
    SaveCloudPly(Path("a.ply"), p, false);
    SaveCloudPly(Path("b.ply"), p, true);
    SaveCloudXyz(Path("c.xyz"), p);
    EXPECT_EQ(LoadCloud(Path("a.ply")), p);
    EXPECT_EQ(LoadCloud(Path("b.ply")), p);
    EXPECT_EQ(LoadCloud(Path("c.xyz")), p);
}

TEST_F(CloudIo, ReadsForeignPlyLayouts) {
    Write("f.ply",
          "ply\nformat ascii 1.0\ncomment made elsewhere\nelement vertex 2\n"
          "property float nx\nproperty float x\nproperty float y\nproperty float z\n"
          "property uchar red\nelement face 0\nproperty list uchar int vertex_indices\n"
          "end_header\n9 1 2 3 255\n9 4 5 6 0\n");
    Points want(3, 2);
    want << 1, 4, 2, 5, 3, 6;
    EXPECT_EQ(LoadCloud(Path("f.ply")), want);
    Write("x.txt", "1 2 3 0.5\n\n4 5 6 0.5\n");
    EXPECT_EQ(LoadCloud(Path("x.txt")), want);
}

TEST_F(CloudIo, NonFiniteRowIsNamed) {
    Write("bad.xyz", "0 0 0\n1 1 1\n2 nan 2\n");
    std::string msg;
    EXPECT_EQ(CodeOf([&] { LoadCloud(Path("bad.xyz")); }, &msg), ErrorCode::kFormat);
    EXPECT_NE(msg.find("row 3"), std::string::npos) << msg;

    Write("bad.ply", "ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\n"
                     "property double y\nproperty double z\nend_header\n0 0 0\ninf 0 0\n");
    EXPECT_EQ(CodeOf([&] { LoadCloud(Path("bad.ply")); }, &msg), ErrorCode::kFormat);
    EXPECT_NE(msg.find("row 2"), std::string::npos) << msg;
}

TEST_F(CloudIo, EmptyMissingAndMalformedInputs) {
    Write("empty.xyz", "# nothing\n");
    EXPECT_EQ(CodeOf([&] { LoadCloud(Path("empty.xyz")); }), ErrorCode::kFormat);
    Write("zero.ply", "ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\n"
                      "property float y\nproperty float z\nend_header\n");
    EXPECT_EQ(CodeOf([&] { LoadCloud(Path("zero.ply")); }), ErrorCode::kFormat);
    Write("short.xyz", "1 2\n");
    EXPECT_EQ(CodeOf([&] { LoadCloud(Path("short.xyz")); }), ErrorCode::kFormat);
    EXPECT_EQ(CodeOf([&] { LoadCloud(Path("absent.ply")); }), ErrorCode::kIo);
}

TEST_F(CloudIo, MeshAndTextOutputs) {
    SurfaceMesh mesh;
    mesh.vertices = Points::Identity(3, 3);
    mesh.triangles = Eigen::Matrix3Xi(3, 1);
    mesh.triangles << 0, 1, 2;
    SaveMeshPly(Path("m.ply"), mesh);
    EXPECT_EQ(LoadCloud(Path("m.ply")), mesh.vertices);

    Eigen::MatrixXd img(2, 3);
    img << 0, 0.5, 1, 1, 0.25, 0;
    SaveImagePgm(Path("s.pgm"), img);
    std::ifstream pgm(Path("s.pgm"), std::ios::binary);
    std::string magic;
    int w = 0, h = 0, max = 0;
    pgm >> magic >> w >> h >> max;
    EXPECT_EQ(magic, "P2");
    EXPECT_EQ(w, 3);
    EXPECT_EQ(h, 2);
    EXPECT_EQ(max, 255);

    SaveMatrixCsv(Path("s.csv"), img);
    std::ifstream csv(Path("s.csv"));
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 2);

    SaveKeypoints(Path("k.txt"), Points::Ones(3, 2), Eigen::Vector2d(0.9, 0.8), "note");
    std::ifstream kp(Path("k.txt"));
    std::getline(kp, line);
    EXPECT_EQ(line.rfind("#", 0), 0u);
    EXPECT_FALSE(fs::exists(Path("k.txt.tmp")));
}

// ---- manifests ----

using Manifest = TempDir;

TEST_F(Manifest, ParsesRecordsAndResolvesPaths) {
    Write("m.txt",
          "# comment\n"
          "cloud=a.ply split=test unit_scale=0.01 partner=/abs/b.ply annotation=a.kp\n"
          "\n"
          "cloud=c.xyz transform=1,0,0,0,1,0,0,0,1,0.5,0,-1\n");
    const auto recs = LoadManifest(Path("m.txt"));
    ASSERT_EQ(recs.size(), 2u);
    EXPECT_EQ(recs[0].cloud, Path("a.ply"));
    EXPECT_EQ(recs[0].annotation, Path("a.kp"));
    EXPECT_EQ(recs[0].partner, "/abs/b.ply");
    EXPECT_EQ(recs[0].split, "test");
    EXPECT_DOUBLE_EQ(recs[0].unit_scale, 0.01);
    EXPECT_FALSE(recs[0].transform.has_value());
    ASSERT_TRUE(recs[1].transform.has_value());
    EXPECT_EQ(recs[1].transform->translation(), Eigen::Vector3d(0.5, 0, -1));
    EXPECT_EQ(recs[1].split, "train");
}

TEST_F(Manifest, RejectsBadRecords) {
    for (const char *bad : {"split=test\n", "cloud=a split=val\n", "cloud=a unit_scale=0\n",
                            "cloud=a transform=1,2,3\n", "cloud=a colour=red\n",
                            "cloud=a transform=2,0,0,0,1,0,0,0,1,0,0,0\n"}) {
        Write("m.txt", bad);
        EXPECT_EQ(CodeOf([&] { LoadManifest(Path("m.txt")); }), ErrorCode::kFormat) << bad;
    }
}

// ---- checkpoints ----

using Checkpoints = TempDir;

TrainConfig SmallTrainConfig() {
    TrainConfig c;
    c.model = testing::TinyLiteConfig();
    c.n_points = 128;
    c.grid_resolution = {4, 4, 4};
    c.n_grids = 2;
    c.batch_size = 1;
    c.epochs_first = 1;
    c.epochs_total = 2;
    c.n_pos = c.n_neg = 32;
    return c;
}

TEST_F(Checkpoints, RoundTripIsLossless) {
    const TrainConfig c = SmallTrainConfig();
    TrainState s(c);
    SyntheticShapeSpec spec;
    spec.n_points = 256;
    FitOptions o;
    o.stop_after_epoch = 1;
    Fit(s, {GenerateSynthetic(spec).cloud}, c, o);
    const Checkpoint ck = MakeCheckpoint(s);
    SaveCheckpoint(Path("a.ckpt"), ck);
    const Checkpoint back = LoadCheckpoint(Path("a.ckpt"));
    EXPECT_TRUE(back.config == ck.config);
    EXPECT_EQ(back.theta, ck.theta);
    EXPECT_EQ(back.adam.m, ck.adam.m);
    EXPECT_EQ(back.adam.v, ck.adam.v);
    EXPECT_EQ(back.adam.step, ck.adam.step);
    EXPECT_EQ(back.epoch, 1);
    EXPECT_EQ(back.step, ck.step);
    EXPECT_EQ(back.rng_state, ck.rng_state);
    EXPECT_EQ(back.history, ck.history);

    TrainState restored(c);
    RestoreState(back, restored);
    EXPECT_EQ(restored.rng, s.rng);
    EXPECT_EQ(ModelFromCheckpoint(back).theta(), s.model.theta());

    // Saving the reloaded checkpoint reproduces the file byte for byte.
    SaveCheckpoint(Path("b.ckpt"), back);
    std::ifstream a(Path("a.ckpt"), std::ios::binary), b(Path("b.ckpt"), std::ios::binary);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    EXPECT_EQ(sa.str(), sb.str());
}

TEST_F(Checkpoints, RejectsDamageVersionAndOtherConfigs) {
    const TrainConfig c = SmallTrainConfig();
    SaveCheckpoint(Path("a.ckpt"), MakeCheckpoint(TrainState(c)));
    std::ifstream in(Path("a.ckpt"), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string good = ss.str();

    Write("trunc.ckpt", good.substr(0, good.size() / 2));
    EXPECT_EQ(CodeOf([&] { LoadCheckpoint(Path("trunc.ckpt")); }), ErrorCode::kFormat);
    std::string flipped = good;
    flipped[good.size() / 2] ^= 0x10;
    Write("flip.ckpt", flipped);
    EXPECT_EQ(CodeOf([&] { LoadCheckpoint(Path("flip.ckpt")); }), ErrorCode::kFormat);
    std::string newer = good;
    newer[4] = 2;
    Write("v2.ckpt", newer);
    std::string msg;
    EXPECT_EQ(CodeOf([&] { LoadCheckpoint(Path("v2.ckpt")); }, &msg), ErrorCode::kFormat);
    EXPECT_NE(msg.find("version 2"), std::string::npos) << msg;
    Write("junk.ckpt", "not a checkpoint at all");
    EXPECT_EQ(CodeOf([&] { LoadCheckpoint(Path("junk.ckpt")); }), ErrorCode::kFormat);

    TrainConfig other = c;
    other.model = testing::TinyFullConfig();
    TrainState s(other);
    EXPECT_EQ(CodeOf([&] { RestoreState(LoadCheckpoint(Path("a.ckpt")), s); }), ErrorCode::kConfig);
}

// ---- configuration ----

TEST(Presets, MatchReferenceValues) {
    struct Row {
        const char *name;
        int n, vol, grid;
        double u;
        int n_grids, b, ef, el;
        double thr_s;
    };
    const Row rows[] = {
        {"keypointnet", 2048, 64, 8, 8, 500, 16, 40, 60, 0.7},
        {"smpl", 2048, 64, 8, 8, 500, 16, 20, 30, 0.7},
        {"modelnet40", 5000, 64, 8, 6, 500, 16, 40, 60, 0.7},
        {"3dmatch", 10000, 100, 10, 8, 150, 6, 15, 20, 0.7},
        {"registration", 2048, 64, 6, 12, 500, 16, 40, 60, 0.4},
    };
    for (const Row &r : rows) {
        SCOPED_TRACE(r.name);
        const RunConfig c = Preset(r.name);
        EXPECT_EQ(c.train.n_points, r.n);
        EXPECT_EQ(c.train.model.volume, (GridResolution{r.vol, r.vol, r.vol}));
        EXPECT_EQ(c.train.grid_resolution, (GridResolution{r.grid, r.grid, r.grid}));
        EXPECT_EQ(c.train.grid_scale, r.u);
        EXPECT_EQ(c.train.n_grids, r.n_grids);
        EXPECT_EQ(c.train.batch_size, r.b);
        EXPECT_EQ(c.train.epochs_first, r.ef);
        EXPECT_EQ(c.train.epochs_total, r.el);
        EXPECT_EQ(c.train.loss.thr_o, 0.5);
        EXPECT_EQ(c.extract.thr_o, 0.5);
        EXPECT_EQ(c.extract.thr_s, r.thr_s);
        EXPECT_EQ(c.extract.lambda, 1e-3);
        EXPECT_EQ(c.extract.iterations, 10);
        EXPECT_EQ(c.train.lr, 1e-4);
        EXPECT_EQ(c.train.model.encoder, EncoderVariant::kFull);
    }
    EXPECT_EQ(CodeOf([] { Preset("shapenet"); }), ErrorCode::kConfig);
}

TEST(Config, FormatParseRoundTrip) {
    for (const auto &name : PresetNames()) {
        const RunConfig c = Preset(name);
        EXPECT_TRUE(ParseConfig(FormatConfig(c)) == c) << name;
    }
    RunConfig c = Preset("smpl");
    ApplyOverride(c, "train.lr=3e-4");
    ApplyOverride(c, "model.volume=8/9/10");
    EXPECT_EQ(c.train.lr, 3e-4);
    EXPECT_TRUE(ParseConfig(FormatConfig(c)) == c);
}

TEST(Config, PresetFileWithOverrides) {
    const RunConfig c = ParseConfig("preset = 3dmatch\n[extract]\nthr_s = 0.6  # looser\n");
    RunConfig want = Preset("3dmatch");
    want.extract.thr_s = 0.6;
    EXPECT_TRUE(c == want);
}

TEST(Config, MissingAndUnknownKeysAreNamed) {
    std::string text;
    for (const auto &line : {"[model]", "volume = 8/8/8", "[train]", "n_points = 100",
                             "grid_resolution = 4/4/4", "grid_scale = 8", "n_grids = 2",
                             "batch_size = 1", "epochs_first = 1", "epochs_total = 2",
                             "thr_o = 0.5", "[extract]", "lambda = 0.001", "iterations = 10"}) {
        text += std::string(line) + "\n";
    }
    std::string msg;
    EXPECT_EQ(CodeOf([&] { ParseConfig(text); }, &msg), ErrorCode::kConfig);
    EXPECT_NE(msg.find("extract.thr_s"), std::string::npos) << msg;
    EXPECT_NO_THROW(ParseConfig(text + "thr_s = 0.7\n"));

    EXPECT_EQ(CodeOf([&] { ParseConfig("preset = smpl\n[train]\nlearning_rate = 1\n"); }, &msg),
              ErrorCode::kConfig);
    EXPECT_NE(msg.find("train.learning_rate"), std::string::npos) << msg;
    EXPECT_EQ(CodeOf([] { ParseConfig("preset = smpl\n[train]\nn_points = many\n"); }),
              ErrorCode::kConfig);
    RunConfig c = Preset("smpl");
    EXPECT_EQ(CodeOf([&] { ApplyOverride(c, "extract.nope=1"); }), ErrorCode::kConfig);
    EXPECT_EQ(CodeOf([&] { ApplyOverride(c, "extract.thr_s"); }), ErrorCode::kConfig);
}

// ---- synthetic shapes ----

TEST(Synthetic, BoxCornersAndSurface) {
    SyntheticShapeSpec s;
    s.kind = ShapeKind::kBox;
    const SyntheticShape box = GenerateSynthetic(s);
    ASSERT_EQ(box.corners.cols(), 8);
    for (Eigen::Index i = 0; i < 8; ++i) {
        EXPECT_TRUE(box.corners.col(i).cwiseAbs().isApprox(Eigen::Vector3d(0.3, 0.25, 0.2)));
        EXPECT_NEAR(box.surface_distance(box.corners.col(i)), 0.0, 1e-12);
    }
    EXPECT_EQ(box.cloud.size(), 2048);
    for (Eigen::Index i = 0; i < box.cloud.size(); ++i) {
        EXPECT_NEAR(box.surface_distance(box.cloud.point(i)), 0.0, 1e-12);
    }
    EXPECT_NEAR(box.surface_distance(Eigen::Vector3d::Zero()), 0.2, 1e-12);
}

TEST(Synthetic, SphereRadiusAndOctantBalance) {
    SyntheticShapeSpec s;
    s.n_points = 8000;
    const SyntheticShape sphere = GenerateSynthetic(s);
    EXPECT_TRUE(sphere.corners.cols() == 0);
    int octant[8] = {};
    for (Eigen::Index i = 0; i < sphere.cloud.size(); ++i) {
        const Eigen::Vector3d p = sphere.cloud.point(i);
        EXPECT_NEAR(p.norm(), 0.4, 1e-9);
        ++octant[(p.x() > 0) + 2 * (p.y() > 0) + 4 * (p.z() > 0)];
    }
    // Binomial(8000, 1/8): sd ~ 29.6, allow 4 sd.
    for (int o : octant) EXPECT_NEAR(o, 1000, 120);
}

TEST(Synthetic, SeedsAndKinds) {
    SyntheticShapeSpec s;
    s.kind = ShapeKind::kLBracket;
    const Points a = GenerateSynthetic(s).cloud.points();
    EXPECT_EQ(GenerateSynthetic(s).cloud.points(), a);
    s.seed = 1;
    EXPECT_NE(GenerateSynthetic(s).cloud.points(), a);
    for (const char *name : {"sphere", "box", "cylinder", "l-bracket", "two-box"}) {
        EXPECT_EQ(ShapeKindName(ParseShapeKind(name)), name);
        s.kind = ParseShapeKind(name);
        EXPECT_LE(GenerateSynthetic(s).cloud.points().cwiseAbs().maxCoeff(), 0.5);
    }
    EXPECT_THROW(ParseShapeKind("torus"), Error);
    s.kind = ShapeKind::kBox;
    s.size = {0.6, 0.5};
    EXPECT_THROW(GenerateSynthetic(s), Error);
}

}  // namespace
}  // namespace kpf
