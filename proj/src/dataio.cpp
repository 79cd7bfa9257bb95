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

#include <unistd.h>

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "kpfield/error.hpp"

namespace kpf {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

namespace fs = std::filesystem;

namespace {

std::string ReadFile(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) Fail(ErrorCode::kIo, "cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string Trim(const std::string &s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> Split(const std::string &s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream ss(s);
    while (std::getline(ss, cur, sep)) out.push_back(cur);
    return out;
}

// Shortest text that parses back to the same double.
std::string FormatDouble(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

// ---- PLY ----

enum class PlyType { kI8, kU8, kI16, kU16, kI32, kU32, kF32, kF64 };

PlyType ParsePlyType(const std::string &t) {
    if (t == "char" || t == "int8") return PlyType::kI8;
    if (t == "uchar" || t == "uint8") return PlyType::kU8;
    if (t == "short" || t == "int16") return PlyType::kI16;
    if (t == "ushort" || t == "uint16") return PlyType::kU16;
    if (t == "int" || t == "int32") return PlyType::kI32;
    if (t == "uint" || t == "uint32") return PlyType::kU32;
    if (t == "float" || t == "float32") return PlyType::kF32;
    if (t == "double" || t == "float64") return PlyType::kF64;
    Fail(ErrorCode::kFormat, "unsupported PLY property type '" + t + "'");
}

size_t PlySize(PlyType t) {
    switch (t) {
        case PlyType::kI8:
        case PlyType::kU8: return 1;
        case PlyType::kI16:
        case PlyType::kU16: return 2;
        case PlyType::kI32:
        case PlyType::kU32:
        case PlyType::kF32: return 4;
        case PlyType::kF64: return 8;
    }
    return 0;
}

template <typename T>
double ReadAs(const char *p) {
    T v;
    std::memcpy(&v, p, sizeof v);
    return static_cast<double>(v);
}

double ReadPly(PlyType t, const char *p) {
    switch (t) {
        case PlyType::kI8: return ReadAs<std::int8_t>(p);
        case PlyType::kU8: return ReadAs<std::uint8_t>(p);
        case PlyType::kI16: return ReadAs<std::int16_t>(p);
        case PlyType::kU16: return ReadAs<std::uint16_t>(p);
        case PlyType::kI32: return ReadAs<std::int32_t>(p);
        case PlyType::kU32: return ReadAs<std::uint32_t>(p);
        case PlyType::kF32: return ReadAs<float>(p);
        case PlyType::kF64: return ReadAs<double>(p);
    }
    return 0.0;
}

struct PlyElement {
    std::string name;
    long long count = 0;
    std::vector<std::pair<std::string, PlyType>> props;
    bool has_list = false;
};

void CheckRow(const Eigen::Vector3d &p, long long row, const std::string &path) {
    if (!p.allFinite()) {
        Fail(ErrorCode::kFormat, "non-finite coordinate in '" + path + "' at row " +
                                     std::to_string(row));
    }
}

Points LoadPly(const std::string &path) {
    const std::string data = ReadFile(path);
    const auto header_end = data.find("end_header");
    if (data.rfind("ply", 0) != 0 || header_end == std::string::npos) {
        Fail(ErrorCode::kFormat, "'" + path + "' is not a PLY file");
    }
    const auto body_start = data.find('\n', header_end);
    if (body_start == std::string::npos) Fail(ErrorCode::kFormat, "truncated PLY header");
    std::istringstream header(data.substr(0, header_end));
    std::string line, format;
    std::vector<PlyElement> elements;
    while (std::getline(header, line)) {
        std::istringstream ls(line);
        std::string word;
        ls >> word;
        if (word == "format") {
            ls >> format;
        } else if (word == "element") {
            PlyElement e;
            ls >> e.name >> e.count;
            elements.push_back(e);
        } else if (word == "property") {
            if (elements.empty()) Fail(ErrorCode::kFormat, "PLY property before element");
            std::string type, name;
            ls >> type;
            if (type == "list") {
                elements.back().has_list = true;
                continue;
            }
            ls >> name;
            elements.back().props.emplace_back(name, ParsePlyType(type));
        }
    }
    if (format != "ascii" && format != "binary_little_endian") {
        Fail(ErrorCode::kFormat, "unsupported PLY format '" + format + "'");
    }
    size_t vertex_idx = elements.size();
    for (size_t i = 0; i < elements.size(); ++i) {
        if (elements[i].name == "vertex") vertex_idx = i;
    }
    if (vertex_idx == elements.size()) Fail(ErrorCode::kFormat, "PLY has no vertex element");
    const PlyElement &vert = elements[vertex_idx];
    if (vert.has_list) Fail(ErrorCode::kFormat, "PLY vertex element has list properties");
    int col[3] = {-1, -1, -1};
    for (size_t p = 0; p < vert.props.size(); ++p) {
        for (int a = 0; a < 3; ++a) {
            if (vert.props[p].first == std::string(1, static_cast<char>('x' + a))) col[a] = static_cast<int>(p);
        }
    }
    if (col[0] < 0 || col[1] < 0 || col[2] < 0) {
        Fail(ErrorCode::kFormat, "PLY vertex element lacks x, y or z");
    }
    if (vert.count <= 0) Fail(ErrorCode::kFormat, "PLY file has zero points");

    Points out(3, vert.count);
    if (format == "ascii") {
        std::istringstream body(data.substr(body_start + 1));
        long long skip = 0;
        for (size_t i = 0; i < vertex_idx; ++i) skip += elements[i].count;
        for (long long i = 0; i < skip; ++i) std::getline(body, line);
        for (long long r = 0; r < vert.count; ++r) {
            if (!std::getline(body, line)) Fail(ErrorCode::kFormat, "truncated PLY body");
            std::istringstream ls(line);
            std::vector<double> vals;
            std::string tok;
            while (ls >> tok) vals.push_back(std::strtod(tok.c_str(), nullptr));
            if (vals.size() < vert.props.size()) {
                Fail(ErrorCode::kFormat, "short PLY row " + std::to_string(r + 1));
            }
            const Eigen::Vector3d p(vals[col[0]], vals[col[1]], vals[col[2]]);
            CheckRow(p, r + 1, path);
            out.col(r) = p;
        }
    } else {
        for (size_t i = 0; i < vertex_idx; ++i) {
            if (elements[i].count > 0) {
                Fail(ErrorCode::kFormat, "binary PLY: vertex element must come first");
            }
        }
        size_t stride = 0;
        std::vector<size_t> offset;
        for (const auto &[name, type] : vert.props) {
            offset.push_back(stride);
            stride += PlySize(type);
        }
        const size_t begin = body_start + 1;
        if (data.size() < begin + stride * static_cast<size_t>(vert.count)) {
            Fail(ErrorCode::kFormat, "truncated binary PLY body");
        }
        for (long long r = 0; r < vert.count; ++r) {
            const char *row = data.data() + begin + stride * static_cast<size_t>(r);
            Eigen::Vector3d p;
            for (int a = 0; a < 3; ++a) {
                p[a] = ReadPly(vert.props[col[a]].second, row + offset[col[a]]);
            }
            CheckRow(p, r + 1, path);
            out.col(r) = p;
        }
    }
    return out;
}

Points LoadXyz(const std::string &path) {
    std::istringstream in(ReadFile(path));
    std::vector<Eigen::Vector3d> pts;
    std::string line;
    long long row = 0;
    while (std::getline(in, line)) {
        ++row;
        const std::string t = Trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::istringstream ls(t);
        Eigen::Vector3d p;
        for (int a = 0; a < 3; ++a) {
            std::string tok;
            if (!(ls >> tok)) {
                Fail(ErrorCode::kFormat, "row " + std::to_string(row) + " of '" + path +
                                             "' has fewer than 3 values");
            }
            char *end = nullptr;
            p[a] = std::strtod(tok.c_str(), &end);
            if (end == tok.c_str() || *end != '\0') {
                Fail(ErrorCode::kFormat, "row " + std::to_string(row) + " of '" + path +
                                             "' is not numeric");
            }
        }
        CheckRow(p, row, path);
        pts.push_back(p);
    }
    if (pts.empty()) Fail(ErrorCode::kFormat, "'" + path + "' contains no points");
    Points out(3, static_cast<Eigen::Index>(pts.size()));
    for (size_t i = 0; i < pts.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = pts[i];
    return out;
}

// ---- binary checkpoint stream ----

class Writer {
public:
    template <typename T>
    void Put(const T &v) {
        buf_.append(reinterpret_cast<const char *>(&v), sizeof v);
    }
    void PutString(const std::string &s) {
        Put(static_cast<std::uint32_t>(s.size()));
        buf_.append(s);
    }
    void PutVector(const Eigen::VectorXd &v) {
        Put(static_cast<std::int64_t>(v.size()));
        buf_.append(reinterpret_cast<const char *>(v.data()),
                    sizeof(double) * static_cast<size_t>(v.size()));
    }
    std::string &buffer() { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    Reader(const std::string &data, size_t end) : data_(data), end_(end) {}
    template <typename T>
    T Get() {
        Need(sizeof(T));
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof v);
        pos_ += sizeof v;
        return v;
    }
    std::string GetString() {
        const auto n = Get<std::uint32_t>();
        Need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    Eigen::VectorXd GetVector() {
        const auto n = Get<std::int64_t>();
        if (n < 0) Fail(ErrorCode::kFormat, "corrupt checkpoint: negative length");
        Need(sizeof(double) * static_cast<size_t>(n));
        Eigen::VectorXd v(n);
        std::memcpy(v.data(), data_.data() + pos_, sizeof(double) * static_cast<size_t>(n));
        pos_ += sizeof(double) * static_cast<size_t>(n);
        return v;
    }
    bool AtEnd() const { return pos_ == end_; }

private:
    void Need(size_t n) const {
        if (pos_ + n > end_) Fail(ErrorCode::kFormat, "checkpoint is truncated or corrupt");
    }
    const std::string &data_;
    size_t end_;
    size_t pos_ = 0;
};

std::uint64_t Fnv1a(const char *p, size_t n) {
    std::uint64_t h = 1469598103934665603ULL;
    for (size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(p[i]);
        h *= 1099511628211ULL;
    }
    return h;
}

void PutConfig(Writer &w, const ModelConfig &c) {
    w.Put(static_cast<std::int32_t>(c.encoder == EncoderVariant::kLite ? 1 : 0));
    for (int v : {c.c1, c.c2, c.ce, c.volume.h, c.volume.w, c.volume.d, c.point_hidden,
                  c.pos_hidden, c.decoder_hidden, c.decoder_blocks, c.unet_levels,
                  c.unet_base}) {
        w.Put(static_cast<std::int32_t>(v));
    }
}

ModelConfig GetConfig(Reader &r) {
    ModelConfig c;
    c.encoder = r.Get<std::int32_t>() == 1 ? EncoderVariant::kLite : EncoderVariant::kFull;
    for (int *v : {&c.c1, &c.c2, &c.ce, &c.volume.h, &c.volume.w, &c.volume.d,
                   &c.point_hidden, &c.pos_hidden, &c.decoder_hidden, &c.decoder_blocks,
                   &c.unet_levels, &c.unet_base}) {
        *v = r.Get<std::int32_t>();
    }
    return c;
}

void CheckSections(const Checkpoint &ck, const nn::ParameterSet &params) {
    const auto &mine = params.sections();
    bool same = mine.size() == ck.sections.size() &&
                ck.theta.size() == params.size();
    for (size_t i = 0; same && i < mine.size(); ++i) {
        same = mine[i].name == ck.sections[i].name && mine[i].offset == ck.sections[i].offset &&
               mine[i].rows == ck.sections[i].rows && mine[i].cols == ck.sections[i].cols;
    }
    if (!same) Fail(ErrorCode::kFormat, "checkpoint parameter layout does not match the model");
}

// ---- config table ----

struct Key {
    std::string name;  // section.key
    std::function<void(RunConfig &, const std::string &)> set;
    std::function<std::string(const RunConfig &)> get;
};

int ParseInt(const std::string &key, const std::string &v) {
    char *end = nullptr;
    const long x = std::strtol(v.c_str(), &end, 10);
    if (v.empty() || *end != '\0') Fail(ErrorCode::kConfig, "key '" + key + "' expects an integer, got '" + v + "'");
    return static_cast<int>(x);
}

double ParseDouble(const std::string &key, const std::string &v) {
    char *end = nullptr;
    const double x = std::strtod(v.c_str(), &end);
    if (v.empty() || *end != '\0' || !std::isfinite(x)) {
        Fail(ErrorCode::kConfig, "key '" + key + "' expects a number, got '" + v + "'");
    }
    return x;
}

bool ParseBool(const std::string &key, const std::string &v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    Fail(ErrorCode::kConfig, "key '" + key + "' expects true or false, got '" + v + "'");
}

GridResolution ParseResolution(const std::string &key, const std::string &v) {
    const auto parts = Split(v, '/');
    if (parts.size() == 1) {
        const int n = ParseInt(key, parts[0]);
        return {n, n, n};
    }
    if (parts.size() != 3) Fail(ErrorCode::kConfig, "key '" + key + "' expects H/W/D, got '" + v + "'");
    return {ParseInt(key, parts[0]), ParseInt(key, parts[1]), ParseInt(key, parts[2])};
}

std::string FormatResolution(const GridResolution &r) {
    return std::to_string(r.h) + "/" + std::to_string(r.w) + "/" + std::to_string(r.d);
}

template <typename Field>
Key IntKey(const std::string &name, Field field) {
    return {name, [=](RunConfig &c, const std::string &v) { field(c) = ParseInt(name, v); },
            [=](const RunConfig &c) { return std::to_string(field(const_cast<RunConfig &>(c))); }};
}
template <typename Field>
Key DoubleKey(const std::string &name, Field field) {
    return {name, [=](RunConfig &c, const std::string &v) { field(c) = ParseDouble(name, v); },
            [=](const RunConfig &c) { return FormatDouble(field(const_cast<RunConfig &>(c))); }};
}
template <typename Field>
Key BoolKey(const std::string &name, Field field) {
    return {name, [=](RunConfig &c, const std::string &v) { field(c) = ParseBool(name, v); },
            [=](const RunConfig &c) { return std::string(field(const_cast<RunConfig &>(c)) ? "true" : "false"); }};
}
template <typename Field>
Key ResolutionKey(const std::string &name, Field field) {
    return {name, [=](RunConfig &c, const std::string &v) { field(c) = ParseResolution(name, v); },
            [=](const RunConfig &c) { return FormatResolution(field(const_cast<RunConfig &>(c))); }};
}

const std::vector<Key> &ConfigKeys() {
    static const std::vector<Key> keys = [] {
        std::vector<Key> k;
        k.push_back({"model.encoder",
                     [](RunConfig &c, const std::string &v) {
                         if (v == "full") c.train.model.encoder = EncoderVariant::kFull;
                         else if (v == "lite") c.train.model.encoder = EncoderVariant::kLite;
                         else Fail(ErrorCode::kConfig, "key 'model.encoder' expects full or lite, got '" + v + "'");
                     },
                     [](const RunConfig &c) {
                         return std::string(c.train.model.encoder == EncoderVariant::kLite ? "lite" : "full");
                     }});
        k.push_back(IntKey("model.c1", [](RunConfig &c) -> int & { return c.train.model.c1; }));
        k.push_back(IntKey("model.c2", [](RunConfig &c) -> int & { return c.train.model.c2; }));
        k.push_back(IntKey("model.ce", [](RunConfig &c) -> int & { return c.train.model.ce; }));
        k.push_back(ResolutionKey("model.volume", [](RunConfig &c) -> GridResolution & { return c.train.model.volume; }));
        k.push_back(IntKey("model.point_hidden", [](RunConfig &c) -> int & { return c.train.model.point_hidden; }));
        k.push_back(IntKey("model.pos_hidden", [](RunConfig &c) -> int & { return c.train.model.pos_hidden; }));
        k.push_back(IntKey("model.decoder_hidden", [](RunConfig &c) -> int & { return c.train.model.decoder_hidden; }));
        k.push_back(IntKey("model.decoder_blocks", [](RunConfig &c) -> int & { return c.train.model.decoder_blocks; }));
        k.push_back(IntKey("model.unet_levels", [](RunConfig &c) -> int & { return c.train.model.unet_levels; }));
        k.push_back(IntKey("model.unet_base", [](RunConfig &c) -> int & { return c.train.model.unet_base; }));

        k.push_back(IntKey("train.n_points", [](RunConfig &c) -> int & { return c.train.n_points; }));
        k.push_back(ResolutionKey("train.grid_resolution", [](RunConfig &c) -> GridResolution & { return c.train.grid_resolution; }));
        k.push_back(DoubleKey("train.grid_scale", [](RunConfig &c) -> double & { return c.train.grid_scale; }));
        k.push_back(IntKey("train.n_grids", [](RunConfig &c) -> int & { return c.train.n_grids; }));
        k.push_back(IntKey("train.batch_size", [](RunConfig &c) -> int & { return c.train.batch_size; }));
        k.push_back(IntKey("train.epochs_first", [](RunConfig &c) -> int & { return c.train.epochs_first; }));
        k.push_back(IntKey("train.epochs_total", [](RunConfig &c) -> int & { return c.train.epochs_total; }));
        k.push_back(IntKey("train.dataset_repeat", [](RunConfig &c) -> int & { return c.train.dataset_repeat; }));
        k.push_back(DoubleKey("train.lr", [](RunConfig &c) -> double & { return c.train.lr; }));
        k.push_back(DoubleKey("train.lr_drop_factor", [](RunConfig &c) -> double & { return c.train.lr_drop_factor; }));
        k.push_back(IntKey("train.n_pos", [](RunConfig &c) -> int & { return c.train.n_pos; }));
        k.push_back(IntKey("train.n_neg", [](RunConfig &c) -> int & { return c.train.n_neg; }));
        k.push_back(DoubleKey("train.thr_o", [](RunConfig &c) -> double & { return c.train.loss.thr_o; }));
        k.push_back(DoubleKey("train.w_o", [](RunConfig &c) -> double & { return c.train.loss.w_o; }));
        k.push_back(DoubleKey("train.w_r", [](RunConfig &c) -> double & { return c.train.loss.w_r; }));
        k.push_back(DoubleKey("train.w_m", [](RunConfig &c) -> double & { return c.train.loss.w_m; }));
        k.push_back(DoubleKey("train.w_s", [](RunConfig &c) -> double & { return c.train.loss.w_s; }));
        k.push_back(BoolKey("train.symmetric", [](RunConfig &c) -> bool & { return c.train.symmetric; }));
        k.push_back({"train.seed",
                     [](RunConfig &c, const std::string &v) {
                         char *end = nullptr;
                         const unsigned long long s = std::strtoull(v.c_str(), &end, 10);
                         if (v.empty() || *end != '\0') Fail(ErrorCode::kConfig, "key 'train.seed' expects an unsigned integer, got '" + v + "'");
                         c.train.seed = s;
                     },
                     [](const RunConfig &c) { return std::to_string(c.train.seed); }});

        k.push_back(BoolKey("aug.enabled", [](RunConfig &c) -> bool & { return c.train.aug.enabled; }));
        k.push_back(DoubleKey("aug.max_downsample", [](RunConfig &c) -> double & { return c.train.aug.max_downsample; }));
        k.push_back(DoubleKey("aug.max_noise_sigma", [](RunConfig &c) -> double & { return c.train.aug.max_noise_sigma; }));
        k.push_back(DoubleKey("aug.max_angle", [](RunConfig &c) -> double & { return c.train.aug.max_angle; }));
        k.push_back(DoubleKey("aug.max_translation", [](RunConfig &c) -> double & { return c.train.aug.max_translation; }));
        k.push_back(DoubleKey("aug.input_max_angle", [](RunConfig &c) -> double & { return c.train.aug.input_max_angle; }));

        k.push_back(DoubleKey("extract.lambda", [](RunConfig &c) -> double & { return c.extract.lambda; }));
        k.push_back(IntKey("extract.iterations", [](RunConfig &c) -> int & { return c.extract.iterations; }));
        k.push_back(DoubleKey("extract.thr_o", [](RunConfig &c) -> double & { return c.extract.thr_o; }));
        k.push_back(DoubleKey("extract.thr_s", [](RunConfig &c) -> double & { return c.extract.thr_s; }));
        k.push_back({"extract.infer_resolution",
                     [](RunConfig &c, const std::string &v) {
                         c.extract.infer_resolution = v == "auto" ? GridResolution{0, 0, 0}
                                                                  : ParseResolution("extract.infer_resolution", v);
                     },
                     [](const RunConfig &c) {
                         return c.extract.infer_resolution.h == 0 ? std::string("auto")
                                                                  : FormatResolution(c.extract.infer_resolution);
                     }});
        k.push_back(DoubleKey("extract.nms_radius", [](RunConfig &c) -> double & { return c.extract.nms_radius; }));
        k.push_back(IntKey("extract.max_keypoints", [](RunConfig &c) -> int & { return c.extract.max_keypoints; }));
        k.push_back(BoolKey("extract.snap_to_input", [](RunConfig &c) -> bool & { return c.extract.snap_to_input; }));
        return k;
    }();
    return keys;
}

const Key &FindKey(const std::string &name) {
    for (const auto &k : ConfigKeys()) {
        if (k.name == name) return k;
    }
    Fail(ErrorCode::kConfig, "unknown config key '" + name + "'");
}

RunConfig PresetRow(int n_points, int volume, int grid, double u, int n, int b, int ef,
                    int el, double thr_s) {
    RunConfig c;
    c.train.n_points = n_points;
    c.train.model.volume = {volume, volume, volume};
    c.train.grid_resolution = {grid, grid, grid};
    c.train.grid_scale = u;
    c.train.n_grids = n;
    c.train.batch_size = b;
    c.train.epochs_first = ef;
    c.train.epochs_total = el;
    c.train.loss.thr_o = 0.5;
    c.extract.thr_o = 0.5;
    c.extract.thr_s = thr_s;
    c.extract.lambda = 1e-3;
    c.extract.iterations = 10;
    return c;
}

}  // namespace

Points LoadCloud(const std::string &path) {
    const std::string ext = fs::path(path).extension().string();
    return ext == ".ply" || ext == ".PLY" ? LoadPly(path) : LoadXyz(path);
}

void WriteFileAtomic(const std::string &path, const std::string &contents) {
    const fs::path target(path);
    if (target.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(target.parent_path(), ec);
    }
    const std::string tmp = path + ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) Fail(ErrorCode::kIo, "cannot write '" + tmp + "'");
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        out.flush();
        if (!out) Fail(ErrorCode::kIo, "write to '" + tmp + "' failed");
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp, ec);
        Fail(ErrorCode::kIo, "cannot move output into place at '" + path + "'");
    }
}

void SaveCloudPly(const std::string &path, const Points &points, bool binary) {
    std::ostringstream out;
    out << "ply\nformat " << (binary ? "binary_little_endian" : "ascii") << " 1.0\n"
        << "element vertex " << points.cols() << "\n"
        << "property double x\nproperty double y\nproperty double z\nend_header\n";
    std::string s = out.str();
    if (binary) {
        s.append(reinterpret_cast<const char *>(points.data()),
                 sizeof(double) * static_cast<size_t>(points.size()));
    } else {
        for (Eigen::Index i = 0; i < points.cols(); ++i) {
            s += FormatDouble(points(0, i)) + " " + FormatDouble(points(1, i)) + " " +
                 FormatDouble(points(2, i)) + "\n";
        }
    }
    WriteFileAtomic(path, s);
}

void SaveCloudXyz(const std::string &path, const Points &points) {
    std::string s;
    for (Eigen::Index i = 0; i < points.cols(); ++i) {
        s += FormatDouble(points(0, i)) + " " + FormatDouble(points(1, i)) + " " +
             FormatDouble(points(2, i)) + "\n";
    }
    WriteFileAtomic(path, s);
}

void SaveMeshPly(const std::string &path, const SurfaceMesh &mesh) {
    std::ostringstream out;
    out << "ply\nformat ascii 1.0\nelement vertex " << mesh.vertices.cols()
        << "\nproperty double x\nproperty double y\nproperty double z\n"
        << "element face " << mesh.triangles.cols()
        << "\nproperty list uchar int vertex_indices\nend_header\n";
    for (Eigen::Index i = 0; i < mesh.vertices.cols(); ++i) {
        out << FormatDouble(mesh.vertices(0, i)) << ' ' << FormatDouble(mesh.vertices(1, i))
            << ' ' << FormatDouble(mesh.vertices(2, i)) << '\n';
    }
    for (Eigen::Index t = 0; t < mesh.triangles.cols(); ++t) {
        out << "3 " << mesh.triangles(0, t) << ' ' << mesh.triangles(1, t) << ' '
            << mesh.triangles(2, t) << '\n';
    }
    WriteFileAtomic(path, out.str());
}

std::vector<ManifestRecord> LoadManifest(const std::string &path) {
    std::istringstream in(ReadFile(path));
    const fs::path base = fs::path(path).parent_path();
    const auto resolve = [&](const std::string &p) {
        const fs::path fp(p);
        return (fp.is_absolute() ? fp : base / fp).string();
    };
    std::vector<ManifestRecord> out;
    std::string line;
    int row = 0;
    while (std::getline(in, line)) {
        ++row;
        const std::string t = Trim(line);
        if (t.empty() || t[0] == '#') continue;
        const std::string where = "manifest line " + std::to_string(row) + ": ";
        ManifestRecord rec;
        std::istringstream ls(t);
        std::string tok;
        while (ls >> tok) {
            const auto eq = tok.find('=');
            if (eq == std::string::npos) Fail(ErrorCode::kFormat, where + "expected key=value, got '" + tok + "'");
            const std::string key = tok.substr(0, eq), value = tok.substr(eq + 1);
            if (key == "cloud") {
                rec.cloud = resolve(value);
            } else if (key == "annotation") {
                rec.annotation = resolve(value);
            } else if (key == "partner") {
                rec.partner = resolve(value);
            } else if (key == "split") {
                if (value != "train" && value != "test") Fail(ErrorCode::kFormat, where + "split must be train or test");
                rec.split = value;
            } else if (key == "unit_scale") {
                rec.unit_scale = ParseDouble(key, value);
                if (rec.unit_scale <= 0) Fail(ErrorCode::kFormat, where + "unit_scale must be positive");
            } else if (key == "transform") {
                const auto parts = Split(value, ',');
                if (parts.size() != 12) Fail(ErrorCode::kFormat, where + "transform needs 12 numbers");
                Eigen::Matrix3d r;
                Eigen::Vector3d tr;
                for (int i = 0; i < 9; ++i) r(i / 3, i % 3) = ParseDouble(key, parts[static_cast<size_t>(i)]);
                for (int i = 0; i < 3; ++i) tr[i] = ParseDouble(key, parts[static_cast<size_t>(9 + i)]);
                try {
                    rec.transform = RigidTransform(r, tr);
                } catch (const Error &e) {
                    Fail(ErrorCode::kFormat, where + e.what());
                }
            } else {
                Fail(ErrorCode::kFormat, where + "unknown key '" + key + "'");
            }
        }
        if (rec.cloud.empty()) Fail(ErrorCode::kFormat, where + "missing cloud=");
        out.push_back(rec);
    }
    return out;
}

Checkpoint MakeCheckpoint(const TrainState &state) {
    Checkpoint ck;
    ck.config = state.model.config();
    ck.sections = state.model.parameters().sections();
    ck.theta = state.model.theta();
    ck.adam = state.adam;
    ck.epoch = state.epoch;
    ck.step = state.step;
    std::ostringstream rng;
    rng << state.rng;
    ck.rng_state = rng.str();
    ck.history = state.history;
    return ck;
}

void SaveCheckpoint(const std::string &path, const Checkpoint &ck) {
    Writer w;
    w.buffer().append("SNKF");
    w.Put(kCheckpointVersion);
    PutConfig(w, ck.config);
    w.Put(static_cast<std::uint32_t>(ck.sections.size()));
    for (const auto &s : ck.sections) {
        w.PutString(s.name);
        w.Put(static_cast<std::int64_t>(s.offset));
        w.Put(static_cast<std::int64_t>(s.rows));
        w.Put(static_cast<std::int64_t>(s.cols));
    }
    w.PutVector(ck.theta);
    w.Put(static_cast<std::int64_t>(ck.adam.step));
    w.PutVector(ck.adam.m);
    w.PutVector(ck.adam.v);
    w.Put(static_cast<std::int32_t>(ck.epoch));
    w.Put(static_cast<std::int64_t>(ck.step));
    w.PutString(ck.rng_state);
    w.Put(static_cast<std::uint32_t>(ck.history.size()));
    for (const auto &h : ck.history) {
        for (double v : {h.l_o, h.l_r, h.l_m, h.l_s, h.total}) w.Put(v);
    }
    const std::uint64_t sum = Fnv1a(w.buffer().data(), w.buffer().size());
    w.Put(sum);
    WriteFileAtomic(path, w.buffer());
}

Checkpoint LoadCheckpoint(const std::string &path) {
    const std::string data = ReadFile(path);
    if (data.size() < 4 + sizeof(std::uint32_t) + sizeof(std::uint64_t) ||
        data.compare(0, 4, "SNKF") != 0) {
        Fail(ErrorCode::kFormat, "'" + path + "' is not a checkpoint");
    }
    const size_t body_end = data.size() - sizeof(std::uint64_t);
    std::uint64_t stored;
    std::memcpy(&stored, data.data() + body_end, sizeof stored);
    Reader r(data, body_end);
    r.Get<std::array<char, 4>>();
    const auto version = r.Get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        Fail(ErrorCode::kFormat, "checkpoint version " + std::to_string(version) +
                                     " is not supported (expected " +
                                     std::to_string(kCheckpointVersion) + ")");
    }
    if (Fnv1a(data.data(), body_end) != stored) {
        Fail(ErrorCode::kFormat, "checkpoint '" + path + "' is truncated or corrupt");
    }
    Checkpoint ck;
    ck.config = GetConfig(r);
    const auto n_sections = r.Get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n_sections; ++i) {
        nn::ParamSection s;
        s.name = r.GetString();
        s.offset = r.Get<std::int64_t>();
        s.rows = r.Get<std::int64_t>();
        s.cols = r.Get<std::int64_t>();
        ck.sections.push_back(s);
    }
    ck.theta = r.GetVector();
    ck.adam.step = r.Get<std::int64_t>();
    ck.adam.m = r.GetVector();
    ck.adam.v = r.GetVector();
    ck.epoch = r.Get<std::int32_t>();
    ck.step = r.Get<std::int64_t>();
    ck.rng_state = r.GetString();
    const auto n_hist = r.Get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n_hist; ++i) {
        LossReport h;
        for (double *v : {&h.l_o, &h.l_r, &h.l_m, &h.l_s, &h.total}) *v = r.Get<double>();
        ck.history.push_back(h);
    }
    if (!r.AtEnd()) Fail(ErrorCode::kFormat, "checkpoint has trailing data");
    if (ck.adam.m.size() != ck.theta.size() || ck.adam.v.size() != ck.theta.size()) {
        Fail(ErrorCode::kFormat, "checkpoint optimizer state does not match parameters");
    }
    return ck;
}

void RestoreState(const Checkpoint &ck, TrainState &state) {
    if (!(ck.config == state.model.config())) {
        Fail(ErrorCode::kConfig, "checkpoint model configuration differs from the requested one");
    }
    CheckSections(ck, state.model.parameters());
    Rng rng;
    std::istringstream in(ck.rng_state);
    in >> rng;
    if (!in) Fail(ErrorCode::kFormat, "checkpoint rng state is corrupt");
    state.model.theta() = ck.theta;
    state.adam = ck.adam;
    state.epoch = ck.epoch;
    state.step = ck.step;
    state.rng = rng;
    state.history = ck.history;
}

FieldModel ModelFromCheckpoint(const Checkpoint &ck) {
    FieldModel model(ck.config, 0);
    CheckSections(ck, model.parameters());
    model.theta() = ck.theta;
    return model;
}

bool RunConfig::operator==(const RunConfig &o) const {
    return FormatConfig(*this) == FormatConfig(o);
}

std::vector<std::string> PresetNames() {
    return {"keypointnet", "smpl", "modelnet40", "3dmatch", "registration", "lite-overfit"};
}

RunConfig Preset(const std::string &name) {
    RunConfig c;
    if (name == "keypointnet") {
        c = PresetRow(2048, 64, 8, 8, 500, 16, 40, 60, 0.7);
    } else if (name == "smpl") {
        c = PresetRow(2048, 64, 8, 8, 500, 16, 20, 30, 0.7);
        c.extract.snap_to_input = true;
    } else if (name == "modelnet40") {
        c = PresetRow(5000, 64, 8, 6, 500, 16, 40, 60, 0.7);
    } else if (name == "3dmatch") {
        c = PresetRow(10000, 100, 10, 8, 150, 6, 15, 20, 0.7);
    } else if (name == "registration") {
        c = PresetRow(2048, 64, 6, 12, 500, 16, 40, 60, 0.4);
        c.extract.snap_to_input = true;
    } else if (name == "lite-overfit") {
        // Desk-scale single-shape run: lite encoder, small volume, few grids.
        // Grids of side 1/2 keep one saliency peak per half shape.
        c = PresetRow(2048, 16, 6, 2, 16, 1, 1500, 2000, 0.7);
        c.train.model.encoder = EncoderVariant::kLite;
        c.train.lr = 2e-3;
        c.train.aug.input_max_angle = 3.14159265358979323846;
        c.train.n_pos = 1024;
        c.train.n_neg = 1024;
    } else {
        Fail(ErrorCode::kConfig, "unknown preset '" + name + "'");
    }
    c.preset = name;
    return c;
}

void ApplyOverride(RunConfig &config, const std::string &assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        Fail(ErrorCode::kConfig, "override '" + assignment + "' is not key=value");
    }
    const std::string key = Trim(assignment.substr(0, eq));
    FindKey(key).set(config, Trim(assignment.substr(eq + 1)));
}

std::vector<std::string> RequiredConfigKeys() {
    return {"model.volume",    "train.n_points",     "train.grid_resolution",
            "train.grid_scale", "train.n_grids",     "train.batch_size",
            "train.epochs_first", "train.epochs_total", "train.thr_o",
            "extract.thr_s",   "extract.lambda",     "extract.iterations"};
}

RunConfig ParseConfig(const std::string &text) {
    std::istringstream in(text);
    std::string line, section;
    std::vector<std::pair<std::string, std::string>> assignments;
    std::string preset;
    int row = 0;
    while (std::getline(in, line)) {
        ++row;
        const auto hash = line.find('#');
        const std::string t = Trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (t.empty()) continue;
        if (t.front() == '[') {
            if (t.back() != ']') Fail(ErrorCode::kConfig, "config line " + std::to_string(row) + ": bad section header");
            section = Trim(t.substr(1, t.size() - 2));
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            Fail(ErrorCode::kConfig, "config line " + std::to_string(row) + ": expected key = value");
        }
        const std::string key = Trim(t.substr(0, eq)), value = Trim(t.substr(eq + 1));
        if (section.empty() && key == "preset") {
            preset = value;
            continue;
        }
        const std::string full = section.empty() ? key : section + "." + key;
        FindKey(full);  // rejects unknown keys with their name
        assignments.emplace_back(full, value);
    }
    RunConfig config = preset.empty() ? RunConfig{} : Preset(preset);
    if (preset.empty()) {
        for (const auto &req : RequiredConfigKeys()) {
            const bool present = std::any_of(assignments.begin(), assignments.end(),
                                             [&](const auto &a) { return a.first == req; });
            if (!present) Fail(ErrorCode::kConfig, "config is missing required key '" + req + "'");
        }
    }
    for (const auto &[key, value] : assignments) FindKey(key).set(config, value);
    return config;
}

RunConfig LoadConfig(const std::string &path) { return ParseConfig(ReadFile(path)); }

std::string FormatConfig(const RunConfig &config) {
    std::string out;
    if (!config.preset.empty()) out += "preset = " + config.preset + "\n";
    std::string section;
    for (const auto &k : ConfigKeys()) {
        const auto dot = k.name.find('.');
        const std::string sec = k.name.substr(0, dot);
        if (sec != section) {
            out += "\n[" + sec + "]\n";
            section = sec;
        }
        out += k.name.substr(dot + 1) + " = " + k.get(config) + "\n";
    }
    return out;
}

void SaveKeypoints(const std::string &path, const Points &raw, const Eigen::VectorXd &scores,
                   const std::string &header) {
    Require(raw.cols() == scores.size(), "keypoint and score counts differ");
    std::string s;
    for (const auto &line : Split(header, '\n')) s += "# " + line + "\n";
    for (Eigen::Index i = 0; i < raw.cols(); ++i) {
        s += FormatDouble(raw(0, i)) + " " + FormatDouble(raw(1, i)) + " " +
             FormatDouble(raw(2, i)) + " " + FormatDouble(scores[i]) + "\n";
    }
    WriteFileAtomic(path, s);
}

void SaveImagePgm(const std::string &path, const Eigen::MatrixXd &image) {
    std::string s = "P2\n" + std::to_string(image.cols()) + " " + std::to_string(image.rows()) + "\n255\n";
    for (Eigen::Index r = 0; r < image.rows(); ++r) {
        for (Eigen::Index c = 0; c < image.cols(); ++c) {
            const double v = std::clamp(image(r, c), 0.0, 1.0);
            s += std::to_string(static_cast<int>(std::lround(v * 255.0)));
            s += c + 1 < image.cols() ? " " : "\n";
        }
    }
    WriteFileAtomic(path, s);
}

void SaveMatrixCsv(const std::string &path, const Eigen::MatrixXd &image) {
    std::string s;
    for (Eigen::Index r = 0; r < image.rows(); ++r) {
        for (Eigen::Index c = 0; c < image.cols(); ++c) {
            s += FormatDouble(image(r, c));
            s += c + 1 < image.cols() ? "," : "\n";
        }
    }
    WriteFileAtomic(path, s);
}

}  // namespace kpf
