#include "vla/dataset.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "vla/error.hpp"

namespace vla {

namespace {

constexpr char kMagic[4] = {'D', 'C', 'V', 'L'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kKindDataset = 1;
constexpr std::uint32_t kKindTensors = 2;

class Writer {
public:
    explicit Writer(const std::string& path) : os_(path, std::ios::binary) {
        if (!os_) throw FormatError("cannot open for writing: " + path);
    }
    void bytes(const void* p, std::size_t n) { os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void u16v(const std::uint16_t* p, std::size_t n) { bytes(p, n * 2); }
    void f32v(const float* p, std::size_t n) { bytes(p, n * 4); }
    void f64v(const double* p, std::size_t n) { bytes(p, n * 8); }
    void check(const std::string& path) {
        if (!os_) throw FormatError("write failed: " + path);
    }

private:
    std::ofstream os_;
};

class Reader {
public:
    explicit Reader(const std::string& path) : is_(path, std::ios::binary), path_(path) {
        if (!is_) throw FormatError("cannot open: " + path);
    }
    void bytes(void* p, std::size_t n) {
        is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n)
            throw FormatError(path_ + ": truncated at byte offset " + std::to_string(off_));
        off_ += n;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        bytes(&v, 8);
        return v;
    }
    std::size_t offset() const { return off_; }
    const std::string& path() const { return path_; }

private:
    std::ifstream is_;
    std::string path_;
    std::size_t off_ = 0;
};

void check_header(Reader& r, std::uint32_t want_kind) {
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError(r.path() + ": bad magic at byte offset 0");
    std::uint32_t version = r.u32();
    if (version != kVersion)
        throw FormatError(r.path() + ": unsupported version " + std::to_string(version) +
                          " at byte offset 4");
    std::uint32_t kind = r.u32();
    if (kind != want_kind)
        throw FormatError(r.path() + ": unexpected container kind " + std::to_string(kind) +
                          " at byte offset 8");
}

}  // namespace

nlohmann::json DatasetManifest::to_json() const {
    nlohmann::json j;
    j["format_version"] = 1;
    j["episodes"] = episodes;
    j["image_hw"] = image_hw;
    j["patch"] = patch;
    j["d_da3"] = d_da3;
    j["H"] = chunk_len;
    j["vocab_size"] = vocab_size;
    j["template_counts"] = {{"place_single", template_counts[0]},
                            {"place_two", template_counts[1]},
                            {"place_three", template_counts[2]}};
    j["teacher_mu"] = teacher_mu;
    j["teacher_sigma"] = teacher_sigma;
    j["vocab"] = vocab;
    return j;
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
    DatasetManifest m;
    m.episodes = j.at("episodes").get<int>();
    m.image_hw = j.at("image_hw").get<int>();
    m.patch = j.at("patch").get<int>();
    m.d_da3 = j.at("d_da3").get<int>();
    m.chunk_len = j.at("H").get<int>();
    m.vocab_size = j.at("vocab_size").get<int>();
    m.template_counts[0] = j.at("template_counts").at("place_single").get<int>();
    m.template_counts[1] = j.at("template_counts").at("place_two").get<int>();
    m.template_counts[2] = j.at("template_counts").at("place_three").get<int>();
    m.teacher_mu = j.at("teacher_mu").get<std::vector<double>>();
    m.teacher_sigma = j.at("teacher_sigma").get<std::vector<double>>();
    m.vocab = j.at("vocab");
    return m;
}

Dataset generate_dataset(std::uint64_t seed, int n_episodes) {
    Vocabulary vocab = Vocabulary::standard();
    Dataset ds;
    ds.manifest.vocab = vocab.to_json();
    ds.manifest.vocab_size = vocab.size();

    int rollout = 0;
    while (static_cast<int>(ds.episodes.size()) < n_episodes) {
        TaskTemplate tmpl = static_cast<TaskTemplate>(rollout % 3);
        Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(rollout));
        SceneSample sample = sample_scene(rng, tmpl);
        Rollout ro = expert_rollout(sample.scene, sample.task);
        std::vector<std::uint16_t> instr;
        for (int id : vocab.tokenize(sample.task.instruction))
            instr.push_back(static_cast<std::uint16_t>(id));
        if (static_cast<int>(instr.size()) > kInstrLen)
            throw ContractError("instruction longer than " + std::to_string(kInstrLen) + " tokens");
        while (static_cast<int>(instr.size()) < kInstrLen)
            instr.push_back(static_cast<std::uint16_t>(Vocabulary::kPad));
        for (const RolloutFrame& f : ro.frames) {
            if (static_cast<int>(ds.episodes.size()) >= n_episodes) break;
            Episode ep;
            ep.image.assign(f.rgb.begin(), f.rgb.end());
            ep.depth.assign(f.depth.begin(), f.depth.end());
            for (int i = 0; i < kStateDim; ++i)
                ep.state[static_cast<std::size_t>(i)] = static_cast<float>(f.state[static_cast<std::size_t>(i)]);
            for (int a = 0; a < kChunkLen; ++a) {
                ep.actions[static_cast<std::size_t>(a) * 3] = static_cast<float>(f.actions[static_cast<std::size_t>(a)].dx);
                ep.actions[static_cast<std::size_t>(a) * 3 + 1] = static_cast<float>(f.actions[static_cast<std::size_t>(a)].dy);
                ep.actions[static_cast<std::size_t>(a) * 3 + 2] = static_cast<float>(f.actions[static_cast<std::size_t>(a)].grip);
            }
            ep.instruction = instr;
            for (int id : vocab.tokenize(f.cot)) ep.cot.push_back(static_cast<std::uint16_t>(id));
            if (static_cast<int>(ep.cot.size()) > kCotMaxLen)
                throw ContractError("generated CoT exceeds " + std::to_string(kCotMaxLen) + " tokens");
            ep.template_id = static_cast<std::uint16_t>(tmpl);
            ds.manifest.template_counts[static_cast<std::size_t>(tmpl)]++;
            ds.episodes.push_back(std::move(ep));
        }
        ++rollout;
    }
    ds.manifest.episodes = static_cast<int>(ds.episodes.size());

    // Teacher-feature standardization over the stored (f32-rounded) depths.
    std::vector<double> mu(kTeacherDim, 0.0), m2(kTeacherDim, 0.0);
    std::size_t count = 0;
    for (const Episode& ep : ds.episodes) {
        std::vector<double> depth(ep.depth.begin(), ep.depth.end());
        std::vector<double> feats = teacher_features(depth);
        for (int p = 0; p < kNumPatches; ++p) {
            ++count;
            for (int d = 0; d < kTeacherDim; ++d) {
                double x = feats[static_cast<std::size_t>(p) * kTeacherDim + d];
                double delta = x - mu[static_cast<std::size_t>(d)];
                mu[static_cast<std::size_t>(d)] += delta / static_cast<double>(count);
                m2[static_cast<std::size_t>(d)] += delta * (x - mu[static_cast<std::size_t>(d)]);
            }
        }
    }
    ds.manifest.teacher_mu = mu;
    ds.manifest.teacher_sigma.assign(kTeacherDim, 1.0);
    for (int d = 0; d < kTeacherDim; ++d)
        ds.manifest.teacher_sigma[static_cast<std::size_t>(d)] =
            std::sqrt(m2[static_cast<std::size_t>(d)] / static_cast<double>(count));
    return ds;
}

void write_dataset(const Dataset& ds, const std::string& path) {
    Writer w(path);
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    w.u32(kKindDataset);
    w.u32(static_cast<std::uint32_t>(ds.episodes.size()));
    w.u32(kImageHW);
    w.u32(kImageHW);
    w.u32(3);
    w.u32(kPatch);
    w.u32(kTeacherDim);
    w.u32(kChunkLen);
    w.u32(kActionDim);
    w.u32(kInstrLen);
    w.u32(kCotMaxLen);
    w.u32(static_cast<std::uint32_t>(ds.manifest.vocab_size));
    for (const Episode& ep : ds.episodes) {
        w.f32v(ep.image.data(), ep.image.size());
        w.f32v(ep.depth.data(), ep.depth.size());
        w.f32v(ep.state.data(), ep.state.size());
        w.f32v(ep.actions.data(), ep.actions.size());
        w.u16v(ep.instruction.data(), ep.instruction.size());
        std::uint16_t cot_len = static_cast<std::uint16_t>(ep.cot.size());
        w.u16v(&cot_len, 1);
        std::vector<std::uint16_t> cot = ep.cot;
        cot.resize(kCotMaxLen, 0);
        w.u16v(cot.data(), cot.size());
        w.u16v(&ep.template_id, 1);
    }
    w.check(path);

    std::ofstream mf(path + ".json");
    if (!mf) throw FormatError("cannot open for writing: " + path + ".json");
    mf << ds.manifest.to_json().dump(2) << "\n";
    if (!mf) throw FormatError("write failed: " + path + ".json");
}

Dataset read_dataset(const std::string& path) {
    Reader r(path);
    check_header(r, kKindDataset);
    std::uint32_t n = r.u32();
    std::uint32_t h = r.u32(), w_ = r.u32(), c = r.u32(), patch = r.u32(), d_da3 = r.u32();
    std::uint32_t chunk = r.u32(), a_dim = r.u32(), instr_len = r.u32(), cot_max = r.u32();
    std::uint32_t vocab_size = r.u32();
    if (h != kImageHW || w_ != kImageHW || c != 3 || patch != kPatch || d_da3 != kTeacherDim ||
        chunk != kChunkLen || a_dim != kActionDim || instr_len != kInstrLen || cot_max != kCotMaxLen)
        throw FormatError(path + ": dimension header mismatch at byte offset 16");

    Dataset ds;
    ds.episodes.resize(n);
    for (Episode& ep : ds.episodes) {
        ep.image.resize(static_cast<std::size_t>(kImageHW) * kImageHW * 3);
        ep.depth.resize(static_cast<std::size_t>(kImageHW) * kImageHW);
        r.bytes(ep.image.data(), ep.image.size() * 4);
        r.bytes(ep.depth.data(), ep.depth.size() * 4);
        r.bytes(ep.state.data(), ep.state.size() * 4);
        r.bytes(ep.actions.data(), ep.actions.size() * 4);
        ep.instruction.resize(kInstrLen);
        r.bytes(ep.instruction.data(), ep.instruction.size() * 2);
        std::uint16_t cot_len;
        r.bytes(&cot_len, 2);
        if (cot_len > kCotMaxLen)
            throw FormatError(path + ": cot length " + std::to_string(cot_len) +
                              " out of range at byte offset " + std::to_string(r.offset() - 2));
        std::vector<std::uint16_t> cot(kCotMaxLen);
        r.bytes(cot.data(), cot.size() * 2);
        ep.cot.assign(cot.begin(), cot.begin() + cot_len);
        r.bytes(&ep.template_id, 2);
    }

    std::ifstream mf(path + ".json");
    if (!mf) throw FormatError("missing manifest sidecar: " + path + ".json");
    nlohmann::json j;
    try {
        mf >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ".json: " + e.what());
    }
    ds.manifest = DatasetManifest::from_json(j);
    if (ds.manifest.episodes != static_cast<int>(n) ||
        ds.manifest.vocab_size != static_cast<int>(vocab_size))
        throw FormatError(path + ".json: manifest counts disagree with binary header");
    return ds;
}

void write_pgm(const std::string& path, const std::vector<double>& gray, int w, int h) {
    if (gray.size() != static_cast<std::size_t>(w) * h)
        throw ShapeError("write_pgm: " + std::to_string(gray.size()) + " values for " +
                         std::to_string(w) + "x" + std::to_string(h));
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open for writing: " + path);
    os << "P5\n" << w << " " << h << "\n255\n";
    for (double v : gray) {
        double c = std::min(1.0, std::max(0.0, v));
        unsigned char b = static_cast<unsigned char>(std::lround(c * 255.0));
        os.write(reinterpret_cast<const char*>(&b), 1);
    }
    if (!os) throw FormatError("write failed: " + path);
}

std::vector<double> read_pgm(const std::string& path, int& w, int& h) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open: " + path);
    std::string magic;
    int maxval;
    is >> magic >> w >> h >> maxval;
    if (magic != "P5" || maxval != 255) throw FormatError(path + ": not an 8-bit P5 PGM");
    is.get();  // single whitespace after header
    std::vector<double> out(static_cast<std::size_t>(w) * h);
    for (double& v : out) {
        int b = is.get();
        if (b < 0) throw FormatError(path + ": truncated pixel data");
        v = b / 255.0;
    }
    return out;
}

void write_checkpoint(const Checkpoint& ck, const std::string& path) {
    nlohmann::json index;
    index["meta"] = ck.meta;
    nlohmann::json tensors = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, sv] : ck.tensors) {
        nlohmann::json t;
        t["shape"] = sv.first;
        t["offset"] = offset;
        t["dtype"] = "f64";
        tensors[name] = t;
        offset += sv.second.size();
    }
    index["tensors"] = tensors;
    std::string index_str = index.dump();

    Writer w(path);
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    w.u32(kKindTensors);
    w.u64(index_str.size());
    w.bytes(index_str.data(), index_str.size());
    w.u64(offset);
    for (const auto& [name, sv] : ck.tensors) w.f64v(sv.second.data(), sv.second.size());
    w.check(path);
}

Checkpoint read_checkpoint(const std::string& path) {
    Reader r(path);
    check_header(r, kKindTensors);
    std::uint64_t index_len = r.u64();
    std::string index_str(index_len, '\0');
    r.bytes(index_str.data(), index_len);
    nlohmann::json index;
    try {
        index = nlohmann::json::parse(index_str);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": bad index json: " + e.what());
    }
    std::uint64_t payload = r.u64();
    std::vector<double> data(payload);
    r.bytes(data.data(), payload * 8);

    Checkpoint ck;
    ck.meta = index.at("meta");
    for (auto it = index.at("tensors").begin(); it != index.at("tensors").end(); ++it) {
        Shape shape = it.value().at("shape").get<Shape>();
        std::uint64_t off = it.value().at("offset").get<std::uint64_t>();
        std::size_t n = shape_numel(shape);
        if (off + n > payload)
            throw FormatError(path + ": tensor " + it.key() + " overruns payload");
        std::vector<double> v(data.begin() + static_cast<std::ptrdiff_t>(off),
                              data.begin() + static_cast<std::ptrdiff_t>(off + n));
        ck.tensors.emplace(it.key(), std::make_pair(std::move(shape), std::move(v)));
    }
    return ck;
}

}  // namespace vla
