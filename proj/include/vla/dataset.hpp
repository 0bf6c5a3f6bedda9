#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vla/linguistic_cot.hpp"
#include "vla/world.hpp"

namespace vla {

// One decision point of an expert demonstration: the observation at a chunk
// boundary plus the H-step action chunk taken from it.
struct Episode {
    std::vector<float> image;                    // 32×32×3
    std::vector<float> depth;                    // 32×32
    std::array<float, kStateDim> state{};        // x, y, z, open
    std::array<float, kChunkLen * kActionDim> actions{};
    std::vector<std::uint16_t> instruction;      // padded to kInstrLen with pad id
    std::vector<std::uint16_t> cot;              // ≤ kCotMaxLen ids, unpadded
    std::uint16_t template_id = 0;
};

struct DatasetManifest {
    int episodes = 0;
    int image_hw = kImageHW;
    int patch = kPatch;
    int d_da3 = kTeacherDim;
    int chunk_len = kChunkLen;
    int vocab_size = 0;
    std::array<int, 3> template_counts{};
    std::vector<double> teacher_mu;     // 16, feature standardization
    std::vector<double> teacher_sigma;  // 16
    nlohmann::json vocab;
    nlohmann::json to_json() const;
    static DatasetManifest from_json(const nlohmann::json& j);
};

struct Dataset {
    std::vector<Episode> episodes;
    DatasetManifest manifest;
};

// Deterministic dataset generation: expert rollouts over the three templates
// in rotation, one Episode per chunk boundary, exactly n_episodes records.
Dataset generate_dataset(std::uint64_t seed, int n_episodes);

// Binary container (magic "DCVL", version 1, little-endian) + JSON manifest
// sidecar at path + ".json". Float payloads round-trip bitwise.
void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

// 8-bit binary PGM (P5) for depth/probe visualization; values clamped to [0,1].
void write_pgm(const std::string& path, const std::vector<double>& gray, int w, int h);
std::vector<double> read_pgm(const std::string& path, int& w, int& h);

// Named-tensor container reusing the same framing: magic, version, kind,
// JSON index (name -> shape/offset), f64 payload.
struct Checkpoint {
    std::map<std::string, std::pair<Shape, std::vector<double>>> tensors;
    nlohmann::json meta;
};
void write_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace vla
