#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vla/model.hpp"

namespace vla {

struct TrainConfig {
    std::string data;                      // dataset path (required)
    std::string out = "checkpoint.bin";
    std::string metrics_csv = "metrics.csv";
    std::string decoder_ckpt;              // optional pretrained frozen decoder
    std::string resume;                    // optional checkpoint to resume from
    double lambda_vis = 0.1;
    double lambda_lin = 0.1;
    double lambda_act = 1.0;
    double lr = 1e-3;                      // desk-scale default; 2.5e-5 is the full-scale value
    int batch = 16;
    int steps = 2000;
    std::uint64_t seed = 0;
    bool use_visual_cot = true;
    bool use_linguistic_cot = true;
    int checkpoint_every = 500;
    int decoder_pretrain_steps = 4000;
    void validate() const;
};

struct MetricsRow {
    int step = 0;
    double l_vis = 0, l_lin = 0, l_act = 0, l_total = 0;
    double wall_ms = 0;
};

struct TrainResult {
    std::string checkpoint;
    std::vector<MetricsRow> metrics;
    double decoder_ppl = 0.0;
    std::uint64_t data_order_hash = 0;  // FNV-1a over the drawn episode indices
};

// End-to-end optimization of all trainable parameters (frozen decoder and the
// analytic teacher excluded). Appends metrics per step, checkpoints every
// `checkpoint_every` steps and at the end, aborts on non-finite loss.
TrainResult train(const TrainConfig& cfg);

// Pretrains a standalone frozen decoder on an internally generated CoT corpus
// and writes it as a checkpoint. Returns held-out perplexity.
double pretrain_decoder_to_file(std::uint64_t seed, int corpus_rollouts, int steps,
                                const std::string& out_path);

// Generates CoT strings from expert rollouts (template rotation, sub-streams
// of `seed`).
std::vector<std::string> generate_cot_corpus(std::uint64_t seed, int rollouts);

// Flat key=value config file, '#' comments; unknown keys are config errors.
std::map<std::string, std::string> parse_config_file(const std::string& path);
void apply_config_kv(TrainConfig& cfg, const std::string& key, const std::string& value);
TrainConfig load_train_config(const std::string& path);

std::string metrics_csv_string(const std::vector<MetricsRow>& rows);

}  // namespace vla
