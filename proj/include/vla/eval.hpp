#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "vla/model.hpp"
#include "vla/train.hpp"

namespace vla {

struct WilsonInterval {
    double lo = 0.0, hi = 0.0;
};
WilsonInterval wilson(int successes, int n, double z = 1.96);

enum class PolicyKind { model, expert, random };

struct EvalTemplateResult {
    int successes = 0;
    int episodes = 0;
    double rate = 0.0;
    WilsonInterval interval;
    double mean_steps = 0.0;
};

struct EvalResult {
    std::array<EvalTemplateResult, 3> per_template;
    double average = 0.0;
};

// Closed-loop rollouts: render -> one backbone forward -> Euler sampling ->
// execute all H actions, episode capped at kMaxEnvSteps.
EvalResult closed_loop_eval(PolicyModel* model, PolicyKind kind, int episodes_per_template,
                            std::uint64_t seed, const SamplerConfig& sampler = {});

// ---- latency comparators -------------------------------------------------

// Same backbone/action-head sizes without CoT query tokens (T = 88).
struct NonCotModel {
    ParamStore store;
    Vocabulary vocab;
    BackboneParams backbone;
    DiTParams dit;
    static std::unique_ptr<NonCotModel> create(const Vocabulary& vocab, std::uint64_t seed);
};
std::vector<double> non_cot_step(NonCotModel& m, const std::vector<double>& image,
                                 const std::vector<int>& instr_ids,
                                 const std::array<double, kStateDim>& state,
                                 const SamplerConfig& sampler, Rng& noise_rng);

// Autoregressive-CoT comparator: the backbone itself decodes K explicit CoT
// tokens through an extra LM head (one full forward per token, no KV cache),
// then one conditioning forward feeds the action head. Forward counter reads
// K+1 per control step.
struct ArCotModel {
    ParamStore store;
    Vocabulary vocab;
    AttentionConfig cfg{kDvlm, kVlmHeads, true};
    PatchEmbedder patch;
    TokenEmbedder tok;  // instruction + bos + decoded CoT positions
    std::vector<TransformerBlockParams> blocks;
    Param* final_gamma = nullptr;
    Param* final_beta = nullptr;
    Param* lm_w = nullptr;
    Param* lm_b = nullptr;
    DiTParams dit;
    static std::unique_ptr<ArCotModel> create(const Vocabulary& vocab, std::uint64_t seed);
};

struct ArStepResult {
    std::vector<double> chunk;
    std::vector<int> decoded;
};
ArStepResult ar_cot_step(ArCotModel& m, const std::vector<double>& image,
                         const std::vector<int>& instr_ids,
                         const std::array<double, kStateDim>& state, int k,
                         const SamplerConfig& sampler, Rng& noise_rng);

// Teacher-forced CE training of the AR comparator's LM head + backbone on the
// dataset's CoT strings (optional; latency is weight-independent).
double train_ar_model(ArCotModel& m, const Dataset& ds, int steps, int batch, double lr,
                      std::uint64_t seed);

// ---- latency harness -------------------------------------------------------

struct BenchConfig {
    int reps = 200;
    int warmup = 20;
    int ar_reps = 25;          // AR control steps are ~60x dearer; fewer reps
    int ar_warmup = 3;
    std::vector<int> ar_ks = {8, 16, 32, 64};
    int primary_ar_k = 64;
    std::uint64_t seed = 0;
    SamplerConfig sampler;
};

struct VariantStats {
    double backbone_ms_median = 0, backbone_ms_p95 = 0;
    double action_ms_median = 0, action_ms_p95 = 0;
    double total_ms_median = 0, total_ms_p95 = 0;
    std::uint64_t forward_count = 0;
};

struct LatencyReport {
    VariantStats non_cot;
    VariantStats parallel_cot;
    std::map<int, VariantStats> ar_cot;  // keyed by K
    double ar_slope_ms_per_token = 0, ar_intercept_ms = 0, ar_fit_r2 = 0;
    int reps = 0, warmup = 0;
    nlohmann::json to_json() const;  // measured numbers plus full-scale reference values
};

LatencyReport bench_latency(const BenchConfig& cfg);

// ---- ablation --------------------------------------------------------------

struct AblationConfig {
    TrainConfig base;            // data/steps/seed shared by all four variants
    int eval_episodes = 100;
    std::uint64_t eval_seed = 9000;
    std::string out_dir = ".";
    SamplerConfig sampler;
};

struct AblationRow {
    bool visual = false, linguistic = false;
    std::array<double, 3> success{};  // per template
    double average = 0.0;
    std::uint64_t data_hash = 0;
};

struct AblationResult {
    std::vector<AblationRow> rows;  // no-CoT, visual-only, linguistic-only, full
    std::string csv;
};

AblationResult run_ablation(const AblationConfig& cfg);

}  // namespace vla
