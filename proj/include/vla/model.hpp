#pragma once

#include <memory>
#include <string>
#include <vector>

#include "vla/action_flow.hpp"
#include "vla/backbone.hpp"
#include "vla/dataset.hpp"
#include "vla/linguistic_cot.hpp"
#include "vla/visual_cot.hpp"

namespace vla {

struct ModelConfig {
    bool use_visual_cot = true;
    bool use_linguistic_cot = true;
    std::uint64_t init_seed = 0;
    double init_std = 0.05;  // frozen decoder keeps its own 0.02
    std::vector<double> teacher_mu;     // 16, from the dataset manifest
    std::vector<double> teacher_sigma;  // 16
};

// The full policy: backbone + query tokens + both CoT streams + DiT head.
// Parameter creation order is fixed and independent of the ablation flags so
// matched-seed variants share initialization draws.
class PolicyModel {
public:
    static std::unique_ptr<PolicyModel> create(const ModelConfig& cfg, const Vocabulary& vocab);

    ModelConfig cfg;
    Vocabulary vocab;
    ParamStore store;
    BackboneParams backbone;
    QueryTokens queries;
    SpatialQueries spatial;
    VisualProjector vproj;
    PrefixProjector pproj;
    FrozenDecoder decoder;
    DiTParams dit;

    // Everything the optimizer may touch: frozen parameters are excluded, and
    // a disabled stream excludes its private parameters (spatial queries +
    // visual projector; prefix projector).
    std::vector<Param*> trainable_params();

    // (f - mu) / max(sigma, 1e-6) per dimension over the 64×16 teacher grid.
    std::vector<double> standardized_teacher(const std::vector<double>& depth) const;

private:
    PolicyModel() = default;
};

// One training example in tape-ready form.
struct BatchItem {
    std::vector<double> image;
    std::vector<double> depth;
    std::vector<int> instr_ids;  // unpadded
    std::array<double, kStateDim> state{};
    std::vector<double> chunk;   // kChunkValues raw actions
    std::vector<int> cot_ids;
};
BatchItem episode_to_item(const Episode& ep);

struct JointLossParts {
    double l_vis = 0.0, l_lin = 0.0, l_act = 0.0, l_total = 0.0;
};

struct JointLossResult {
    Tensor total;
    JointLossParts parts;
};

// Single backbone forward per element; all three losses read the same
// BackboneOutput; disabled streams contribute exactly zero.
JointLossResult joint_loss(Tape& tape, PolicyModel& model, const std::vector<BatchItem>& batch,
                           const FlowDraws& draws, double lambda_vis, double lambda_lin,
                           double lambda_act);

// One control step: one backbone forward (counter +1), then Euler sampling.
// Returns the raw H×a_dim action chunk (clamping is the caller's).
std::vector<double> policy_step(PolicyModel& model, const std::vector<double>& image,
                                const std::vector<int>& instr_ids,
                                const std::array<double, kStateDim>& state,
                                const SamplerConfig& sampler, Rng& noise_rng);

// No-grad forward returning the flattened M×d_VLM visual query states.
std::vector<double> model_h_vis_values(PolicyModel& model, const std::vector<double>& image,
                                       const std::vector<int>& instr_ids);
// No-grad forward returning the flattened N×d_VLM linguistic query states.
std::vector<double> model_h_lin_values(PolicyModel& model, const std::vector<double>& image,
                                       const std::vector<int>& instr_ids);

Checkpoint model_checkpoint(const PolicyModel& model, nlohmann::json meta);
// Copies values for every store parameter by name; shape mismatches and
// missing tensors are format errors. Restores decoder freeze from the meta.
void load_model_params(PolicyModel& model, const Checkpoint& ck);

// ---- post-hoc depth probe (main model stays frozen) ----
struct ProbeTrainConfig {
    int steps = 1500;
    int batch = 32;
    double lr = 1e-3;
    std::uint64_t seed = 0;
};
struct ProbeTrainResult {
    double train_mse = 0.0;
};
ProbeTrainResult train_probe(PolicyModel& model, const Dataset& ds, ParamStore& probe_store,
                             DepthProbe& probe, const ProbeTrainConfig& cfg);
// Pearson correlation between probe-decoded depth and ground truth, pooled
// over every pixel of every episode in `ds`.
double probe_pearson(PolicyModel& model, const DepthProbe& probe, const Dataset& ds);

}  // namespace vla
