#pragma once

#include <array>
#include <vector>

#include "vla/backbone.hpp"
#include "vla/nn.hpp"

namespace vla {

inline constexpr int kDitDim = 64;
inline constexpr int kDitLayers = 2;
inline constexpr int kDitHeads = 4;
inline constexpr int kDitTokens = 1 + kChunkLen;  // state token + H action tokens
inline constexpr int kChunkValues = kChunkLen * kActionDim;

// Per-dimension scale mapping env actions to unit range for flow matching
// (dx, dy are bounded by ±0.1, the gripper command by ±1).
inline constexpr std::array<double, kActionDim> kActionScale = {0.1, 0.1, 1.0};

std::vector<double> normalize_chunk(const std::vector<double>& raw);
std::vector<double> denormalize_chunk(const std::vector<double>& unit);

struct SamplerConfig {
    int n_steps = 10;
};

struct DiTBlock {
    TransformerBlockParams base;  // self-attention + FFN
    Param* ln_cross_gamma = nullptr;
    Param* ln_cross_beta = nullptr;
    AttentionParams cross;  // queries from the action sequence, keys/values from H_vlm
};

struct DiTParams {
    AttentionConfig cfg{kDitDim, kDitHeads, false};
    Param* in_w = nullptr;     // a_dim×d
    Param* in_b = nullptr;
    Param* state_w = nullptr;  // state_dim×d
    Param* state_b = nullptr;
    TimeEmbedParams time;
    Param* pos = nullptr;      // kDitTokens×d, distinguishes the action slots
    std::vector<DiTBlock> blocks;
    Param* out_w = nullptr;    // d×a_dim
    Param* out_b = nullptr;
    static DiTParams create(ParamStore& store, const std::string& prefix, Rng& rng,
                            double init_std = 0.02);
};

// a_t = t·A + (1−t)·a_0, elementwise; t must lie in [0,1].
std::vector<double> interpolate(const std::vector<double>& target, const std::vector<double>& noise,
                                double t);

// Vector field v(a_t, t, H_vlm): time embedding added to every primary token,
// sequence = [state token, H action tokens], cross-attention into h_vlm,
// output read at the action positions. Returns H×a_dim.
Tensor dit_forward(Tape& tape, const std::vector<double>& a_t, double t,
                   const std::array<double, kStateDim>& state, Tensor h_vlm, const DiTParams& p);

// Batched variant: a_t_all is batch×kChunkValues flattened, h_vlm_all is
// (batch·tk)×d_vlm; returns (batch·H)×a_dim.
Tensor dit_forward_batched(Tape& tape, const std::vector<double>& a_t_all,
                           const std::vector<double>& ts,
                           const std::vector<std::array<double, kStateDim>>& states,
                           Tensor h_vlm_all, int batch, int tk, const DiTParams& p);

// One (t, a_0) draw per element: t ~ U(0,1), a_0 ~ N(0,1).
struct FlowDraws {
    std::vector<double> t;        // batch
    std::vector<double> noise;    // batch×kChunkValues
};
FlowDraws draw_flow(Rng& rng, int batch);

// Flow-matching objective: MSE between the predicted field and (A − a_0) on
// unit-normalized chunks. Raw chunks come straight from the dataset.
Tensor action_loss_batched(Tape& tape, const std::vector<std::vector<double>>& raw_chunks,
                           const std::vector<std::array<double, kStateDim>>& states,
                           Tensor h_vlm_all, int tk, const DiTParams& p, const FlowDraws& draws);

// Euler transport from a_0 ~ N(0,1): a += (1/n)·v(a, k/n) for k = 0..n−1.
// Returns the denormalized H×a_dim chunk; env-bound clamping is the caller's.
std::vector<double> sample_actions(const std::array<double, kStateDim>& state,
                                   const std::vector<double>& h_vlm_values, int tk,
                                   const DiTParams& p, const SamplerConfig& cfg, Rng& rng);

}  // namespace vla
