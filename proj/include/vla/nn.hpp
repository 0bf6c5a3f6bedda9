#pragma once

#include <string>
#include <vector>

#include "vla/optim.hpp"
#include "vla/tensor.hpp"

namespace vla {

struct AttentionConfig {
    int d_model = 64;
    int n_heads = 4;
    bool causal = false;
    int head_dim() const {
        if (n_heads <= 0 || d_model % n_heads != 0)
            throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by " +
                              std::to_string(n_heads) + " heads");
        return d_model / n_heads;
    }
};

// Q/K/V/O projection matrices, each d×d.
struct AttentionParams {
    Param* wq = nullptr;
    Param* wk = nullptr;
    Param* wv = nullptr;
    Param* wo = nullptr;
    static AttentionParams create(ParamStore& store, const std::string& prefix, int d, Rng& rng,
                                  double init_std = 0.02);
};

// Pre-norm residual block: x + Attn(LN1(x)), then + FFN(LN2(·)).
// Feed-forward expansion factor 4, GELU activation.
struct TransformerBlockParams {
    Param* ln1_gamma = nullptr;
    Param* ln1_beta = nullptr;
    AttentionParams attn;
    Param* ln2_gamma = nullptr;
    Param* ln2_beta = nullptr;
    Param* w1 = nullptr;  // d×4d
    Param* w2 = nullptr;  // 4d×d
    static TransformerBlockParams create(ParamStore& store, const std::string& prefix, int d,
                                         Rng& rng, double init_std = 0.02);
};

struct PatchEmbedder {
    int image_hw = 32;
    int patch = 4;
    int d_model = 64;
    Param* proj = nullptr;  // 3p²×d
    Param* bias = nullptr;  // d
    Param* pos = nullptr;   // P×d, raster order over the patch grid
    int patches_per_side() const { return image_hw / patch; }
    int num_patches() const { return patches_per_side() * patches_per_side(); }
    static PatchEmbedder create(ParamStore& store, const std::string& prefix, int image_hw,
                                int patch, int d_model, Rng& rng, double init_std = 0.02);
};

struct TokenEmbedder {
    int vocab = 0;
    int max_len = 0;
    int d_model = 0;
    Param* table = nullptr;  // V×d
    Param* pos = nullptr;    // max_len×d
    static TokenEmbedder create(ParamStore& store, const std::string& prefix, int vocab,
                                int max_len, int d_model, Rng& rng, double init_std = 0.02);
    // tok[id] + pos[pos0 + i] for each position i.
    Tensor embed(Tape& tape, const std::vector<int>& ids, int pos0 = 0) const;
};

struct TimeEmbedParams {
    int n_freq = 16;
    int d_model = 64;
    Param* w1 = nullptr;  // 2F×d
    Param* b1 = nullptr;
    Param* w2 = nullptr;  // d×d
    Param* b2 = nullptr;
    static TimeEmbedParams create(ParamStore& store, const std::string& prefix, int n_freq,
                                  int d_model, Rng& rng, double init_std = 0.02);
};

// ---- masks ----
Mask causal_mask(int t);
Mask full_mask(int tq, int tk);
// Causal, with pad key positions unattendable from any other position
// (each position always attends itself).
Mask causal_pad_mask(const std::vector<std::uint8_t>& is_pad);

// ---- ops ----
// x: (batch·t)×d flattened sequences; mask is t×t (shared) or batch·t×t.
Tensor self_attention_batched(Tape& tape, Tensor x, const AttentionParams& p,
                              const AttentionConfig& cfg, const Mask& mask, int batch, int t,
                              bool per_element_mask);
Tensor cross_attention_batched(Tape& tape, Tensor q, Tensor kv, const AttentionParams& p,
                               const AttentionConfig& cfg, int batch, int tq, int tk);
Tensor transformer_block_batched(Tape& tape, Tensor x, const TransformerBlockParams& p,
                                 const AttentionConfig& cfg, const Mask& mask, int batch, int t,
                                 bool per_element_mask, Tensor* cross_kv = nullptr,
                                 const AttentionParams* cross = nullptr,
                                 Param* ln_cross_gamma = nullptr,
                                 Param* ln_cross_beta = nullptr, int tk = 0);

// Single-sequence entry points.
// mask[i*t+j] = 1 means position i may attend position j; a row with no
// attendable position is a contract error.
Tensor multi_head_self_attention(Tape& tape, Tensor x, const AttentionParams& p,
                                 const AttentionConfig& cfg, const Mask& mask);
Tensor multi_head_cross_attention(Tape& tape, Tensor q, Tensor kv, const AttentionParams& p,
                                  const AttentionConfig& cfg);
Tensor transformer_block(Tape& tape, Tensor x, const TransformerBlockParams& p,
                         const AttentionConfig& cfg, const Mask& mask);

// Raw patch extraction: H×W×3 row-major image -> P×(3p²) rows in raster order.
std::vector<double> patch_rows(const std::vector<double>& image, int hw, int patch);
// Patch tokens: projection + bias + 2-D positional table. image values in [0,1].
Tensor patchify(Tape& tape, const std::vector<double>& image, const PatchEmbedder& pe);

// Sinusoidal features of t at geometrically spaced frequencies: 2F values
// [sin(w_i t), cos(w_i t)], w_i = 1000^(i/(F-1)).
std::vector<double> time_features(double t, int n_freq);
// Features through a 2-layer GELU MLP -> Tensor[d]. t must lie in [0,1].
Tensor time_embed(Tape& tape, double t, const TimeEmbedParams& p);

}  // namespace vla
