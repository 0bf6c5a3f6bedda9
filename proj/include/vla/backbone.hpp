#pragma once

#include <cstdint>
#include <vector>

#include "vla/nn.hpp"
#include "vla/world.hpp"

namespace vla {

inline constexpr int kDvlm = 64;
inline constexpr int kVlmLayers = 4;
inline constexpr int kVlmHeads = 4;
inline constexpr int kVisQueries = 16;  // M
inline constexpr int kLinQueries = 4;   // N

// Segment offsets of the unified sequence [V_obs, Q_vis, L_instr, Q_lin].
inline constexpr int kVisStart = 0;
inline constexpr int kVisQueryStart = kNumPatches;                       // 64
inline constexpr int kTextStart = kVisQueryStart + kVisQueries;          // 80
inline constexpr int kLinQueryStart = kTextStart + kInstrLen;            // 104
inline constexpr int kSeqLen = kLinQueryStart + kLinQueries;             // 108

enum class Segment : std::uint8_t { vision = 0, vis_query, text, lin_query };

struct QueryTokens {
    Param* q_vis = nullptr;  // M×d
    Param* q_lin = nullptr;  // N×d
    static QueryTokens create(ParamStore& store, const std::string& prefix, int d, Rng& rng,
                              double init_std = 0.02);
};

struct BackboneParams {
    AttentionConfig cfg{kDvlm, kVlmHeads, true};
    PatchEmbedder patch_embedder;
    TokenEmbedder token_embedder;  // instruction vocab, shared with the CoT vocabulary
    std::vector<TransformerBlockParams> blocks;
    Param* final_gamma = nullptr;
    Param* final_beta = nullptr;
    static BackboneParams create(ParamStore& store, const std::string& prefix, int vocab, Rng& rng,
                                 double init_std = 0.02);
};

struct UnifiedSequence {
    Tensor embeddings;  // kSeqLen×d on the caller's tape
    std::vector<Segment> segments;
    std::vector<int> position_ids;       // 0..T-1
    std::vector<std::uint8_t> is_pad;    // pad instruction positions
    Mask mask;                           // kSeqLen×kSeqLen causal + pad rules
};

// Embeds and concatenates [V_obs, Q_vis, L_instr (padded), Q_lin]. The mask is
// causal with pad key positions unattendable (except from themselves).
UnifiedSequence assemble_input(Tape& tape, const std::vector<double>& image,
                               const std::vector<int>& instruction_ids, const QueryTokens& queries,
                               const BackboneParams& params);

struct BackboneOutput {
    Tensor h_vlm;  // kSeqLen×d, final layer after the closing norm
    Tensor h_vis;  // rows [kVisQueryStart, kTextStart)
    Tensor h_lin;  // rows [kLinQueryStart, kSeqLen)
};

// Exactly one forward pass; increments the instrumentation counter once.
BackboneOutput backbone_forward(Tape& tape, const UnifiedSequence& seq, const BackboneParams& params);

// Training path: flattens the per-element sequences into one (B·T)×d pass with
// per-element masks. Counts one forward per element.
std::vector<BackboneOutput> backbone_forward_batched(Tape& tape,
                                                     const std::vector<UnifiedSequence>& seqs,
                                                     const BackboneParams& params);

// Instrumentation used by the latency harness.
std::uint64_t backbone_forward_count();
std::uint64_t count_forwards_reset();  // atomic read-and-zero
void backbone_count_add(std::uint64_t n);

}  // namespace vla
