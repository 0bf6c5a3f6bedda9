#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "vla/nn.hpp"
#include "vla/optim.hpp"
#include "vla/tensor.hpp"
#include "vla/world.hpp"

namespace vla {

inline constexpr int kPrefixLen = 4;   // N linguistic query tokens -> prefix rows
inline constexpr int kDecDim = 32;
inline constexpr int kDecLayers = 2;
inline constexpr int kDecHeads = 4;
// prefix + bos + up to (kCotMaxLen + eos - 1) teacher-forced tokens
inline constexpr int kDecMaxPos = kPrefixLen + 1 + kCotMaxLen;

// Closed word-level vocabulary over the CoT/instruction grammar.
// ids: pad=0, bos=1, eos=2, grammar words from 3 in canonical order.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;

    static Vocabulary standard();
    static Vocabulary from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;

    int size() const { return static_cast<int>(words_.size()); }
    int id(const std::string& word) const;
    const std::string& word(int id) const;
    bool has(const std::string& word) const { return ids_.count(word) > 0; }

    // Whitespace word-level split; unknown word raises VocabError naming it.
    std::vector<int> tokenize(const std::string& text) const;
    // Exact inverse on grammar strings; special ids are skipped.
    std::string detokenize(const std::vector<int>& ids) const;

private:
    std::vector<std::string> words_;
    std::map<std::string, int> ids_;
};

// Small causal decoder, pretrained in-repo on the CoT corpus and then frozen.
struct FrozenDecoder {
    int d_dec = kDecDim;
    int n_layers = kDecLayers;
    int vocab = 0;
    AttentionConfig cfg;
    TokenEmbedder embedder;  // token table + positional table over kDecMaxPos
    std::vector<TransformerBlockParams> blocks;
    Param* out_w = nullptr;  // d_dec×V
    Param* out_b = nullptr;  // V
    static FrozenDecoder create(ParamStore& store, const std::string& prefix, int vocab, Rng& rng);
    bool frozen() const { return embedder.table->frozen; }
};

// Linear map d_VLM -> d_dec (with bias) aligning backbone states to the decoder.
struct PrefixProjector {
    Param* w = nullptr;
    Param* b = nullptr;
    static PrefixProjector create(ParamStore& store, const std::string& prefix, int d_vlm,
                                  int d_dec, Rng& rng, double init_std = 0.02);
};

// Decoder forward over pre-built input embeddings (batch·t)×d_dec with a
// shared causal mask; returns logits (batch·t)×V.
Tensor decoder_logits(Tape& tape, const FrozenDecoder& dec, Tensor embs, int batch, int t);

struct DecoderPretrainConfig {
    int steps = 3000;
    int batch = 32;
    double lr = 2e-3;
    std::uint64_t seed = 0;
    double target_ppl = 1.5;
    int eval_every = 250;
    double holdout_fraction = 0.1;
};

struct DecoderPretrainResult {
    double holdout_ppl = 0.0;
    int steps_run = 0;
};

// Next-token CE training with bos/eos over the corpus, zero-embedding rows at
// the kPrefixLen prefix positions so positions match prefixed use. Freezes the
// decoder parameters on success; raises TrainingError when the held-out
// perplexity target is not met within the budget.
DecoderPretrainResult pretrain_decoder(FrozenDecoder& dec, const std::vector<std::string>& corpus,
                                       const Vocabulary& vocab, const DecoderPretrainConfig& cfg);

// Prefix-conditioned CE of Eq-style teacher forcing: decoder input is
// [proj(h_lin) rows, bos, y_1..y_{L-1}] and the loss covers the L text
// positions only (y includes the trailing eos). Gradients flow into h_lin and
// the projector; the decoder must be frozen.
Tensor linguistic_loss(Tape& tape, Tensor h_lin, const std::vector<int>& target_ids,
                       const PrefixProjector& proj, const FrozenDecoder& dec);

// Batched variant over flattened h_lin rows (batch·kPrefixLen)×d_VLM; targets
// are per-element token id lists (eos appended internally). Mean over elements.
Tensor linguistic_loss_batched(Tape& tape, Tensor h_lin_all, int batch,
                               const std::vector<std::vector<int>>& cot_ids,
                               const PrefixProjector& proj, const FrozenDecoder& dec);

// Argmax decoding from [prefix, bos] until eos or max_len tokens; returns the
// generated ids without bos/eos. h_lin_values is the raw kPrefixLen×d_VLM slab.
std::vector<int> greedy_decode(const std::vector<double>& h_lin_values, int d_vlm,
                               const PrefixProjector& proj, const FrozenDecoder& dec,
                               int max_len = 64);

}  // namespace vla
