#include "vla/backbone.hpp"

#include <atomic>

#include "vla/linguistic_cot.hpp"

namespace vla {

namespace {
std::atomic<std::uint64_t> g_forward_count{0};
}

std::uint64_t backbone_forward_count() { return g_forward_count.load(); }

std::uint64_t count_forwards_reset() { return g_forward_count.exchange(0); }

void backbone_count_add(std::uint64_t n) { g_forward_count.fetch_add(n); }

QueryTokens QueryTokens::create(ParamStore& store, const std::string& prefix, int d, Rng& rng,
                                double init_std) {
    QueryTokens q;
    q.q_vis = &store.create_normal(prefix + ".q_vis", {kVisQueries, d}, rng, init_std);
    q.q_lin = &store.create_normal(prefix + ".q_lin", {kLinQueries, d}, rng, init_std);
    return q;
}

BackboneParams BackboneParams::create(ParamStore& store, const std::string& prefix, int vocab,
                                      Rng& rng, double init_std) {
    BackboneParams p;
    p.patch_embedder =
        PatchEmbedder::create(store, prefix + ".patch", kImageHW, kPatch, kDvlm, rng, init_std);
    p.token_embedder =
        TokenEmbedder::create(store, prefix + ".tok", vocab, kInstrLen, kDvlm, rng, init_std);
    for (int i = 0; i < kVlmLayers; ++i)
        p.blocks.push_back(TransformerBlockParams::create(
            store, prefix + ".block" + std::to_string(i), kDvlm, rng, init_std));
    p.final_gamma = &store.create_const(prefix + ".final.gamma", {kDvlm}, 1.0);
    p.final_beta = &store.create_zeros(prefix + ".final.beta", {kDvlm});
    return p;
}

UnifiedSequence assemble_input(Tape& tape, const std::vector<double>& image,
                               const std::vector<int>& instruction_ids, const QueryTokens& queries,
                               const BackboneParams& params) {
    if (static_cast<int>(instruction_ids.size()) > kInstrLen)
        throw ContractError("instruction of " + std::to_string(instruction_ids.size()) +
                            " tokens exceeds the " + std::to_string(kInstrLen) + "-token budget");
    std::vector<int> padded = instruction_ids;
    padded.resize(kInstrLen, Vocabulary::kPad);

    UnifiedSequence seq;
    seq.is_pad.assign(kSeqLen, 0);
    seq.segments.resize(kSeqLen);
    seq.position_ids.resize(kSeqLen);
    for (int i = 0; i < kSeqLen; ++i) {
        seq.position_ids[static_cast<std::size_t>(i)] = i;
        Segment s = Segment::vision;
        if (i >= kLinQueryStart) s = Segment::lin_query;
        else if (i >= kTextStart) s = Segment::text;
        else if (i >= kVisQueryStart) s = Segment::vis_query;
        seq.segments[static_cast<std::size_t>(i)] = s;
    }
    for (int i = 0; i < kInstrLen; ++i)
        if (padded[static_cast<std::size_t>(i)] == Vocabulary::kPad)
            seq.is_pad[static_cast<std::size_t>(kTextStart + i)] = 1;

    Tensor v_obs = patchify(tape, image, params.patch_embedder);
    Tensor q_vis = tape.leaf(*queries.q_vis);
    Tensor l_instr = params.token_embedder.embed(tape, padded, 0);
    Tensor q_lin = tape.leaf(*queries.q_lin);
    seq.embeddings = tape.concat_rows({v_obs, q_vis, l_instr, q_lin});
    seq.mask = causal_pad_mask(seq.is_pad);
    return seq;
}

namespace {

BackboneOutput slice_output(Tape& tape, Tensor h, int row0) {
    BackboneOutput out;
    out.h_vlm = h;
    out.h_vis = tape.row_slice(h, row0 + kVisQueryStart, row0 + kTextStart);
    out.h_lin = tape.row_slice(h, row0 + kLinQueryStart, row0 + kSeqLen);
    return out;
}

}  // namespace

BackboneOutput backbone_forward(Tape& tape, const UnifiedSequence& seq, const BackboneParams& params) {
    backbone_count_add(1);
    Tensor h = seq.embeddings;
    for (const TransformerBlockParams& b : params.blocks)
        h = transformer_block_batched(tape, h, b, params.cfg, seq.mask, 1, kSeqLen, false);
    h = tape.layer_norm(h, tape.leaf(*params.final_gamma), tape.leaf(*params.final_beta), 1e-5);
    return slice_output(tape, h, 0);
}

std::vector<BackboneOutput> backbone_forward_batched(Tape& tape,
                                                     const std::vector<UnifiedSequence>& seqs,
                                                     const BackboneParams& params) {
    int batch = static_cast<int>(seqs.size());
    if (batch == 0) throw ContractError("backbone_forward_batched: empty batch");
    backbone_count_add(static_cast<std::uint64_t>(batch));

    std::vector<Tensor> embs;
    embs.reserve(seqs.size());
    Mask masks(static_cast<std::size_t>(batch) * kSeqLen * kSeqLen);
    for (int b = 0; b < batch; ++b) {
        embs.push_back(seqs[static_cast<std::size_t>(b)].embeddings);
        std::copy(seqs[static_cast<std::size_t>(b)].mask.begin(),
                  seqs[static_cast<std::size_t>(b)].mask.end(),
                  masks.begin() + static_cast<std::ptrdiff_t>(b) * kSeqLen * kSeqLen);
    }
    Tensor h = tape.concat_rows(embs);
    for (const TransformerBlockParams& blk : params.blocks)
        h = transformer_block_batched(tape, h, blk, params.cfg, masks, batch, kSeqLen, true);
    h = tape.layer_norm(h, tape.leaf(*params.final_gamma), tape.leaf(*params.final_beta), 1e-5);

    std::vector<BackboneOutput> out;
    out.reserve(seqs.size());
    for (int b = 0; b < batch; ++b) {
        BackboneOutput o = slice_output(tape, h, b * kSeqLen);
        o.h_vlm = tape.row_slice(h, b * kSeqLen, (b + 1) * kSeqLen);
        out.push_back(o);
    }
    return out;
}

}  // namespace vla
