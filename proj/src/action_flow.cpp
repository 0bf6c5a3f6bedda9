#include "vla/action_flow.hpp"

#include <cmath>

namespace vla {

std::vector<double> normalize_chunk(const std::vector<double>& raw) {
    if (raw.size() != kChunkValues)
        throw ShapeError("normalize_chunk: expected " + std::to_string(kChunkValues) + " values");
    std::vector<double> out(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i)
        out[i] = raw[i] / kActionScale[i % kActionDim];
    return out;
}

std::vector<double> denormalize_chunk(const std::vector<double>& unit) {
    if (unit.size() != kChunkValues)
        throw ShapeError("denormalize_chunk: expected " + std::to_string(kChunkValues) + " values");
    std::vector<double> out(unit.size());
    for (std::size_t i = 0; i < unit.size(); ++i)
        out[i] = unit[i] * kActionScale[i % kActionDim];
    return out;
}

DiTParams DiTParams::create(ParamStore& store, const std::string& prefix, Rng& rng,
                            double init_std) {
    DiTParams p;
    p.in_w = &store.create_normal(prefix + ".in.w", {kActionDim, kDitDim}, rng, init_std);
    p.in_b = &store.create_zeros(prefix + ".in.b", {kDitDim});
    p.state_w = &store.create_normal(prefix + ".state.w", {kStateDim, kDitDim}, rng, init_std);
    p.state_b = &store.create_zeros(prefix + ".state.b", {kDitDim});
    p.time = TimeEmbedParams::create(store, prefix + ".time", 16, kDitDim, rng, init_std);
    p.pos = &store.create_normal(prefix + ".pos", {kDitTokens, kDitDim}, rng, init_std);
    for (int i = 0; i < kDitLayers; ++i) {
        DiTBlock b;
        b.base = TransformerBlockParams::create(store, prefix + ".block" + std::to_string(i),
                                                kDitDim, rng, init_std);
        b.ln_cross_gamma = &store.create_const(prefix + ".block" + std::to_string(i) + ".lnc.gamma",
                                               {kDitDim}, 1.0);
        b.ln_cross_beta =
            &store.create_zeros(prefix + ".block" + std::to_string(i) + ".lnc.beta", {kDitDim});
        b.cross = AttentionParams::create(store, prefix + ".block" + std::to_string(i) + ".cross",
                                          kDitDim, rng, init_std);
        p.blocks.push_back(b);
    }
    p.out_w = &store.create_normal(prefix + ".out.w", {kDitDim, kActionDim}, rng, init_std);
    p.out_b = &store.create_zeros(prefix + ".out.b", {kActionDim});
    return p;
}

std::vector<double> interpolate(const std::vector<double>& target, const std::vector<double>& noise,
                                double t) {
    if (target.size() != noise.size())
        throw ShapeError("interpolate: size mismatch " + std::to_string(target.size()) + " vs " +
                         std::to_string(noise.size()));
    if (t < 0.0 || t > 1.0)
        throw ContractError("interpolate: t=" + std::to_string(t) + " outside [0,1]");
    std::vector<double> out(target.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = t * target[i] + (1.0 - t) * noise[i];
    return out;
}

Tensor dit_forward_batched(Tape& tape, const std::vector<double>& a_t_all,
                           const std::vector<double>& ts,
                           const std::vector<std::array<double, kStateDim>>& states,
                           Tensor h_vlm_all, int batch, int tk, const DiTParams& p) {
    if (a_t_all.size() != static_cast<std::size_t>(batch) * kChunkValues ||
        ts.size() != static_cast<std::size_t>(batch) || states.size() != static_cast<std::size_t>(batch))
        throw ShapeError("dit_forward: batch size mismatch");

    // Primary tokens: [state, a_1..a_H] per element.
    std::vector<double> state_rows(static_cast<std::size_t>(batch) * kStateDim);
    for (int b = 0; b < batch; ++b)
        for (int i = 0; i < kStateDim; ++i)
            state_rows[static_cast<std::size_t>(b) * kStateDim + i] =
                states[static_cast<std::size_t>(b)][static_cast<std::size_t>(i)];
    Tensor state_tok = tape.add_bias(
        tape.matmul(tape.constant({batch, kStateDim}, state_rows), tape.leaf(*p.state_w)),
        tape.leaf(*p.state_b));
    Tensor act_tok = tape.add_bias(
        tape.matmul(tape.constant({batch * kChunkLen, kActionDim}, a_t_all), tape.leaf(*p.in_w)),
        tape.leaf(*p.in_b));

    std::vector<Tensor> rows;
    rows.reserve(static_cast<std::size_t>(batch) * 2);
    for (int b = 0; b < batch; ++b) {
        rows.push_back(tape.row_slice(state_tok, b, b + 1));
        rows.push_back(tape.row_slice(act_tok, b * kChunkLen, (b + 1) * kChunkLen));
    }
    Tensor x = tape.concat_rows(rows);  // (B·8)×d

    // Position rows repeated per element, then the per-element time embedding
    // added to every primary token.
    std::vector<int> pos_ids;
    pos_ids.reserve(static_cast<std::size_t>(batch) * kDitTokens);
    for (int b = 0; b < batch; ++b)
        for (int i = 0; i < kDitTokens; ++i) pos_ids.push_back(i);
    x = tape.add(x, tape.gather_rows(tape.leaf(*p.pos), pos_ids));

    std::vector<Tensor> temb_rows;
    temb_rows.reserve(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) {
        Tensor e = time_embed(tape, ts[static_cast<std::size_t>(b)], p.time);  // [d]
        Tensor e_row = tape.reshape(e, {1, kDitDim});
        std::vector<Tensor> rep(static_cast<std::size_t>(kDitTokens), e_row);
        temb_rows.push_back(tape.concat_rows(rep));
    }
    x = tape.add(x, tape.concat_rows(temb_rows));

    Mask self_mask = full_mask(kDitTokens, kDitTokens);
    for (const DiTBlock& blk : p.blocks)
        x = transformer_block_batched(tape, x, blk.base, p.cfg, self_mask, batch, kDitTokens, false,
                                      &h_vlm_all, &blk.cross, blk.ln_cross_gamma, blk.ln_cross_beta,
                                      tk);

    std::vector<Tensor> act_rows;
    act_rows.reserve(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b)
        act_rows.push_back(tape.row_slice(x, b * kDitTokens + 1, (b + 1) * kDitTokens));
    Tensor acts = tape.concat_rows(act_rows);  // (B·H)×d
    return tape.add_bias(tape.matmul(acts, tape.leaf(*p.out_w)), tape.leaf(*p.out_b));
}

Tensor dit_forward(Tape& tape, const std::vector<double>& a_t, double t,
                   const std::array<double, kStateDim>& state, Tensor h_vlm, const DiTParams& p) {
    return dit_forward_batched(tape, a_t, {t}, {state}, h_vlm, 1, h_vlm.shape()[0], p);
}

FlowDraws draw_flow(Rng& rng, int batch) {
    FlowDraws d;
    d.t.resize(static_cast<std::size_t>(batch));
    d.noise.resize(static_cast<std::size_t>(batch) * kChunkValues);
    for (int b = 0; b < batch; ++b) {
        d.t[static_cast<std::size_t>(b)] = rng.uniform();
        for (int i = 0; i < kChunkValues; ++i)
            d.noise[static_cast<std::size_t>(b) * kChunkValues + i] = rng.normal();
    }
    return d;
}

Tensor action_loss_batched(Tape& tape, const std::vector<std::vector<double>>& raw_chunks,
                           const std::vector<std::array<double, kStateDim>>& states,
                           Tensor h_vlm_all, int tk, const DiTParams& p, const FlowDraws& draws) {
    int batch = static_cast<int>(raw_chunks.size());
    std::vector<double> a_t_all(static_cast<std::size_t>(batch) * kChunkValues);
    std::vector<double> target_all(static_cast<std::size_t>(batch) * kChunkValues);
    for (int b = 0; b < batch; ++b) {
        std::vector<double> a = normalize_chunk(raw_chunks[static_cast<std::size_t>(b)]);
        std::vector<double> a0(draws.noise.begin() + static_cast<std::ptrdiff_t>(b) * kChunkValues,
                               draws.noise.begin() + static_cast<std::ptrdiff_t>(b + 1) * kChunkValues);
        std::vector<double> a_t = interpolate(a, a0, draws.t[static_cast<std::size_t>(b)]);
        for (int i = 0; i < kChunkValues; ++i) {
            a_t_all[static_cast<std::size_t>(b) * kChunkValues + i] = a_t[static_cast<std::size_t>(i)];
            target_all[static_cast<std::size_t>(b) * kChunkValues + i] =
                a[static_cast<std::size_t>(i)] - a0[static_cast<std::size_t>(i)];
        }
    }
    Tensor v = dit_forward_batched(tape, a_t_all, draws.t, states, h_vlm_all, batch, tk, p);
    Tensor target = tape.constant({batch * kChunkLen, kActionDim}, target_all);
    return tape.mse_loss(v, target);
}

std::vector<double> sample_actions(const std::array<double, kStateDim>& state,
                                   const std::vector<double>& h_vlm_values, int tk,
                                   const DiTParams& p, const SamplerConfig& cfg, Rng& rng) {
    if (cfg.n_steps < 1) throw ContractError("sample_actions: n_steps must be >= 1");
    std::vector<double> a(kChunkValues);
    for (double& v : a) v = rng.normal();
    for (int k = 0; k < cfg.n_steps; ++k) {
        double t = static_cast<double>(k) / cfg.n_steps;
        Tape tape(false);
        Tensor h_vlm = tape.constant({tk, kDvlm}, h_vlm_values);
        Tensor v = dit_forward(tape, a, t, state, h_vlm, p);
        const auto& vv = v.value();
        for (int i = 0; i < kChunkValues; ++i)
            a[static_cast<std::size_t>(i)] += vv[static_cast<std::size_t>(i)] / cfg.n_steps;
    }
    return denormalize_chunk(a);
}

}  // namespace vla
