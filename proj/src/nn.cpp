#include "vla/nn.hpp"

#include <cmath>

namespace vla {

AttentionParams AttentionParams::create(ParamStore& store, const std::string& prefix, int d,
                                        Rng& rng, double init_std) {
    AttentionParams p;
    p.wq = &store.create_normal(prefix + ".wq", {d, d}, rng, init_std);
    p.wk = &store.create_normal(prefix + ".wk", {d, d}, rng, init_std);
    p.wv = &store.create_normal(prefix + ".wv", {d, d}, rng, init_std);
    p.wo = &store.create_normal(prefix + ".wo", {d, d}, rng, init_std);
    return p;
}

TransformerBlockParams TransformerBlockParams::create(ParamStore& store, const std::string& prefix,
                                                      int d, Rng& rng, double init_std) {
    TransformerBlockParams p;
    p.ln1_gamma = &store.create_const(prefix + ".ln1.gamma", {d}, 1.0);
    p.ln1_beta = &store.create_zeros(prefix + ".ln1.beta", {d});
    p.attn = AttentionParams::create(store, prefix + ".attn", d, rng, init_std);
    p.ln2_gamma = &store.create_const(prefix + ".ln2.gamma", {d}, 1.0);
    p.ln2_beta = &store.create_zeros(prefix + ".ln2.beta", {d});
    p.w1 = &store.create_normal(prefix + ".ffn.w1", {d, 4 * d}, rng, init_std);
    p.w2 = &store.create_normal(prefix + ".ffn.w2", {4 * d, d}, rng, init_std);
    return p;
}

PatchEmbedder PatchEmbedder::create(ParamStore& store, const std::string& prefix, int image_hw,
                                    int patch, int d_model, Rng& rng, double init_std) {
    if (patch <= 0 || image_hw % patch != 0)
        throw ConfigError("image size " + std::to_string(image_hw) + " not divisible by patch " +
                          std::to_string(patch));
    PatchEmbedder pe;
    pe.image_hw = image_hw;
    pe.patch = patch;
    pe.d_model = d_model;
    int in_dim = 3 * patch * patch;
    pe.proj = &store.create_normal(prefix + ".proj", {in_dim, d_model}, rng, init_std);
    pe.bias = &store.create_zeros(prefix + ".bias", {d_model});
    pe.pos = &store.create_normal(prefix + ".pos", {pe.num_patches(), d_model}, rng, init_std);
    return pe;
}

TokenEmbedder TokenEmbedder::create(ParamStore& store, const std::string& prefix, int vocab,
                                    int max_len, int d_model, Rng& rng, double init_std) {
    TokenEmbedder te;
    te.vocab = vocab;
    te.max_len = max_len;
    te.d_model = d_model;
    te.table = &store.create_normal(prefix + ".table", {vocab, d_model}, rng, init_std);
    te.pos = &store.create_normal(prefix + ".pos", {max_len, d_model}, rng, init_std);
    return te;
}

Tensor TokenEmbedder::embed(Tape& tape, const std::vector<int>& ids, int pos0) const {
    if (pos0 < 0 || pos0 + static_cast<int>(ids.size()) > max_len)
        throw ContractError("token positions [" + std::to_string(pos0) + "," +
                            std::to_string(pos0 + ids.size()) + ") exceed table of " +
                            std::to_string(max_len));
    std::vector<int> pos_ids(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) pos_ids[i] = pos0 + static_cast<int>(i);
    Tensor tok = tape.gather_rows(tape.leaf(*table), ids);
    Tensor pos_rows = tape.gather_rows(tape.leaf(*pos), pos_ids);
    return tape.add(tok, pos_rows);
}

TimeEmbedParams TimeEmbedParams::create(ParamStore& store, const std::string& prefix, int n_freq,
                                        int d_model, Rng& rng, double init_std) {
    TimeEmbedParams p;
    p.n_freq = n_freq;
    p.d_model = d_model;
    p.w1 = &store.create_normal(prefix + ".w1", {2 * n_freq, d_model}, rng, init_std);
    p.b1 = &store.create_zeros(prefix + ".b1", {d_model});
    p.w2 = &store.create_normal(prefix + ".w2", {d_model, d_model}, rng, init_std);
    p.b2 = &store.create_zeros(prefix + ".b2", {d_model});
    return p;
}

Mask causal_mask(int t) {
    Mask m(static_cast<std::size_t>(t) * t, 0);
    for (int i = 0; i < t; ++i)
        for (int j = 0; j <= i; ++j) m[static_cast<std::size_t>(i) * t + j] = 1;
    return m;
}

Mask full_mask(int tq, int tk) { return Mask(static_cast<std::size_t>(tq) * tk, 1); }

Mask causal_pad_mask(const std::vector<std::uint8_t>& is_pad) {
    int t = static_cast<int>(is_pad.size());
    Mask m(static_cast<std::size_t>(t) * t, 0);
    for (int i = 0; i < t; ++i)
        for (int j = 0; j <= i; ++j)
            if (j == i || !is_pad[static_cast<std::size_t>(j)])
                m[static_cast<std::size_t>(i) * t + j] = 1;
    return m;
}

Tensor self_attention_batched(Tape& tape, Tensor x, const AttentionParams& p,
                              const AttentionConfig& cfg, const Mask& mask, int batch, int t,
                              bool per_element_mask) {
    int hd = cfg.head_dim();
    Tensor q = tape.matmul(x, tape.leaf(*p.wq));
    Tensor k = tape.matmul(x, tape.leaf(*p.wk));
    Tensor v = tape.matmul(x, tape.leaf(*p.wv));
    Tensor s = tape.attn_scores(q, k, batch, cfg.n_heads, t, t, 1.0 / std::sqrt(hd), &mask,
                                per_element_mask);
    Tensor w = tape.masked_softmax(s, mask, batch, cfg.n_heads, t, t, per_element_mask);
    Tensor o = tape.attn_apply(w, v, batch, cfg.n_heads, t, t);
    return tape.matmul(o, tape.leaf(*p.wo));
}

Tensor cross_attention_batched(Tape& tape, Tensor q_in, Tensor kv, const AttentionParams& p,
                               const AttentionConfig& cfg, int batch, int tq, int tk) {
    int hd = cfg.head_dim();
    Tensor q = tape.matmul(q_in, tape.leaf(*p.wq));
    Tensor k = tape.matmul(kv, tape.leaf(*p.wk));
    Tensor v = tape.matmul(kv, tape.leaf(*p.wv));
    Tensor s = tape.attn_scores(q, k, batch, cfg.n_heads, tq, tk, 1.0 / std::sqrt(hd));
    Mask all = full_mask(tq, tk);
    Tensor w = tape.masked_softmax(s, all, batch, cfg.n_heads, tq, tk, false);
    Tensor o = tape.attn_apply(w, v, batch, cfg.n_heads, tq, tk);
    return tape.matmul(o, tape.leaf(*p.wo));
}

Tensor transformer_block_batched(Tape& tape, Tensor x, const TransformerBlockParams& p,
                                 const AttentionConfig& cfg, const Mask& mask, int batch, int t,
                                 bool per_element_mask, Tensor* cross_kv,
                                 const AttentionParams* cross, Param* ln_cross_gamma,
                                 Param* ln_cross_beta, int tk) {
    Tensor h = tape.layer_norm(x, tape.leaf(*p.ln1_gamma), tape.leaf(*p.ln1_beta), 1e-5);
    Tensor attn = self_attention_batched(tape, h, p.attn, cfg, mask, batch, t, per_element_mask);
    Tensor y = tape.add(x, attn);
    if (cross_kv != nullptr) {
        Tensor hc = tape.layer_norm(y, tape.leaf(*ln_cross_gamma), tape.leaf(*ln_cross_beta), 1e-5);
        Tensor ca = cross_attention_batched(tape, hc, *cross_kv, *cross, cfg, batch, t, tk);
        y = tape.add(y, ca);
    }
    Tensor h2 = tape.layer_norm(y, tape.leaf(*p.ln2_gamma), tape.leaf(*p.ln2_beta), 1e-5);
    Tensor ff = tape.matmul(tape.gelu(tape.matmul(h2, tape.leaf(*p.w1))), tape.leaf(*p.w2));
    return tape.add(y, ff);
}

Tensor multi_head_self_attention(Tape& tape, Tensor x, const AttentionParams& p,
                                 const AttentionConfig& cfg, const Mask& mask) {
    const Shape& s = x.shape();
    if (s.size() != 2 || s[1] != cfg.d_model)
        throw ShapeError("self_attention: input " + shape_str(s) + " vs d_model " +
                         std::to_string(cfg.d_model));
    return self_attention_batched(tape, x, p, cfg, mask, 1, s[0], false);
}

Tensor multi_head_cross_attention(Tape& tape, Tensor q, Tensor kv, const AttentionParams& p,
                                  const AttentionConfig& cfg) {
    const Shape& sq = q.shape();
    const Shape& sk = kv.shape();
    if (sq.size() != 2 || sk.size() != 2 || sq[1] != cfg.d_model || sk[1] != cfg.d_model)
        throw ShapeError("cross_attention: q " + shape_str(sq) + " kv " + shape_str(sk));
    return cross_attention_batched(tape, q, kv, p, cfg, 1, sq[0], sk[0]);
}

Tensor transformer_block(Tape& tape, Tensor x, const TransformerBlockParams& p,
                         const AttentionConfig& cfg, const Mask& mask) {
    const Shape& s = x.shape();
    if (s.size() != 2 || s[1] != cfg.d_model)
        throw ShapeError("transformer_block: input " + shape_str(s));
    return transformer_block_batched(tape, x, p, cfg, mask, 1, s[0], false);
}

std::vector<double> patch_rows(const std::vector<double>& image, int hw, int patch) {
    if (patch <= 0 || hw % patch != 0)
        throw ConfigError("image size " + std::to_string(hw) + " not divisible by patch " +
                          std::to_string(patch));
    if (image.size() != static_cast<std::size_t>(hw) * hw * 3)
        throw ShapeError("patch_rows: image length " + std::to_string(image.size()) + " vs " +
                         std::to_string(hw) + "x" + std::to_string(hw) + "x3");
    int side = hw / patch;
    int row_len = 3 * patch * patch;
    std::vector<double> out(static_cast<std::size_t>(side) * side * row_len);
    std::size_t o = 0;
    for (int pr = 0; pr < side; ++pr)
        for (int pc = 0; pc < side; ++pc)
            for (int py = 0; py < patch; ++py)
                for (int px = 0; px < patch; ++px)
                    for (int c = 0; c < 3; ++c)
                        out[o++] = image[((static_cast<std::size_t>(pr) * patch + py) * hw +
                                          (static_cast<std::size_t>(pc) * patch + px)) *
                                             3 +
                                         c];
    return out;
}

Tensor patchify(Tape& tape, const std::vector<double>& image, const PatchEmbedder& pe) {
    std::vector<double> rows = patch_rows(image, pe.image_hw, pe.patch);
    Tensor raw = tape.constant({pe.num_patches(), 3 * pe.patch * pe.patch}, std::move(rows));
    Tensor tok = tape.add_bias(tape.matmul(raw, tape.leaf(*pe.proj)), tape.leaf(*pe.bias));
    return tape.add(tok, tape.leaf(*pe.pos));
}

std::vector<double> time_features(double t, int n_freq) {
    std::vector<double> f(static_cast<std::size_t>(2) * n_freq);
    for (int i = 0; i < n_freq; ++i) {
        double w = std::pow(1000.0, static_cast<double>(i) / (n_freq - 1));
        f[static_cast<std::size_t>(2) * i] = std::sin(w * t);
        f[static_cast<std::size_t>(2) * i + 1] = std::cos(w * t);
    }
    return f;
}

Tensor time_embed(Tape& tape, double t, const TimeEmbedParams& p) {
    if (t < 0.0 || t > 1.0)
        throw ContractError("time_embed: t=" + std::to_string(t) + " outside [0,1]");
    Tensor f = tape.constant({1, 2 * p.n_freq}, time_features(t, p.n_freq));
    Tensor h = tape.gelu(tape.add_bias(tape.matmul(f, tape.leaf(*p.w1)), tape.leaf(*p.b1)));
    Tensor out = tape.add_bias(tape.matmul(h, tape.leaf(*p.w2)), tape.leaf(*p.b2));
    return tape.reshape(out, {p.d_model});
}

}  // namespace vla
