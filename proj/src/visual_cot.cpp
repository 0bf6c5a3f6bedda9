#include "vla/visual_cot.hpp"

#include <algorithm>
#include <cmath>

namespace vla {

SpatialQueries SpatialQueries::create(ParamStore& store, const std::string& prefix, Rng& rng,
                                      double init_std) {
    SpatialQueries s;
    s.q = &store.create_normal(prefix + ".q_spatial", {kNumPatches, kTeacherDim}, rng, init_std);
    return s;
}

VisualProjector VisualProjector::create(ParamStore& store, const std::string& prefix, Rng& rng,
                                        double init_std) {
    VisualProjector p;
    p.key_proj = &store.create_normal(prefix + ".key_proj", {kDvlm, kTeacherDim}, rng, init_std);
    p.value_proj = &store.create_normal(prefix + ".value_proj", {kDvlm, kTeacherDim}, rng, init_std);
    p.attn = AttentionParams::create(store, prefix + ".attn", kTeacherDim, rng, init_std);
    p.out_w = &store.create_normal(prefix + ".out.w", {kTeacherDim, kTeacherDim}, rng, init_std);
    p.out_b = &store.create_zeros(prefix + ".out.b", {kTeacherDim});
    return p;
}

Tensor reconstruct_teacher_batched(Tape& tape, Tensor h_vis_all, int batch,
                                   const SpatialQueries& sq, const VisualProjector& proj) {
    const Shape& s = h_vis_all.shape();
    if (s.size() != 2 || s[0] != batch * kVisQueries || s[1] != kDvlm)
        throw ShapeError("reconstruct_teacher: h_vis " + shape_str(s));
    Tensor k = tape.matmul(h_vis_all, tape.leaf(*proj.key_proj));      // (B·M)×16
    Tensor v = tape.matmul(h_vis_all, tape.leaf(*proj.value_proj));    // (B·M)×16
    Tensor q_one = tape.leaf(*sq.q);                                   // P×16
    std::vector<Tensor> qs(static_cast<std::size_t>(batch), q_one);
    Tensor q = batch == 1 ? q_one : tape.concat_rows(qs);              // (B·P)×16
    // Keys and values come from separate linear maps, so the attention is
    // composed explicitly rather than through cross_attention_batched.
    int hd = proj.cfg.head_dim();
    Tensor qq = tape.matmul(q, tape.leaf(*proj.attn.wq));
    Tensor kk = tape.matmul(k, tape.leaf(*proj.attn.wk));
    Tensor vv = tape.matmul(v, tape.leaf(*proj.attn.wv));
    Tensor scores = tape.attn_scores(qq, kk, batch, proj.cfg.n_heads, kNumPatches, kVisQueries,
                                     1.0 / std::sqrt(static_cast<double>(hd)));
    Mask all = full_mask(kNumPatches, kVisQueries);
    Tensor w = tape.masked_softmax(scores, all, batch, proj.cfg.n_heads, kNumPatches, kVisQueries,
                                   false);
    Tensor o = tape.attn_apply(w, vv, batch, proj.cfg.n_heads, kNumPatches, kVisQueries);
    Tensor mixed = tape.matmul(o, tape.leaf(*proj.attn.wo));
    return tape.add_bias(tape.matmul(mixed, tape.leaf(*proj.out_w)), tape.leaf(*proj.out_b));
}

Tensor reconstruct_teacher(Tape& tape, Tensor h_vis, const SpatialQueries& sq,
                           const VisualProjector& proj) {
    return reconstruct_teacher_batched(tape, h_vis, 1, sq, proj);
}

Tensor visual_loss(Tape& tape, Tensor reconstructed, Tensor teacher) {
    if (teacher.requires_grad())
        throw ContractError("visual_loss: teacher features must be constant");
    return tape.mse_loss(reconstructed, teacher);
}

DepthProbe DepthProbe::create(ParamStore& store, const std::string& prefix, Rng& rng) {
    (void)rng;
    DepthProbe p;
    int in_dim = kVisQueries * kDvlm;                 // 1024
    int out_dim = kNumPatches * kPatch * kPatch;      // 1024
    p.w = &store.create_zeros(prefix + ".w", {in_dim, out_dim});
    p.b = &store.create_zeros(prefix + ".b", {out_dim});
    return p;
}

std::vector<double> probe_decode(const std::vector<double>& h_vis_flat, const DepthProbe& probe) {
    int in_dim = kVisQueries * kDvlm;
    int out_dim = kNumPatches * kPatch * kPatch;
    if (static_cast<int>(h_vis_flat.size()) != in_dim)
        throw ShapeError("probe_decode: expected " + std::to_string(in_dim) + " values, got " +
                         std::to_string(h_vis_flat.size()));
    Tape tape(false);
    Tensor x = tape.constant({1, in_dim}, h_vis_flat);
    Tensor y = tape.add_bias(tape.matmul(x, tape.leaf(*probe.w)), tape.leaf(*probe.b));
    const auto& v = y.value();
    std::vector<double> img(static_cast<std::size_t>(kImageHW) * kImageHW, 0.0);
    for (int p = 0; p < kNumPatches; ++p) {
        int pr = p / kPatchesPerSide, pc = p % kPatchesPerSide;
        for (int py = 0; py < kPatch; ++py)
            for (int px = 0; px < kPatch; ++px) {
                double d = v[static_cast<std::size_t>(p) * kPatch * kPatch + py * kPatch + px];
                img[(static_cast<std::size_t>(pr * kPatch + py)) * kImageHW + pc * kPatch + px] =
                    std::clamp(d, 0.0, 1.0);
            }
    }
    return img;
}

}  // namespace vla
