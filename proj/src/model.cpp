#include "vla/model.hpp"

#include <cmath>

namespace vla {

std::unique_ptr<PolicyModel> PolicyModel::create(const ModelConfig& cfg, const Vocabulary& vocab) {
    auto m = std::unique_ptr<PolicyModel>(new PolicyModel());
    m->cfg = cfg;
    m->vocab = vocab;
    if (m->cfg.teacher_mu.empty()) m->cfg.teacher_mu.assign(kTeacherDim, 0.0);
    if (m->cfg.teacher_sigma.empty()) m->cfg.teacher_sigma.assign(kTeacherDim, 1.0);
    Rng rng = Rng::stream(cfg.init_seed, 0x1217);
    double std = cfg.init_std;
    m->backbone = BackboneParams::create(m->store, "backbone", vocab.size(), rng, std);
    m->queries = QueryTokens::create(m->store, "queries", kDvlm, rng, std);
    // The spatial probes select per-patch content purely through attention
    // weights; unit-scale queries and a stronger projector keep that logit
    // path alive at init instead of collapsing to a uniform mixture.
    m->spatial = SpatialQueries::create(m->store, "visual", rng, 1.0);
    m->vproj = VisualProjector::create(m->store, "visual.proj", rng, 0.15);
    m->pproj = PrefixProjector::create(m->store, "prefix_proj", kDvlm, kDecDim, rng, std);
    m->decoder = FrozenDecoder::create(m->store, "decoder", vocab.size(), rng);
    m->dit = DiTParams::create(m->store, "dit", rng, std);
    return m;
}

std::vector<Param*> PolicyModel::trainable_params() {
    std::vector<Param*> out;
    for (Param* p : store.all()) {
        if (p->frozen) continue;
        if (!cfg.use_visual_cot && p->name.rfind("visual", 0) == 0) continue;
        if (!cfg.use_linguistic_cot && p->name.rfind("prefix_proj", 0) == 0) continue;
        out.push_back(p);
    }
    return out;
}

std::vector<double> PolicyModel::standardized_teacher(const std::vector<double>& depth) const {
    std::vector<double> f = teacher_features(depth);
    for (int p = 0; p < kNumPatches; ++p)
        for (int d = 0; d < kTeacherDim; ++d) {
            std::size_t i = static_cast<std::size_t>(p) * kTeacherDim + d;
            // The sigma floor keeps rarely-firing dimensions (sparse histogram
            // bins, near-constant minima) from exploding into heavy-tailed
            // targets after standardization; every raw feature lives in [-1,1].
            f[i] = (f[i] - cfg.teacher_mu[static_cast<std::size_t>(d)]) /
                   std::max(cfg.teacher_sigma[static_cast<std::size_t>(d)], 0.1);
        }
    return f;
}

BatchItem episode_to_item(const Episode& ep) {
    BatchItem it;
    it.image.assign(ep.image.begin(), ep.image.end());
    it.depth.assign(ep.depth.begin(), ep.depth.end());
    for (std::uint16_t id : ep.instruction)
        if (id != Vocabulary::kPad) it.instr_ids.push_back(id);
    for (int i = 0; i < kStateDim; ++i) it.state[static_cast<std::size_t>(i)] = ep.state[static_cast<std::size_t>(i)];
    it.chunk.assign(ep.actions.begin(), ep.actions.end());
    for (std::uint16_t id : ep.cot) it.cot_ids.push_back(id);
    return it;
}

JointLossResult joint_loss(Tape& tape, PolicyModel& model, const std::vector<BatchItem>& batch,
                           const FlowDraws& draws, double lambda_vis, double lambda_lin,
                           double lambda_act) {
    int b = static_cast<int>(batch.size());
    if (b == 0) throw ContractError("joint_loss: empty batch");

    std::vector<UnifiedSequence> seqs;
    seqs.reserve(batch.size());
    for (const BatchItem& it : batch)
        seqs.push_back(assemble_input(tape, it.image, it.instr_ids, model.queries, model.backbone));
    std::vector<BackboneOutput> outs = backbone_forward_batched(tape, seqs, model.backbone);

    std::vector<Tensor> vis_rows, lin_rows, vlm_rows;
    for (const BackboneOutput& o : outs) {
        vis_rows.push_back(o.h_vis);
        lin_rows.push_back(o.h_lin);
        vlm_rows.push_back(o.h_vlm);
    }
    Tensor h_vis_all = tape.concat_rows(vis_rows);
    Tensor h_lin_all = tape.concat_rows(lin_rows);
    Tensor h_vlm_all = tape.concat_rows(vlm_rows);

    JointLossResult res;
    Tensor total = tape.scalar(0.0);

    if (model.cfg.use_visual_cot) {
        std::vector<double> teacher(static_cast<std::size_t>(b) * kNumPatches * kTeacherDim);
        for (int i = 0; i < b; ++i) {
            std::vector<double> f = model.standardized_teacher(batch[static_cast<std::size_t>(i)].depth);
            std::copy(f.begin(), f.end(),
                      teacher.begin() + static_cast<std::ptrdiff_t>(i) * kNumPatches * kTeacherDim);
        }
        Tensor recon = reconstruct_teacher_batched(tape, h_vis_all, b, model.spatial, model.vproj);
        Tensor tgt = tape.constant({b * kNumPatches, kTeacherDim}, std::move(teacher));
        Tensor l_vis = visual_loss(tape, recon, tgt);
        res.parts.l_vis = l_vis.item();
        total = tape.add(total, tape.scale(l_vis, lambda_vis));
    }
    if (model.cfg.use_linguistic_cot) {
        std::vector<std::vector<int>> cots;
        cots.reserve(batch.size());
        for (const BatchItem& it : batch) cots.push_back(it.cot_ids);
        Tensor l_lin = linguistic_loss_batched(tape, h_lin_all, b, cots, model.pproj, model.decoder);
        res.parts.l_lin = l_lin.item();
        total = tape.add(total, tape.scale(l_lin, lambda_lin));
    }
    {
        std::vector<std::vector<double>> chunks;
        std::vector<std::array<double, kStateDim>> states;
        for (const BatchItem& it : batch) {
            chunks.push_back(it.chunk);
            states.push_back(it.state);
        }
        Tensor l_act = action_loss_batched(tape, chunks, states, h_vlm_all, kSeqLen, model.dit, draws);
        res.parts.l_act = l_act.item();
        total = tape.add(total, tape.scale(l_act, lambda_act));
    }
    res.total = total;
    res.parts.l_total = total.item();
    return res;
}

std::vector<double> policy_step(PolicyModel& model, const std::vector<double>& image,
                                const std::vector<int>& instr_ids,
                                const std::array<double, kStateDim>& state,
                                const SamplerConfig& sampler, Rng& noise_rng) {
    std::vector<double> h_vlm_values;
    {
        Tape tape(false);
        UnifiedSequence seq = assemble_input(tape, image, instr_ids, model.queries, model.backbone);
        BackboneOutput out = backbone_forward(tape, seq, model.backbone);
        h_vlm_values = out.h_vlm.value();
    }
    return sample_actions(state, h_vlm_values, kSeqLen, model.dit, sampler, noise_rng);
}

namespace {

std::vector<double> h_slice_values(PolicyModel& model, const std::vector<double>& image,
                                   const std::vector<int>& instr_ids, bool lin) {
    Tape tape(false);
    UnifiedSequence seq = assemble_input(tape, image, instr_ids, model.queries, model.backbone);
    BackboneOutput out = backbone_forward(tape, seq, model.backbone);
    return lin ? out.h_lin.value() : out.h_vis.value();
}

}  // namespace

std::vector<double> model_h_vis_values(PolicyModel& model, const std::vector<double>& image,
                                       const std::vector<int>& instr_ids) {
    return h_slice_values(model, image, instr_ids, false);
}

std::vector<double> model_h_lin_values(PolicyModel& model, const std::vector<double>& image,
                                       const std::vector<int>& instr_ids) {
    return h_slice_values(model, image, instr_ids, true);
}

Checkpoint model_checkpoint(const PolicyModel& model, nlohmann::json meta) {
    Checkpoint ck;
    meta["decoder_frozen"] = model.decoder.frozen();
    ck.meta = std::move(meta);
    for (const Param* p : model.store.all())
        ck.tensors.emplace(p->name, std::make_pair(p->shape, p->value));
    return ck;
}

void load_model_params(PolicyModel& model, const Checkpoint& ck) {
    for (Param* p : model.store.all()) {
        auto it = ck.tensors.find(p->name);
        if (it == ck.tensors.end())
            throw FormatError("checkpoint is missing tensor " + p->name);
        if (it->second.first != p->shape)
            throw FormatError("checkpoint tensor " + p->name + " has shape " +
                              shape_str(it->second.first) + ", expected " + shape_str(p->shape));
        p->value = it->second.second;
    }
    if (ck.meta.value("decoder_frozen", false))
        for (Param* p : model.store.with_prefix("decoder")) p->frozen = true;
}

// ---------------------------------------------------------------------------
// Depth probe
// ---------------------------------------------------------------------------

namespace {

std::vector<double> probe_target(const Episode& ep) {
    std::vector<double> t(static_cast<std::size_t>(kNumPatches) * kPatch * kPatch);
    for (int p = 0; p < kNumPatches; ++p) {
        int pr = p / kPatchesPerSide, pc = p % kPatchesPerSide;
        for (int py = 0; py < kPatch; ++py)
            for (int px = 0; px < kPatch; ++px)
                t[static_cast<std::size_t>(p) * kPatch * kPatch + py * kPatch + px] =
                    ep.depth[(static_cast<std::size_t>(pr * kPatch + py)) * kImageHW +
                             pc * kPatch + px];
    }
    return t;
}

}  // namespace

ProbeTrainResult train_probe(PolicyModel& model, const Dataset& ds, ParamStore& probe_store,
                             DepthProbe& probe, const ProbeTrainConfig& cfg) {
    if (ds.episodes.empty()) throw ContractError("train_probe: empty dataset");
    const int in_dim = kVisQueries * kDvlm;
    const int out_dim = kNumPatches * kPatch * kPatch;

    // Features once, model frozen (no-grad forwards).
    std::vector<std::vector<double>> xs;
    std::vector<std::vector<double>> ys;
    xs.reserve(ds.episodes.size());
    ys.reserve(ds.episodes.size());
    for (const Episode& ep : ds.episodes) {
        BatchItem it = episode_to_item(ep);
        xs.push_back(model_h_vis_values(model, it.image, it.instr_ids));
        ys.push_back(probe_target(ep));
    }

    Rng rng = Rng::stream(cfg.seed, 0x9B0BE);
    Adam opt({probe.w, probe.b}, AdamConfig{.lr = cfg.lr});
    double last = 0.0;
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<double> x(static_cast<std::size_t>(cfg.batch) * in_dim);
        std::vector<double> y(static_cast<std::size_t>(cfg.batch) * out_dim);
        for (int b = 0; b < cfg.batch; ++b) {
            std::size_t i = rng.range(xs.size());
            std::copy(xs[i].begin(), xs[i].end(), x.begin() + static_cast<std::ptrdiff_t>(b) * in_dim);
            std::copy(ys[i].begin(), ys[i].end(), y.begin() + static_cast<std::ptrdiff_t>(b) * out_dim);
        }
        Tape tape;
        Tensor pred = tape.add_bias(
            tape.matmul(tape.constant({cfg.batch, in_dim}, std::move(x)), tape.leaf(*probe.w)),
            tape.leaf(*probe.b));
        Tensor loss = tape.mse_loss(pred, tape.constant({cfg.batch, out_dim}, std::move(y)));
        last = loss.item();
        tape.backward(loss);
        opt.step();
    }
    (void)probe_store;
    return ProbeTrainResult{last};
}

double probe_pearson(PolicyModel& model, const DepthProbe& probe, const Dataset& ds) {
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    std::size_t n = 0;
    for (const Episode& ep : ds.episodes) {
        BatchItem it = episode_to_item(ep);
        std::vector<double> pred = probe_decode(model_h_vis_values(model, it.image, it.instr_ids), probe);
        for (std::size_t i = 0; i < pred.size(); ++i) {
            double x = pred[i];
            double y = ep.depth[i];
            sx += x;
            sy += y;
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
            ++n;
        }
    }
    double nn = static_cast<double>(n);
    double cov = sxy / nn - (sx / nn) * (sy / nn);
    double vx = sxx / nn - (sx / nn) * (sx / nn);
    double vy = syy / nn - (sy / nn) * (sy / nn);
    return cov / std::sqrt(std::max(vx * vy, 1e-18));
}

}  // namespace vla
