#pragma once

#include <vector>

#include "vla/backbone.hpp"
#include "vla/nn.hpp"

namespace vla {

// Learnable probes matching the teacher's spatial resolution (P×d_DA3).
struct SpatialQueries {
    Param* q = nullptr;  // kNumPatches×kTeacherDim
    static SpatialQueries create(ParamStore& store, const std::string& prefix, Rng& rng,
                                 double init_std = 0.02);
};

// Cross-attention projector from the compressed visual CoT states to the
// dense teacher grid: separate key/value maps d_VLM->d_DA3, one 4-head
// attention layer at d_DA3, output linear with bias.
struct VisualProjector {
    Param* key_proj = nullptr;    // d_VLM×d_DA3
    Param* value_proj = nullptr;  // d_VLM×d_DA3
    AttentionConfig cfg{kTeacherDim, 4, false};
    AttentionParams attn;
    Param* out_w = nullptr;  // d_DA3×d_DA3
    Param* out_b = nullptr;  // d_DA3
    static VisualProjector create(ParamStore& store, const std::string& prefix, Rng& rng,
                                  double init_std = 0.02);
};

// F̂ = OutLinear(CrossAttention(Q_spatial, K(h_vis), V(h_vis))): 64×16.
Tensor reconstruct_teacher(Tape& tape, Tensor h_vis, const SpatialQueries& sq,
                           const VisualProjector& proj);
// Batched over flattened h_vis rows (batch·M)×d_VLM -> (batch·P)×d_DA3.
Tensor reconstruct_teacher_batched(Tape& tape, Tensor h_vis_all, int batch,
                                   const SpatialQueries& sq, const VisualProjector& proj);

// MSE against the (constant) teacher features; gradients reach h_vis,
// Q_spatial and the projector only.
Tensor visual_loss(Tape& tape, Tensor reconstructed, Tensor teacher);

// Post-hoc linear probe: flattened h_vis (M·d_VLM) -> per-patch 4×4 depths.
struct DepthProbe {
    Param* w = nullptr;  // (M·d_VLM)×(P·p²)
    Param* b = nullptr;
    static DepthProbe create(ParamStore& store, const std::string& prefix, Rng& rng);
};

// Un-flattens per-patch predictions to the 32×32 image layout, clamped to [0,1].
std::vector<double> probe_decode(const std::vector<double>& h_vis_flat, const DepthProbe& probe);

}  // namespace vla
