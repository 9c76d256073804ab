#pragma once

#include <cstdint>

#include "switchhead/attention/config.hpp"
#include "switchhead/attention/params.hpp"
#include "switchhead/model/spec.hpp"

namespace switchhead::model {

// Counting convention (exactly the tensors `build` creates):
//   embedding vocab*d_model;
//   per layer: two layer norms (gain + bias each), attention, MLP;
//   attention: Q, K, V, O per head (x E for expert roles), selection
//     matrices d_model*E per gate set in use, XL position projection
//     (per head, or one when shared) and content/position biases;
//   dense MLP: 2*d_model*d_ff weights plus d_ff + d_model biases;
//   sigma-MoE MLP: 2*E*d_model*d_expert plus the d_model*E selection, no biases;
//   final layer norm; readout d_model*vocab (none when tied) plus vocab bias,
//   or a d_model*n_classes classifier with bias.
inline std::uint64_t count_attention_params(const attention::AttentionConfig& a) {
  using attention::Variant;
  const std::uint64_t dm = a.d_model, dh = a.d_head, H = a.n_heads, E = a.n_experts;
  std::uint64_t n = 0;
  if (a.variant == Variant::moa) {
    n += 2 * E * dm * dh + 2 * dm * dh + dm * E;
  } else {
    const attention::ExpertFlags f = a.variant == Variant::switchhead ? a.experts : attention::ExpertFlags{};
    for (bool expert : {f.q, f.k, f.v, f.o}) n += H * (expert ? E : 1) * dm * dh;
    if (f.source_side()) n += H * dm * E;
    if (f.destination_side()) n += H * dm * E;
    if (a.variant == Variant::head_gated) n += dm * H;
  }
  if (a.position == attention::Position::xl_relative) {
    n += (attention::uses_shared_pos(a) ? 1 : H) * dm * dh;
    n += (a.variant == Variant::moa ? 1 : H) * 2 * dh;
  }
  return n;
}

inline std::uint64_t count_mlp_params(const MlpSpec& m, std::uint64_t dm) {
  if (m.kind == MlpKind::dense) return 2 * dm * m.d_ff + m.d_ff + dm;
  return 2 * static_cast<std::uint64_t>(m.n_experts) * dm * m.d_expert + dm * m.n_experts;
}

inline std::uint64_t count_params(const ModelSpec& s) {
  s.validate();
  const std::uint64_t dm = s.d_model;
  std::uint64_t n = s.vocab * dm;
  const std::uint64_t per_layer = 4 * dm + count_attention_params(s.attention) + count_mlp_params(s.mlp, dm);
  n += s.n_layers * per_layer;
  n += 2 * dm;
  if (s.head == HeadKind::lm) {
    n += (s.tied ? 0 : dm * s.vocab) + s.vocab;
  } else {
    n += dm * s.n_classes + s.n_classes;
  }
  return n;
}

}  // namespace switchhead::model
