#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "switchhead/attention/layer.hpp"
#include "switchhead/attention/params.hpp"
#include "switchhead/model/spec.hpp"
#include "switchhead/moe/mixture.hpp"
#include "switchhead/numerics/ops.hpp"
#include "switchhead/numerics/rng.hpp"

namespace switchhead::model {

struct MlpParams {
  Tensor w1, b1, w2, b2;  // dense
  Tensor up, down, sel;   // sigma_moe
};

struct Layer {
  Tensor ln1_g, ln1_b;
  attention::AttentionParams attn;
  Tensor ln2_g, ln2_b;
  MlpParams mlp;
};

// Pre-norm Transformer: x + attn(LN(x)), then h + dropout(mlp(LN(h))).
struct Model {
  ModelSpec spec;
  Tensor embed;  // [vocab x d_model]
  std::vector<Layer> layers;
  Tensor lnf_g, lnf_b;
  Tensor out_w, out_b;  // lm: [d_model x vocab] (absent when tied); classify: [d_model x n_classes]

  NamedTensors named() const {
    NamedTensors out;
    out.emplace_back("embed", embed);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      const auto& L = layers[l];
      out.emplace_back(p + "ln1.g", L.ln1_g);
      out.emplace_back(p + "ln1.b", L.ln1_b);
      for (auto& [n, t] : L.attn.named()) out.emplace_back(p + "attn." + n, t);
      out.emplace_back(p + "ln2.g", L.ln2_g);
      out.emplace_back(p + "ln2.b", L.ln2_b);
      const auto& m = L.mlp;
      for (auto [n, t] : {std::pair<const char*, const Tensor*>{"w1", &m.w1}, {"b1", &m.b1}, {"w2", &m.w2},
                          {"b2", &m.b2}, {"up", &m.up}, {"down", &m.down}, {"sel", &m.sel}}) {
        if (t->defined()) out.emplace_back(p + "mlp." + n, *t);
      }
    }
    out.emplace_back("lnf.g", lnf_g);
    out.emplace_back("lnf.b", lnf_b);
    if (out_w.defined()) out.emplace_back("out.w", out_w);
    out.emplace_back("out.b", out_b);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [n, t] : named()) out.push_back(t);
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named()) n += t.numel();
    return n;
  }
};

// Deterministic weights from the seed. Projections and selection matrices are
// U(-1/sqrt(fan_in), 1/sqrt(fan_in)); embeddings N(0, 1/d_model); layer-norm
// gains 1; biases 0.
inline Model build(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng root(seed);
  const std::size_t dm = spec.d_model;
  Model m;
  m.spec = spec;
  {
    Rng r = root.split(0);
    std::vector<double> v(spec.vocab * dm);
    const double s = 1.0 / std::sqrt(static_cast<double>(dm));
    for (double& x : v) x = r.normal() * s;
    m.embed = Tensor::adopt({spec.vocab, dm}, std::move(v), true);
  }
  for (std::size_t l = 0; l < spec.n_layers; ++l) {
    Rng r = root.split(1 + l);
    Layer L;
    L.ln1_g = Tensor::full({dm}, 1.0, true);
    L.ln1_b = Tensor::zeros({dm}, true);
    Rng ra = r.split(0);
    L.attn = attention::init_params(spec.attention, ra);
    L.ln2_g = Tensor::full({dm}, 1.0, true);
    L.ln2_b = Tensor::zeros({dm}, true);
    Rng rm = r.split(1);
    if (spec.mlp.kind == MlpKind::dense) {
      L.mlp.w1 = projection_param({dm, spec.mlp.d_ff}, rm);
      L.mlp.b1 = Tensor::zeros({spec.mlp.d_ff}, true);
      L.mlp.w2 = projection_param({spec.mlp.d_ff, dm}, rm);
      L.mlp.b2 = Tensor::zeros({dm}, true);
    } else {
      const std::size_t E = spec.mlp.n_experts, de = spec.mlp.d_expert;
      L.mlp.up = projection_param({E, dm, de}, rm);
      L.mlp.down = projection_param({E, de, dm}, rm);
      L.mlp.sel = projection_param({dm, E}, rm);
    }
    m.layers.push_back(std::move(L));
  }
  m.lnf_g = Tensor::full({dm}, 1.0, true);
  m.lnf_b = Tensor::zeros({dm}, true);
  Rng ro = root.split(1 + spec.n_layers);
  if (spec.head == HeadKind::lm) {
    if (!spec.tied) m.out_w = projection_param({dm, spec.vocab}, ro);
    m.out_b = Tensor::zeros({spec.vocab}, true);
  } else {
    m.out_w = projection_param({dm, spec.n_classes}, ro);
    m.out_b = Tensor::zeros({spec.n_classes}, true);
  }
  return m;
}

// SwitchAll: SwitchHead attention with a sigma-MoE MLP.
inline Model switchall_build(const ModelSpec& spec, std::uint64_t seed) {
  if (spec.mlp.kind != MlpKind::sigma_moe || spec.attention.variant != attention::Variant::switchhead) {
    throw ConfigError("switchall_build: needs a sigma_moe MLP and switchhead attention");
  }
  return build(spec, seed);
}

struct ModelForwardOptions {
  bool training = false;  // enables dropout
  Rng* rng = nullptr;     // dropout stream
  bool record_trace = false;
  bool force_unit_gates = false;
};

struct ModelOutput {
  Tensor logits;  // lm: [rows x vocab]; classify: [batch x n_classes]
  std::vector<attention::AttentionTrace> traces;  // per layer
  std::vector<attention::KVCache> caches;         // per layer
  std::vector<moe::ExpertSelection> mlp_selections;
};

inline Tensor mlp_forward(const MlpParams& p, const MlpSpec& spec, const Tensor& x, bool force_unit,
                          moe::ExpertSelection* sel_out) {
  if (spec.kind == MlpKind::dense) {
    Tensor h = relu(add_row(matmul(x, p.w1), p.b1));
    return add_row(matmul(h, p.w2), p.b2);
  }
  const moe::SelectionConfig sc{spec.n_experts, spec.k_active, moe::Activation::sigmoid, x.dim(1)};
  return moe::sigma_moe_mlp(x, p.up, p.down, p.sel, sc, nullptr, force_unit, sel_out);
}

// Runs the model on `tokens` (layout.rows() ids). `caches` holds one XL
// cache per layer from the previous chunk, or is empty.
inline ModelOutput forward(const Model& m, std::span<const std::size_t> tokens,
                           const attention::SeqLayout& layout,
                           const std::vector<attention::KVCache>& caches = {},
                           const ModelForwardOptions& opts = {}) {
  const auto& spec = m.spec;
  if (tokens.size() != layout.rows()) throw DimensionError("model forward: token count vs layout");
  for (std::size_t t : tokens)
    if (t >= spec.vocab) throw ContractError("model forward: token id " + std::to_string(t) + " out of vocab");
  if (!caches.empty() && caches.size() != m.layers.size()) throw ContractError("model forward: one cache per layer");
  if (opts.training && spec.dropout > 0.0 && !opts.rng) throw ContractError("model forward: dropout needs an rng");

  ModelOutput out;
  Tensor x = embedding(m.embed, tokens);
  attention::ForwardOptions aopts;
  aopts.record_trace = opts.record_trace;
  aopts.force_unit_gates = opts.force_unit_gates;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& L = m.layers[l];
    const attention::KVCache* cache = caches.empty() ? nullptr : &caches[l];
    auto a = attention::forward(layer_norm(x, L.ln1_g, L.ln1_b), L.attn, spec.attention, layout, cache,
                                nullptr, aopts);
    x = add(x, a.y);
    moe::ExpertSelection sel;
    Tensor h = mlp_forward(L.mlp, spec.mlp, layer_norm(x, L.ln2_g, L.ln2_b), opts.force_unit_gates,
                           opts.record_trace ? &sel : nullptr);
    if (opts.training && spec.dropout > 0.0) h = dropout(h, spec.dropout, *opts.rng);
    x = add(x, h);
    if (opts.record_trace) {
      out.traces.push_back(std::move(a.trace));
      if (spec.mlp.kind == MlpKind::sigma_moe) out.mlp_selections.push_back(std::move(sel));
    }
    out.caches.push_back(std::move(a.cache));
  }
  x = layer_norm(x, m.lnf_g, m.lnf_b);
  if (spec.head == HeadKind::classify) {
    std::vector<std::size_t> starts(layout.batch), counts(layout.batch);
    for (std::size_t b = 0; b < layout.batch; ++b) {
      starts[b] = b * layout.len;
      counts[b] = layout.valid_len(b);
    }
    x = mean_row_groups(x, starts, counts);
    out.logits = add_row(matmul(x, m.out_w), m.out_b);
  } else if (spec.tied) {
    out.logits = add_row(matmul_nt(x, m.embed), m.out_b);
  } else {
    out.logits = add_row(matmul(x, m.out_w), m.out_b);
  }
  return out;
}

}  // namespace switchhead::model
