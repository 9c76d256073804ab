#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "switchhead/attention/config.hpp"
#include "switchhead/numerics/rng.hpp"
#include "switchhead/numerics/tensor.hpp"

namespace switchhead {

// Uniform in [-bound, bound], drawn in row-major order.
inline Tensor uniform_param(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::adopt(std::move(shape), std::move(v), true);
}

// Initialization for a [.. x fan_in x fan_out] projection: U(-1/sqrt(fan_in), +1/sqrt(fan_in)).
inline Tensor projection_param(Shape shape, Rng& rng) {
  const std::size_t fan_in = shape[shape.size() - 2];
  return uniform_param(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

}  // namespace switchhead

namespace switchhead::attention {

// Weights of one attention layer. A role without experts holds a 2-D matrix,
// a role with experts a 3-D bank [E x d_in x d_out]. For MoA, q/o hold one
// bank each and k/v one shared matrix each.
struct AttentionParams {
  std::vector<Tensor> q, k, v, o;
  std::vector<Tensor> sel_src, sel_dst;  // switchhead, per head [d_model x E]
  Tensor head_gate;                      // head_gated [d_model x H]
  Tensor router;                         // moa [d_model x E]
  std::vector<Tensor> pos;               // xl: per head, or one shared [d_model x d_head]
  std::vector<Tensor> u, w;              // xl content / position biases [d_head]

  NamedTensors named() const {
    NamedTensors out;
    auto add = [&](const std::string& base, const std::vector<Tensor>& ts) {
      for (std::size_t i = 0; i < ts.size(); ++i) out.emplace_back(base + "." + std::to_string(i), ts[i]);
    };
    add("q", q);
    add("k", k);
    add("v", v);
    add("o", o);
    add("sel_src", sel_src);
    add("sel_dst", sel_dst);
    if (head_gate.defined()) out.emplace_back("head_gate", head_gate);
    if (router.defined()) out.emplace_back("router", router);
    add("pos", pos);
    add("u", u);
    add("w", w);
    return out;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (auto& [n, t] : named()) out.push_back(t);
    return out;
  }
};

inline bool uses_shared_pos(const AttentionConfig& cfg) {
  return cfg.shared_pos || cfg.variant == Variant::moa;
}

inline AttentionParams init_params(const AttentionConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t dm = cfg.d_model, dh = cfg.d_head, H = cfg.n_heads, E = cfg.n_experts;
  AttentionParams p;
  auto proj = [&](bool expert, std::size_t din, std::size_t dout) {
    return expert ? projection_param({E, din, dout}, rng) : projection_param({din, dout}, rng);
  };
  if (cfg.variant == Variant::moa) {
    p.q.push_back(projection_param({E, dm, dh}, rng));
    p.k.push_back(projection_param({dm, dh}, rng));
    p.v.push_back(projection_param({dm, dh}, rng));
    p.o.push_back(projection_param({E, dh, dm}, rng));
    p.router = projection_param({dm, E}, rng);
  } else {
    const ExpertFlags f = cfg.variant == Variant::switchhead ? cfg.experts : ExpertFlags{};
    for (std::size_t h = 0; h < H; ++h) {
      p.q.push_back(proj(f.q, dm, dh));
      p.k.push_back(proj(f.k, dm, dh));
      p.v.push_back(proj(f.v, dm, dh));
      p.o.push_back(proj(f.o, dh, dm));
      if (f.source_side()) p.sel_src.push_back(projection_param({dm, E}, rng));
      if (f.destination_side()) p.sel_dst.push_back(projection_param({dm, E}, rng));
    }
    if (cfg.variant == Variant::head_gated) p.head_gate = projection_param({dm, H}, rng);
  }
  if (cfg.position == Position::xl_relative) {
    const std::size_t n_pos = uses_shared_pos(cfg) ? 1 : H;
    for (std::size_t i = 0; i < n_pos; ++i) p.pos.push_back(projection_param({dm, dh}, rng));
    const std::size_t n_bias = cfg.variant == Variant::moa ? 1 : H;
    for (std::size_t i = 0; i < n_bias; ++i) {
      p.u.push_back(Tensor::zeros({dh}, true));
      p.w.push_back(Tensor::zeros({dh}, true));
    }
  }
  return p;
}

}  // namespace switchhead::attention
