#pragma once

#include <cstdint>

#include "switchhead/attention/layer.hpp"
#include "switchhead/costmodel/cost.hpp"
#include "switchhead/numerics/rng.hpp"

namespace switchhead::cost {

// Regroups counter terms into a report; score matrices are counted in
// T-row blocks.
inline CostReport from_counter(const OpCounter& counter, std::uint64_t T) {
  CostReport r;
  for (const auto& [name, t] : counter.terms()) r.add(name, t.macs, t.mem_floats);
  r.score_matrices = T ? counter.score_rows() / T : 0;
  return r;
}

// Counts one forward pass of a single layer on a single sequence.
inline CostReport measure(const attention::AttentionParams& p, const attention::AttentionConfig& cfg,
                          const Tensor& x, const attention::KVCache* cache = nullptr) {
  if (x.rank() != 2 || x.dim(0) == 0) throw ContractError("measure: input must hold T >= 1 tokens");
  NoGradGuard ng;
  OpCounter counter;
  attention::forward(x, p, cfg, attention::SeqLayout::single(x.dim(0)), cache, &counter);
  return from_counter(counter, x.dim(0));
}

// Random weights, input and a full XL cache of (C - 1) T rows.
inline CostReport measure(const attention::AttentionConfig& cfg, std::size_t T, std::uint64_t seed = 0) {
  if (T == 0) throw ContractError("measure: zero-length input (T >= 1 required)");
  Rng rng(seed);
  Rng wrng = rng.split(1), drng = rng.split(2);
  const auto p = attention::init_params(cfg, wrng);
  auto random = [&](std::size_t r, std::size_t c) {
    std::vector<double> v(r * c);
    for (double& e : v) e = drng.uniform(-1.0, 1.0);
    return Tensor::adopt({r, c}, std::move(v));
  };
  const Tensor x = random(T, cfg.d_model);
  attention::KVCache cache;
  if (cfg.position == attention::Position::xl_relative && cfg.context_mult > 1) {
    cache.rows_per_seq = (cfg.context_mult - 1) * T;
    const std::size_t n = cfg.variant == attention::Variant::moa ? 1 : cfg.n_heads;
    for (std::size_t h = 0; h < n; ++h) {
      cache.keys.push_back(random(cache.rows_per_seq, cfg.d_head));
      cache.values.push_back(random(cache.rows_per_seq, cfg.d_head));
    }
  }
  return measure(p, cfg, x, cache.empty() ? nullptr : &cache);
}

}  // namespace switchhead::cost
