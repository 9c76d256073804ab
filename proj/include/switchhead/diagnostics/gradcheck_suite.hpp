#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "switchhead/attention/layer.hpp"
#include "switchhead/model/transformer.hpp"
#include "switchhead/numerics/gradcheck.hpp"

namespace switchhead::diagnostics {

struct GradSuiteEntry {
  std::string name;
  GradCheckResult result;
};

inline Tensor random_tensor(Shape shape, Rng& rng, bool grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::adopt(std::move(shape), std::move(v), grad);
}

// Small attention configurations covering every variant, T = 4, d_model = 8.
inline std::vector<std::pair<std::string, attention::AttentionConfig>> gradcheck_configs() {
  using namespace attention;
  std::vector<std::pair<std::string, AttentionConfig>> out;
  out.emplace_back("dense_xl", AttentionConfig::dense(8, 2, 4));
  auto rope = AttentionConfig::dense(8, 2, 4);
  rope.position = Position::rope;
  rope.context_mult = 1;
  out.emplace_back("dense_rope", rope);
  auto hg = AttentionConfig::dense(8, 3, 4);
  hg.variant = Variant::head_gated;
  hg.k_active = 2;
  out.emplace_back("head_gated", hg);
  out.emplace_back("switchhead_vo", AttentionConfig::switchhead(8, 2, 4, 3, 2));
  auto all = AttentionConfig::switchhead(8, 2, 4, 3, 2);
  all.experts = {true, true, true, true};
  out.emplace_back("switchhead_vkqo", all);
  auto sh_rope = AttentionConfig::switchhead(8, 2, 4, 3, 2);
  sh_rope.position = Position::rope;
  sh_rope.context_mult = 1;
  out.emplace_back("switchhead_rope", sh_rope);
  AttentionConfig moa;
  moa.variant = Variant::moa;
  moa.d_model = 8;
  moa.d_head = 4;
  moa.n_experts = 4;
  moa.k_active = 2;
  moa.n_heads = 2;
  out.emplace_back("moa_sigmoid", moa);
  moa.selection = moe::Activation::softmax;
  out.emplace_back("moa_softmax", moa);
  return out;
}

// loss = sum(y * R) for a fixed random R; checks input, weights and XL cache-free path
// plus a cached chunk when C > 1.
inline GradCheckResult check_attention(const attention::AttentionConfig& cfg, std::uint64_t seed,
                                       std::size_t T = 4) {
  Rng rng(seed);
  Rng wr = rng.split(0), dr = rng.split(1);
  auto p = attention::init_params(cfg, wr);
  // Non-zero biases so their gradients are exercised away from the origin.
  for (auto* group : {&p.u, &p.w})
    for (auto& t : *group)
      for (double& v : t.mutable_values()) v = dr.uniform(-0.5, 0.5);
  Tensor x = random_tensor({T, cfg.d_model}, dr, true);
  Tensor r = random_tensor({T, cfg.d_model}, dr);
  attention::KVCache cache;
  if (cfg.position == attention::Position::xl_relative && cfg.context_mult > 1) {
    cache.rows_per_seq = T;
    const std::size_t n = cfg.variant == attention::Variant::moa ? 1 : cfg.n_heads;
    for (std::size_t h = 0; h < n; ++h) {
      cache.keys.push_back(random_tensor({T, cfg.d_head}, dr));
      cache.values.push_back(random_tensor({T, cfg.d_head}, dr));
    }
  }
  auto inputs = p.named();
  inputs.emplace_back("x", x);
  const auto layout = attention::SeqLayout::single(T);
  auto loss = [&] {
    auto out = attention::forward(x, p, cfg, layout, cache.empty() ? nullptr : &cache);
    return sum(mul(out.y, r));
  };
  return check_gradients(loss, inputs);
}

// Two-layer SwitchAll language model, cross-entropy loss.
inline GradCheckResult check_switchall(std::uint64_t seed, std::size_t T = 4) {
  model::ModelSpec s;
  s.n_layers = 2;
  s.d_model = 8;
  s.vocab = 7;
  s.T = T;
  s.attention = attention::AttentionConfig::switchhead(8, 2, 4, 3, 2);
  s.mlp = model::MlpSpec::sigma_moe(4, 2, 6);
  auto m = model::switchall_build(s, seed);
  Rng dr = Rng(seed).split(99);
  std::vector<std::size_t> tokens(T), targets(T);
  for (auto& t : tokens) t = dr.below(s.vocab);
  for (auto& t : targets) t = dr.below(s.vocab);
  auto loss = [&] {
    auto out = model::forward(m, tokens, attention::SeqLayout::single(T));
    return cross_entropy(out.logits, targets);
  };
  return check_gradients(loss, m.named());
}

inline std::vector<GradSuiteEntry> run_gradcheck_suite(std::uint64_t seed) {
  std::vector<GradSuiteEntry> out;
  for (const auto& [name, cfg] : gradcheck_configs()) out.push_back({name, check_attention(cfg, seed)});
  out.push_back({"switchall", check_switchall(seed)});
  return out;
}

}  // namespace switchhead::diagnostics
