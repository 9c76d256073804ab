#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "switchhead/errors.hpp"
#include "switchhead/numerics/op_counter.hpp"
#include "switchhead/numerics/ops.hpp"
#include "switchhead/numerics/topk.hpp"

namespace switchhead::moe {

enum class Activation { sigmoid, softmax };

inline const char* to_string(Activation a) { return a == Activation::sigmoid ? "sigmoid" : "softmax"; }

struct SelectionConfig {
  std::size_t n_experts = 1;
  std::size_t k_active = 1;
  Activation activation = Activation::sigmoid;
  std::size_t d_model = 0;

  void validate() const {
    if (n_experts < 1) throw ContractError("selection: n_experts must be >= 1");
    if (k_active < 1 || k_active > n_experts) {
      throw ContractError("selection: k_active=" + std::to_string(k_active) + " must be in [1, " +
                          std::to_string(n_experts) + "]");
    }
  }
};

// Per-token chosen experts and their gate values.
struct ExpertSelection {
  std::size_t tokens = 0;
  std::size_t n_experts = 0;
  std::size_t k_active = 0;
  std::vector<std::size_t> indices;  // tokens * k_active, ascending within a token
  Tensor weights;                    // [tokens * k_active], differentiable
  Tensor scores;                     // [tokens x n_experts] activated scores (all experts)

  std::span<const std::size_t> experts_of(std::size_t t) const {
    return std::span<const std::size_t>(indices).subspan(t * k_active, k_active);
  }
  double weight(std::size_t t, std::size_t slot) const { return weights[t * k_active + slot]; }

  // Dense [tokens x n_experts] gate matrix, zero for unselected experts.
  std::vector<double> dense_weights() const {
    std::vector<double> out(tokens * n_experts, 0.0);
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t s = 0; s < k_active; ++s)
        out[t * n_experts + indices[t * k_active + s]] = weights[t * k_active + s];
    return out;
  }
};

// Tokens routed to each expert, with the matching position in `weights`.
struct Routing {
  std::vector<std::vector<std::size_t>> tokens;
  std::vector<std::vector<std::size_t>> weight_pos;
};

inline Routing route(const ExpertSelection& sel) {
  Routing r;
  r.tokens.resize(sel.n_experts);
  r.weight_pos.resize(sel.n_experts);
  for (std::size_t t = 0; t < sel.tokens; ++t) {
    for (std::size_t s = 0; s < sel.k_active; ++s) {
      const std::size_t e = sel.indices[t * sel.k_active + s];
      r.tokens[e].push_back(t);
      r.weight_pos[e].push_back(t * sel.k_active + s);
    }
  }
  return r;
}

// logits = x W_sel (no bias); top-k on the logits; gates are the activated
// values of the chosen experts. Sigmoid gates are independent per expert
// (non-competitive); softmax gates are the full-row softmax restricted to
// the chosen experts. `force_unit` replaces the gates by constant 1.
inline ExpertSelection select(const Tensor& x, const Tensor& w_sel, const SelectionConfig& cfg,
                              OpCounter* counter = nullptr, bool force_unit = false) {
  cfg.validate();
  if (w_sel.rank() != 2 || w_sel.dim(1) != cfg.n_experts) {
    throw DimensionError("select: selection matrix " + shape_str(w_sel.shape()) + " vs " +
                         std::to_string(cfg.n_experts) + " experts");
  }
  Tensor logits;
  {
    auto scope = count_as(counter, "selection");
    logits = matmul(x, w_sel, counter);
  }
  ExpertSelection sel;
  sel.tokens = x.dim(0);
  sel.n_experts = cfg.n_experts;
  sel.k_active = cfg.k_active;
  sel.scores = cfg.activation == Activation::sigmoid ? sigmoid(logits) : softmax_last(logits);
  sel.indices.reserve(sel.tokens * cfg.k_active);
  std::vector<std::size_t> flat;
  flat.reserve(sel.tokens * cfg.k_active);
  for (std::size_t t = 0; t < sel.tokens; ++t) {
    auto row = logits.values().subspan(t * cfg.n_experts, cfg.n_experts);
    for (std::size_t e : argtopk(row, cfg.k_active)) {
      sel.indices.push_back(e);
      flat.push_back(t * cfg.n_experts + e);
    }
  }
  sel.weights = force_unit ? Tensor::full({flat.size()}, 1.0) : gather_elements(sel.scores, flat);
  return sel;
}

}  // namespace switchhead::moe
