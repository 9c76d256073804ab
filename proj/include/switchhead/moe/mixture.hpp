#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "switchhead/errors.hpp"
#include "switchhead/moe/selection.hpp"
#include "switchhead/numerics/ops.hpp"

namespace switchhead::moe {

// Where the gate multiplies a selected expert. Both are equal by linearity;
// gating the input is cheaper when the expert widens (d_in < d_out).
enum class GateAt { output, input };

inline void check_bank(const Tensor& bank, const ExpertSelection& sel, std::size_t d_in,
                       const char* op) {
  if (bank.rank() != 3) throw DimensionError(std::string(op) + ": bank must be [E x d_in x d_out]");
  if (bank.dim(1) != d_in) {
    throw DimensionError(std::string(op) + ": bank " + shape_str(bank.shape()) +
                         " vs input width " + std::to_string(d_in));
  }
  for (std::size_t e : sel.indices) {
    if (e >= bank.dim(0)) {
      throw ContractError(std::string(op) + ": expert index " + std::to_string(e) +
                          " out of range for " + std::to_string(bank.dim(0)) + " experts");
    }
  }
}

// y[t] = sum over selected e of w[t, e] * (x[t] bank[e]). Only selected
// experts are evaluated: each expert multiplies just the rows routed to it.
// Expert matmuls count under "projections", gate products under
// "expert-mixing".
inline Tensor mixture_project(const Tensor& x, const Tensor& bank, const ExpertSelection& sel,
                              OpCounter* counter = nullptr, GateAt gate = GateAt::output) {
  if (x.rank() != 2) throw DimensionError("mixture_project: x must be 2-D");
  if (sel.tokens != x.dim(0)) {
    throw DimensionError("mixture_project: selection made for " + std::to_string(sel.tokens) +
                         " tokens, input has " + std::to_string(x.dim(0)));
  }
  check_bank(bank, sel, x.dim(1), "mixture_project");
  const std::size_t d_out = bank.dim(2);
  const Routing r = route(sel);
  std::vector<Tensor> parts(bank.dim(0));
  for (std::size_t e = 0; e < bank.dim(0); ++e) {
    if (r.tokens[e].empty()) continue;
    Tensor xe = gather_rows(x, r.tokens[e]);
    Tensor we = gather_elements(sel.weights, r.weight_pos[e]);
    const Tensor w = expert_slice(bank, e);
    if (gate == GateAt::input) {
      auto s = count_as(counter, "expert-mixing");
      xe = scale_rows(xe, we, counter);
    }
    Tensor ye;
    {
      auto s = count_as(counter, "projections");
      ye = matmul(xe, w, counter);
    }
    if (gate == GateAt::output) {
      auto s = count_as(counter, "expert-mixing");
      ye = scale_rows(ye, we, counter);
    }
    parts[e] = ye;
  }
  return combine_rows(parts, r.tokens, x.dim(0), d_out);
}

// Non-competitive expert MLP: y[t] = sum_e w[t, e] * relu(x[t] up[e]) down[e].
inline Tensor sigma_moe_mlp(const Tensor& x, const Tensor& up, const Tensor& down,
                            const Tensor& w_sel, const SelectionConfig& cfg,
                            OpCounter* counter = nullptr, bool force_unit = false,
                            ExpertSelection* sel_out = nullptr) {
  if (up.rank() != 3 || down.rank() != 3 || up.dim(0) != down.dim(0) || up.dim(2) != down.dim(1) ||
      down.dim(2) != x.dim(1)) {
    throw DimensionError("sigma_moe_mlp: banks " + shape_str(up.shape()) + " / " +
                         shape_str(down.shape()) + " vs input " + shape_str(x.shape()));
  }
  ExpertSelection sel = select(x, w_sel, cfg, counter, force_unit);
  check_bank(up, sel, x.dim(1), "sigma_moe_mlp");
  const Routing r = route(sel);
  std::vector<Tensor> parts(up.dim(0));
  for (std::size_t e = 0; e < up.dim(0); ++e) {
    if (r.tokens[e].empty()) continue;
    Tensor xe = gather_rows(x, r.tokens[e]);
    Tensor h = relu(matmul(xe, expert_slice(up, e), counter));
    Tensor ye = matmul(h, expert_slice(down, e), counter);
    parts[e] = scale_rows(ye, gather_elements(sel.weights, r.weight_pos[e]), counter);
  }
  Tensor y = combine_rows(parts, r.tokens, x.dim(0), down.dim(2));
  if (sel_out) *sel_out = std::move(sel);
  return y;
}

}  // namespace switchhead::moe
