#pragma once

#include <cstdint>
#include <cstdio>
#include <map>
#include <string>

#include "switchhead/attention/config.hpp"
#include "switchhead/errors.hpp"
#include "switchhead/numerics/op_counter.hpp"

namespace switchhead::cost {

using attention::ExpertFlags;
using attention::Position;
using attention::Variant;

// Dimensions of one attention layer on one sequence of T tokens.
struct CostInputs {
  Variant variant = Variant::dense;
  Position position = Position::xl_relative;
  std::uint64_t H = 1;  // computed attention matrices (MoA: active head-experts)
  std::uint64_t T = 1;
  std::uint64_t d_head = 1;
  std::uint64_t d_model = 1;
  std::uint64_t C = 1;
  std::uint64_t k_active = 1;
  std::uint64_t E = 1;
  ExpertFlags experts{true, false, false, true};
  bool shared_pos = false;

  static CostInputs from_config(const attention::AttentionConfig& cfg, std::uint64_t T) {
    CostInputs in;
    in.variant = cfg.variant;
    in.position = cfg.position;
    in.H = cfg.n_heads;
    in.T = T;
    in.d_head = cfg.d_head;
    in.d_model = cfg.d_model;
    in.C = cfg.context_mult;
    in.k_active = cfg.k_active;
    in.E = cfg.n_experts;
    in.experts = cfg.experts;
    in.shared_pos = cfg.shared_pos || cfg.variant == Variant::moa;
    return in;
  }

  void validate() const {
    if (H == 0 || T == 0 || d_head == 0 || d_model == 0 || C == 0 || k_active == 0 || E == 0) {
      throw ConfigError("cost inputs: H, T, d_head, d_model, C, K and E must be positive");
    }
    const std::uint64_t pool = variant == Variant::head_gated ? H : E;
    if (k_active > pool) throw ConfigError("cost inputs: K exceeds the number of selectable experts");
  }
};

// Terms inside the published totals.
inline constexpr const char* kFormulaTerms[] = {"projections", "attention-scores", "readout",
                                              "position-encoding", "expert-mixing"};

inline bool is_formula_term(const std::string& name) {
  for (const char* t : kFormulaTerms)
    if (name == t) return true;
  return false;
}

// MACs and stored floats of one layer on one sequence. `terms` holds the
// published-formula breakdown; `extras` the itemized work the formulas
// ignore (gate logits, relative position scores, MoA output weighting).
struct CostReport {
  std::uint64_t macs = 0;
  std::uint64_t mem_floats = 0;
  std::map<std::string, CostTerm> terms;
  std::map<std::string, CostTerm> extras;
  std::uint64_t score_matrices = 0;  // T x CT score blocks computed

  void add(const std::string& term, std::uint64_t m, std::uint64_t mem) {
    if (!is_formula_term(term) && m == 0 && mem == 0) return;
    auto& dst = is_formula_term(term) ? terms[term] : extras[term];
    dst.macs += m;
    dst.mem_floats += mem;
    if (is_formula_term(term)) {
      macs += m;
      mem_floats += mem;
    }
  }

  std::uint64_t extra_macs() const {
    std::uint64_t s = 0;
    for (const auto& [n, t] : extras) s += t.macs;
    return s;
  }
};

// One decimal with M (10^6) or G (10^9) suffix.
inline std::string human(std::uint64_t n) {
  char buf[32];
  const double v = static_cast<double>(n);
  if (v >= 1e9) {
    std::snprintf(buf, sizeof buf, "%.1fG", v / 1e9);
  } else {
    std::snprintf(buf, sizeof buf, "%.1fM", v / 1e6);
  }
  return buf;
}

namespace detail {

inline void add_position(CostReport& r, const CostInputs& in, std::uint64_t copies,
                         std::uint64_t query_heads) {
  if (in.position != Position::xl_relative) return;
  const std::uint64_t rel = 2 * in.C * in.T;  // relative offsets
  r.add("position-encoding", copies * rel * in.d_head * in.d_model, copies * rel * in.d_head);
  r.add("position-scores", query_heads * in.T * rel * in.d_head, 0);
}

inline void add_attention(CostReport& r, const CostInputs& in, std::uint64_t heads) {
  const std::uint64_t src = in.C * in.T;
  r.add("attention-scores", heads * in.T * src * in.d_head, heads * 2 * in.T * src);
  r.add("readout", heads * in.T * src * in.d_head, 0);
  r.score_matrices += heads;
}

}  // namespace detail

// Dense Transformer-XL attention, position projection per head:
// macs = H(4T dh dm + 2CT^2 dh + 2CT dh dm), mem = H(4T dh + 2CT^2 + 2CT dh).
inline CostReport cost_xl(const CostInputs& in) {
  in.validate();
  CostReport r;
  r.add("projections", in.H * 4 * in.T * in.d_head * in.d_model, in.H * 4 * in.T * in.d_head);
  detail::add_attention(r, in, in.H);
  detail::add_position(r, in, in.H, in.H);
  return r;
}

// SwitchHead. A plain role costs T dh dm; an expert role T K dh dm plus
// T K dh gate products. With the default V and O experts this is
// H(2T dh dm + 2TK dh (dm + 1) + 2CT^2 dh + 2CT dh dm). `shared_pos`
// counts the position projection once instead of per head.
inline CostReport cost_switchhead(const CostInputs& in, bool shared_pos) {
  in.validate();
  CostReport r;
  const ExpertFlags f = in.experts;
  for (bool expert : {f.q, f.k, f.v, f.o}) {
    if (expert) {
      r.add("projections", in.H * in.T * in.k_active * in.d_head * in.d_model, 0);
      r.add("expert-mixing", in.H * in.T * in.k_active * in.d_head, 0);
    } else {
      r.add("projections", in.H * in.T * in.d_head * in.d_model, 0);
    }
  }
  r.add("projections", 0, in.H * 4 * in.T * in.d_head);
  const std::uint64_t gate_sets = (f.source_side() ? 1 : 0) + (f.destination_side() ? 1 : 0);
  r.add("selection", in.H * gate_sets * in.T * in.d_model * in.E, 0);
  detail::add_attention(r, in, in.H);
  detail::add_position(r, in, shared_pos ? 1 : in.H, in.H);
  return r;
}

// Mixture of attention heads with H active head-experts, shared K and V:
// macs = (2H+2)T dh dm + 2H CT^2 dh + 2CT dh dm, mem = (2H+2)T dh + 2H CT^2 + 2CT dh.
inline CostReport cost_moa(const CostInputs& in) {
  in.validate();
  CostReport r;
  r.add("projections", (2 * in.H + 2) * in.T * in.d_head * in.d_model,
        (2 * in.H + 2) * in.T * in.d_head);
  r.add("selection", in.T * in.d_model * in.E, 0);
  r.add("gating", in.H * in.T * in.d_head, 0);
  detail::add_attention(r, in, in.H);
  detail::add_position(r, in, 1, in.H);
  return r;
}

// Head gating: every head's source side and scores, K of H output projections.
inline CostReport cost_head_gated(const CostInputs& in) {
  in.validate();
  CostReport r;
  r.add("projections", in.H * 3 * in.T * in.d_head * in.d_model + in.k_active * in.T * in.d_head * in.d_model,
        in.H * 4 * in.T * in.d_head);
  r.add("expert-mixing", in.k_active * in.T * in.d_model, 0);
  r.add("selection", in.T * in.d_model * in.H, 0);
  detail::add_attention(r, in, in.H);
  detail::add_position(r, in, in.H, in.H);
  return r;
}

// Closed form for the variant in `in`, using its own shared_pos setting.
inline CostReport closed_form(const CostInputs& in) {
  switch (in.variant) {
    case Variant::dense:
      if (in.shared_pos) {
        CostInputs one = in;
        one.experts = {};
        return cost_switchhead(one, true);
      }
      return cost_xl(in);
    case Variant::head_gated: return cost_head_gated(in);
    case Variant::switchhead: return cost_switchhead(in, in.shared_pos);
    case Variant::moa: return cost_moa(in);
  }
  throw ContractError("cost: unknown variant");
}

}  // namespace switchhead::cost
