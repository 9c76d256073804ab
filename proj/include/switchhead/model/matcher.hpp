#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "switchhead/errors.hpp"
#include "switchhead/model/param_count.hpp"
#include "switchhead/model/spec.hpp"

namespace switchhead::model {

// How far the MLP width is raised once d_head is fixed: stop at the first
// width whose slack is inside the band, or fill up to the largest width
// still at or below the target.
enum class DffRule { first_within_band, fill };

inline const char* to_string(DffRule r) { return r == DffRule::fill ? "fill" : "first_within_band"; }

struct MatchOptions {
  DffRule rule = DffRule::first_within_band;
  std::uint64_t band = 100000;
};

struct MatchStep {
  std::string stage;  // "d_head" or "d_ff"
  std::size_t d_head = 0, width = 0;
  std::uint64_t params = 0;
};

struct MatchResult {
  ModelSpec spec;
  std::uint64_t param_count = 0;
  std::uint64_t target = 0;
  std::uint64_t slack = 0;
  bool within_band = true;
  std::string note;
  std::vector<MatchStep> trace;
};

namespace detail {

inline std::size_t& mlp_width(ModelSpec& s) {
  return s.mlp.kind == MlpKind::dense ? s.mlp.d_ff : s.mlp.d_expert;
}

inline std::size_t mlp_width(const ModelSpec& s) {
  return s.mlp.kind == MlpKind::dense ? s.mlp.d_ff : s.mlp.d_expert;
}

}  // namespace detail

// d_head: largest multiple of 4 keeping the count at or below target (with the
// template's MLP width); then the MLP width rises in steps of 1. A sigma-MoE
// width step (2 * E * d_model per layer) may exceed the band; that case is
// reported through `within_band` rather than rejected.
inline MatchResult match_params(std::uint64_t target, const ModelSpec& tmpl, const MatchOptions& opt = {}) {
  ModelSpec s = tmpl;
  MatchResult r;
  r.target = target;
  auto count = [&](std::size_t dh) {
    s.attention.d_head = dh;
    return count_params(s);
  };
  std::size_t dh = 4;
  std::uint64_t n = count(dh);
  r.trace.push_back({"d_head", dh, detail::mlp_width(s), n});
  if (n > target) {
    throw MatchError("match_params: infeasible, d_head=4 already needs " + std::to_string(n) +
                     " parameters > target " + std::to_string(target));
  }
  while (true) {
    const std::uint64_t next = count(dh + 4);
    r.trace.push_back({"d_head", dh + 4, detail::mlp_width(s), next});
    if (next > target) break;
    dh += 4;
    n = next;
  }
  s.attention.d_head = dh;

  std::size_t& w = detail::mlp_width(s);
  auto within = [&](std::uint64_t c) { return target - c <= opt.band; };
  while (opt.rule == DffRule::fill || !within(n)) {
    ++w;
    const std::uint64_t next = count_params(s);
    if (next > target) {
      --w;
      break;
    }
    n = next;
  }
  r.trace.push_back({"d_ff", dh, w, n});
  r.spec = s;
  r.param_count = n;
  r.slack = target - n;
  r.within_band = r.slack <= opt.band;
  if (!r.within_band) {
    if (s.mlp.kind == MlpKind::dense) {
      throw MatchError("match_params: no d_ff brings the slack within " + std::to_string(opt.band) +
                       " (best slack " + std::to_string(r.slack) + ")");
    }
    r.note = "sigma-MoE width step exceeds the band; count stays " + std::to_string(r.slack) +
             " below target";
  }
  return r;
}

inline std::string describe(const MatchResult& r) {
  std::ostringstream os;
  os << "target " << r.target << "\n"
     << "params " << r.param_count << "\n"
     << "slack " << r.slack << (r.within_band ? "" : " (outside band)") << "\n"
     << "d_head " << r.spec.attention.d_head << "\n"
     << (r.spec.mlp.kind == MlpKind::dense ? "d_ff " : "d_expert ") << detail::mlp_width(r.spec)
     << "\n";
  if (!r.note.empty()) os << "note " << r.note << "\n";
  return os.str();
}

// Re-runs the match under both position-projection layouts and both width
// rules, against a published (d_head, width) pair.
inline std::string calibration_report(std::uint64_t target, const ModelSpec& tmpl, std::size_t ref_d_head,
                                      std::size_t ref_width) {
  std::ostringstream os;
  os << "shared_pos,rule,d_head,width,params,slack,matches_reference\n";
  for (bool shared : {true, false}) {
    for (DffRule rule : {DffRule::first_within_band, DffRule::fill}) {
      ModelSpec t = tmpl;
      t.attention.shared_pos = shared;
      MatchOptions o;
      o.rule = rule;
      try {
        const auto m = match_params(target, t, o);
        const std::size_t w = detail::mlp_width(m.spec);
        const bool hit = m.spec.attention.d_head == ref_d_head && w == ref_width;
        os << (shared ? "true" : "false") << ',' << to_string(rule) << ',' << m.spec.attention.d_head << ','
           << w << ',' << m.param_count << ',' << m.slack << ',' << (hit ? "yes" : "no") << '\n';
      } catch (const MatchError&) {
        os << (shared ? "true" : "false") << ',' << to_string(rule) << ",-,-,-,-,infeasible\n";
      }
    }
  }
  return os.str();
}

}  // namespace switchhead::model
