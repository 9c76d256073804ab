#pragma once

#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "switchhead/errors.hpp"
#include "switchhead/moe/selection.hpp"

namespace switchhead::attention {

enum class Variant { dense, head_gated, switchhead, moa };
enum class Position { xl_relative, rope };
// Divisor of the attention logits: sqrt(d_model) as written for standard MHA,
// or the conventional sqrt(d_head).
enum class ScoreScale { d_model, d_head };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::dense: return "dense";
    case Variant::head_gated: return "head_gated";
    case Variant::switchhead: return "switchhead";
    case Variant::moa: return "moa";
  }
  return "?";
}
inline const char* to_string(Position p) { return p == Position::xl_relative ? "xl" : "rope"; }
inline const char* to_string(ScoreScale s) { return s == ScoreScale::d_model ? "d_model" : "d_head"; }

// Which projections of a SwitchHead head are expert mixtures.
struct ExpertFlags {
  bool v = false;
  bool k = false;
  bool q = false;
  bool o = false;

  bool any() const { return v || k || q || o; }
  bool source_side() const { return v || k; }
  bool destination_side() const { return q || o; }
  friend bool operator==(const ExpertFlags&, const ExpertFlags&) = default;

  // Bit order V, K, Q, O (bit 0 = V); used to enumerate all 16 combinations.
  static ExpertFlags from_bits(unsigned bits) {
    return {(bits & 1u) != 0, (bits & 2u) != 0, (bits & 4u) != 0, (bits & 8u) != 0};
  }
  std::string str() const {
    std::string s;
    s += v ? 'V' : '-';
    s += k ? 'K' : '-';
    s += q ? 'Q' : '-';
    s += o ? 'O' : '-';
    return s;
  }
};

// Full description of one attention layer. `n_heads` counts computed
// attention matrices; for MoA that is the number of active head-experts
// (k_active) out of E.
struct AttentionConfig {
  Variant variant = Variant::dense;
  Position position = Position::xl_relative;
  std::size_t d_model = 0;
  std::size_t n_heads = 1;
  std::size_t d_head = 0;
  std::size_t n_experts = 1;
  std::size_t k_active = 1;
  ExpertFlags experts{};
  std::size_t context_mult = 2;  // C: C - 1 cached past chunks
  bool causal = true;
  ScoreScale scale = ScoreScale::d_model;
  moe::Activation selection = moe::Activation::sigmoid;
  // One position-encoding projection shared by all heads instead of one per head.
  bool shared_pos = false;

  static AttentionConfig dense(std::size_t d_model, std::size_t heads, std::size_t d_head) {
    AttentionConfig c;
    c.d_model = d_model;
    c.n_heads = heads;
    c.d_head = d_head;
    return c;
  }

  // SwitchHead with the best-performing V + O expert layout.
  static AttentionConfig switchhead(std::size_t d_model, std::size_t heads, std::size_t d_head,
                                    std::size_t experts, std::size_t k) {
    AttentionConfig c;
    c.variant = Variant::switchhead;
    c.d_model = d_model;
    c.n_heads = heads;
    c.d_head = d_head;
    c.n_experts = experts;
    c.k_active = k;
    c.experts = {true, false, false, true};
    c.shared_pos = true;
    return c;
  }

  double score_scale() const {
    const double d = static_cast<double>(scale == ScoreScale::d_model ? d_model : d_head);
    return 1.0 / std::sqrt(d);
  }

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (d_model == 0) v.emplace_back("d_model must be positive");
    if (n_heads == 0) v.emplace_back("n_heads must be positive");
    if (d_head == 0) v.emplace_back("d_head must be positive");
    if (context_mult == 0) v.emplace_back("context multiplier C must be positive");
    if (n_experts == 0) v.emplace_back("E must be positive");
    switch (variant) {
      case Variant::dense:
        if (n_experts != 1 || k_active != 1) v.emplace_back("dense attention requires E=1 and K=1");
        if (experts.any()) v.emplace_back("dense attention cannot have expert projections");
        break;
      case Variant::head_gated:
        if (n_experts != 1) v.emplace_back("head gating selects heads; E must be 1");
        if (k_active < 1 || k_active > n_heads) v.emplace_back("head gating requires 1 <= K <= n_heads");
        if (experts.any()) v.emplace_back("head gating cannot have expert projections");
        break;
      case Variant::switchhead:
        if (k_active < 1 || k_active > n_experts) v.emplace_back("switchhead requires 1 <= K <= E");
        if (!experts.any() && n_experts > 1) {
          v.emplace_back("switchhead with E>1 and no expert projection is degenerate; use dense");
        }
        break;
      case Variant::moa:
        if (n_heads != k_active) v.emplace_back("moa: n_heads counts active head-experts and must equal K");
        if (k_active < 1 || k_active > n_experts) v.emplace_back("moa requires 1 <= K <= E");
        if (experts.any()) v.emplace_back("moa has fixed expert roles (Q and O); flags must be unset");
        break;
    }
    if (variant != Variant::moa && selection != moe::Activation::sigmoid) {
      v.emplace_back("softmax selection is only available for moa");
    }
    if (position == Position::rope) {
      if (context_mult != 1) v.emplace_back("rope attention has no XL cache; C must be 1");
      if (d_head % 2 != 0) v.emplace_back("rope needs an even d_head (channel pairs)");
    }
    return v;
  }

  void validate() const {
    auto v = violations();
    if (v.empty()) return;
    std::ostringstream os;
    os << "invalid attention config:";
    for (const auto& s : v) os << "\n  - " << s;
    throw ConfigError(os.str());
  }
};

}  // namespace switchhead::attention
