#pragma once

#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "switchhead/attention/config.hpp"
#include "switchhead/errors.hpp"

namespace switchhead::model {

enum class MlpKind { dense, sigma_moe };
enum class HeadKind { lm, classify };

inline const char* to_string(MlpKind k) { return k == MlpKind::dense ? "dense" : "sigma_moe"; }
inline const char* to_string(HeadKind k) { return k == HeadKind::lm ? "lm" : "classify"; }

struct MlpSpec {
  MlpKind kind = MlpKind::dense;
  std::size_t d_ff = 0;       // dense hidden width
  std::size_t n_experts = 1;  // sigma_moe
  std::size_t k_active = 1;
  std::size_t d_expert = 0;

  static MlpSpec dense(std::size_t d_ff) { return {MlpKind::dense, d_ff, 1, 1, 0}; }
  static MlpSpec sigma_moe(std::size_t experts, std::size_t k, std::size_t d_expert) {
    return {MlpKind::sigma_moe, 0, experts, k, d_expert};
  }
  // Total hidden width across experts.
  std::size_t width() const { return kind == MlpKind::dense ? d_ff : n_experts * d_expert; }
};

// Whole-model hyperparameters. attention.d_model always equals d_model.
struct ModelSpec {
  std::size_t n_layers = 0;
  std::size_t d_model = 0;
  attention::AttentionConfig attention;
  MlpSpec mlp;
  std::size_t vocab = 0;
  bool tied = false;
  double dropout = 0.0;  // applied to MLP outputs in training
  std::size_t T = 0;     // chunk length
  HeadKind head = HeadKind::lm;
  std::size_t n_classes = 0;

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (d_model == 0) v.emplace_back("d_model must be positive");
    if (vocab == 0) v.emplace_back("vocab must be positive");
    if (T == 0) v.emplace_back("T must be positive");
    if (dropout < 0.0 || dropout >= 1.0) v.emplace_back("dropout must be in [0, 1)");
    if (attention.d_model != d_model) v.emplace_back("attention.d_model must equal d_model");
    if (head == HeadKind::classify) {
      if (n_classes == 0) v.emplace_back("classification head needs n_classes > 0");
      if (tied) v.emplace_back("tied embeddings only apply to the lm head");
    }
    if (mlp.kind == MlpKind::dense && mlp.d_ff == 0) v.emplace_back("mlp.d_ff must be positive");
    if (mlp.kind == MlpKind::sigma_moe) {
      if (mlp.d_expert == 0) v.emplace_back("mlp.d_expert must be positive");
      if (mlp.k_active < 1 || mlp.k_active > mlp.n_experts) v.emplace_back("mlp requires 1 <= k_active <= n_experts");
    }
    if (n_layers > 0) {
      for (auto& s : attention.violations()) v.push_back("attention: " + s);
    }
    return v;
  }

  void validate() const {
    auto v = violations();
    if (v.empty()) return;
    std::ostringstream os;
    os << "invalid model spec:";
    for (const auto& s : v) os << "\n  - " << s;
    throw ConfigError(os.str());
  }
};

}  // namespace switchhead::model
