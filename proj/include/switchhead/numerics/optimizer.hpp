#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "switchhead/errors.hpp"
#include "switchhead/numerics/tensor.hpp"

namespace switchhead {

struct AdamConfig {
  double base_lr = 0.00025;
  std::size_t warmup_steps = 0;  // 0 disables warmup
  double clip_norm = 0.25;       // kappa; <= 0 disables clipping
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Global L2 norm over every present gradient.
inline double global_grad_norm(const std::vector<Tensor>& params) {
  double s = 0.0;
  for (const auto& p : params)
    for (double g : p.grad()) s += g * g;
  return std::sqrt(s);
}

// Rescales gradients in place so their global norm is at most max_norm.
// Gradients are untouched when already within the bound. Returns the norm
// measured before clipping.
inline double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.mutable_grad()) g *= s;
    }
  }
  return norm;
}

// Adam with bias correction, global-norm clipping and linear warmup.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    if (cfg_.base_lr < 0.0) throw ConfigError("adam: negative learning rate");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  std::size_t step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

  // Learning rate used by the given (1-based) step.
  double lr_at(std::size_t step) const {
    if (cfg_.warmup_steps == 0) return cfg_.base_lr;
    return cfg_.base_lr *
           std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg_.warmup_steps));
  }

  double grad_norm() const { return global_grad_norm(params_); }

  struct StepInfo {
    double grad_norm = 0.0;  // before clipping
    double lr = 0.0;
  };

  // Clips, updates, clears gradients. Parameters that received no gradient
  // this step are left untouched (their moments included).
  StepInfo step() {
    bool any = false;
    for (const auto& p : params_) any = any || p.has_grad();
    if (!any) throw ContractError("adam_step: no parameter has a gradient; run backward first");

    StepInfo info;
    info.grad_norm = global_grad_norm(params_);
    if (!std::isfinite(info.grad_norm)) throw DivergenceError("adam_step: non-finite gradient norm");
    clip_grad_norm(params_, cfg_.clip_norm);

    ++step_;
    info.lr = lr_at(step_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor& p = params_[k];
      if (!p.has_grad()) continue;
      auto g = p.mutable_grad();
      auto w = p.mutable_values();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= info.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
      p.clear_grad();
    }
    return info;
  }

  void zero_grad() {
    for (auto& p : params_) p.clear_grad();
  }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
};

}  // namespace switchhead
