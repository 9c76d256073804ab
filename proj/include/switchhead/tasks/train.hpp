#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "switchhead/model/transformer.hpp"
#include "switchhead/numerics/optimizer.hpp"
#include "switchhead/tasks/char_corpus.hpp"
#include "switchhead/tasks/listops.hpp"
#include "switchhead/tasks/metrics.hpp"

namespace switchhead::tasks {

struct TrainConfig {
  std::size_t steps = 100;
  std::size_t batch = 64;  // examples (classification) or parallel streams (LM)
  AdamConfig adam;
  std::size_t log_every = 50;
  std::uint64_t seed = 0;  // data order and dropout
};

struct EvalResult {
  double accuracy = 0.0;  // classification only
  double mean_nll = 0.0;
  double perplexity = 0.0;
  double bpc = 0.0;
  std::size_t count = 0;
};

// Called after every optimizer step with (step, loss); lets callers time or stop.
using StepHook = std::function<void(std::size_t, double)>;

namespace detail {

struct Batch {
  std::vector<std::size_t> tokens;
  attention::SeqLayout layout;
  std::vector<std::size_t> labels;
};

// Right-pads to the longest example in the batch.
inline Batch make_batch(const std::vector<ListOpsExample>& data, const std::vector<std::size_t>& idx) {
  Batch b;
  std::size_t len = 0;
  for (std::size_t i : idx) len = std::max(len, data[i].length());
  b.layout.batch = idx.size();
  b.layout.len = len;
  for (std::size_t i : idx) {
    const auto& ex = data[i];
    b.tokens.insert(b.tokens.end(), ex.tokens.begin(), ex.tokens.end());
    b.tokens.insert(b.tokens.end(), len - ex.length(), listops_vocab::kPad);
    b.layout.valid.push_back(ex.length());
    b.labels.push_back(ex.label);
  }
  return b;
}

[[noreturn]] inline void diverged(std::size_t step, double loss, const std::string& task) {
  std::ostringstream os;
  os << "training diverged on " << task << " at step " << step << ": loss = " << loss
     << " (lower the learning rate or the clip norm)";
  throw DivergenceError(os.str());
}

}  // namespace detail

inline void check_task(const model::Model& m, std::size_t vocab, std::size_t classes) {
  if (m.spec.vocab < vocab) {
    throw ConfigError("model vocab " + std::to_string(m.spec.vocab) + " is smaller than the task's " +
                      std::to_string(vocab));
  }
  if (classes && (m.spec.head != model::HeadKind::classify || m.spec.n_classes != classes)) {
    throw ConfigError("task needs a classification head with " + std::to_string(classes) + " classes");
  }
  if (!classes && m.spec.head != model::HeadKind::lm) throw ConfigError("task needs an lm head");
}

inline EvalResult evaluate_listops(const model::Model& m, const std::vector<ListOpsExample>& data,
                                   std::size_t batch = 64) {
  if (data.empty()) throw ContractError("evaluate: empty split");
  check_task(m, listops_vocab::kSize, listops_vocab::kClasses);
  NoGradGuard ng;
  std::vector<std::size_t> pred, labels;
  double nll = 0.0;
  for (std::size_t s = 0; s < data.size(); s += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(data.size(), s + batch); ++i) idx.push_back(i);
    auto b = detail::make_batch(data, idx);
    auto out = model::forward(m, b.tokens, b.layout);
    std::vector<double> row_nll;
    cross_entropy(out.logits, b.labels, &row_nll);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto row = out.logits.values().subspan(r * listops_vocab::kClasses, listops_vocab::kClasses);
      pred.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
      labels.push_back(b.labels[r]);
      nll += row_nll[r];
    }
  }
  EvalResult r;
  r.count = data.size();
  r.accuracy = accuracy(pred, labels);
  r.mean_nll = nll / static_cast<double>(data.size());
  r.perplexity = perplexity(r.mean_nll);
  r.bpc = bits_per_char(r.mean_nll);
  return r;
}

inline MetricsLog train_listops(model::Model& m, const std::vector<ListOpsExample>& data, const TrainConfig& cfg,
                                const StepHook& hook = {}) {
  if (data.empty()) throw ContractError("train: empty dataset");
  check_task(m, listops_vocab::kSize, listops_vocab::kClasses);
  Adam opt(m.parameters(), cfg.adam);
  Rng rng(cfg.seed);
  Rng order = rng.split(0), drop = rng.split(1);
  MetricsLog log;
  std::vector<std::size_t> perm(data.size());
  std::size_t cursor = perm.size();
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::vector<std::size_t> idx;
    while (idx.size() < std::min(cfg.batch, data.size())) {
      if (cursor == perm.size()) {
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[order.below(i)]);
        cursor = 0;
      }
      idx.push_back(perm[cursor++]);
    }
    auto b = detail::make_batch(data, idx);
    model::ModelForwardOptions fo;
    fo.training = true;
    fo.rng = &drop;
    auto out = model::forward(m, b.tokens, b.layout, {}, fo);
    Tensor loss = cross_entropy(out.logits, b.labels);
    const double lv = loss.item();
    if (!std::isfinite(lv)) detail::diverged(step, lv, "listops");
    backward(loss);
    const auto info = opt.step();
    if (step % cfg.log_every == 0 || step == cfg.steps) {
      log.add(step, "loss", lv);
      log.add(step, "grad_norm", info.grad_norm);
      log.add(step, "lr", info.lr);
    }
    if (hook) hook(step, lv);
  }
  return log;
}

// Streams the split through the model in T-token chunks with the XL cache.
inline EvalResult evaluate_lm(const model::Model& m, const std::vector<std::size_t>& ids, std::size_t streams = 1) {
  if (ids.size() < 2) throw ContractError("evaluate: empty split");
  NoGradGuard ng;
  ChunkStreamer s(ids, streams, m.spec.T);
  std::vector<attention::KVCache> caches;
  std::vector<std::size_t> tokens, targets;
  double nll = 0.0;
  std::size_t n = 0;
  const attention::SeqLayout layout{streams, m.spec.T, {}};
  for (std::size_t c = 0; c < s.chunks_per_epoch(); ++c) {
    s.next(tokens, targets);
    auto out = model::forward(m, tokens, layout, caches);
    caches = std::move(out.caches);
    std::vector<double> row;
    cross_entropy(out.logits, targets, &row);
    for (double v : row) nll += v;
    n += row.size();
  }
  EvalResult r;
  r.count = n;
  r.mean_nll = nll / static_cast<double>(n);
  r.perplexity = perplexity(r.mean_nll);
  r.bpc = bits_per_char(r.mean_nll);
  return r;
}

inline MetricsLog train_lm(model::Model& m, const std::vector<std::size_t>& ids, const TrainConfig& cfg,
                           const StepHook& hook = {}) {
  if (m.spec.head != model::HeadKind::lm) throw ConfigError("task needs an lm head");
  Adam opt(m.parameters(), cfg.adam);
  Rng drop = Rng(cfg.seed).split(1);
  ChunkStreamer s(ids, cfg.batch, m.spec.T);
  std::vector<attention::KVCache> caches;
  std::vector<std::size_t> tokens, targets;
  const attention::SeqLayout layout{cfg.batch, m.spec.T, {}};
  MetricsLog log;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    if (s.next(tokens, targets)) caches.clear();
    model::ModelForwardOptions fo;
    fo.training = true;
    fo.rng = &drop;
    auto out = model::forward(m, tokens, layout, caches, fo);
    caches = std::move(out.caches);
    Tensor loss = cross_entropy(out.logits, targets);
    const double lv = loss.item();
    if (!std::isfinite(lv)) detail::diverged(step, lv, "lm");
    backward(loss);
    const auto info = opt.step();
    if (step % cfg.log_every == 0 || step == cfg.steps) {
      log.add(step, "loss", lv);
      log.add(step, "bpc", bits_per_char(lv));
      log.add(step, "grad_norm", info.grad_norm);
      log.add(step, "lr", info.lr);
    }
    if (hook) hook(step, lv);
  }
  return log;
}

}  // namespace switchhead::tasks
