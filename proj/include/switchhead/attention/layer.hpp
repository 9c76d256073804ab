#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "switchhead/attention/config.hpp"
#include "switchhead/attention/params.hpp"
#include "switchhead/errors.hpp"
#include "switchhead/moe/mixture.hpp"
#include "switchhead/moe/selection.hpp"
#include "switchhead/numerics/op_counter.hpp"
#include "switchhead/numerics/ops.hpp"

namespace switchhead::attention {

// Rows of a layer input are `batch` sequences of `len` rows each. A sequence
// may be right-padded: keys at or past its valid length are never attended.
struct SeqLayout {
  std::size_t batch = 1;
  std::size_t len = 0;
  std::vector<std::size_t> valid;  // empty: every row valid

  static SeqLayout single(std::size_t len) { return {1, len, {}}; }
  std::size_t rows() const { return batch * len; }
  std::size_t valid_len(std::size_t b) const { return valid.empty() ? len : valid[b]; }
};

// Keys and values of the C - 1 previous chunks, per head (MoA: one shared
// entry), rows grouped by sequence. Never part of the gradient graph.
struct KVCache {
  std::size_t rows_per_seq = 0;
  std::vector<Tensor> keys, values;

  bool empty() const { return rows_per_seq == 0; }
};

struct AttentionMap {
  std::size_t batch = 0;
  std::size_t head = 0;  // MoA: selection slot
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

struct SelectionRecord {
  std::size_t batch = 0;
  std::size_t head = 0;
  std::size_t tokens = 0, n_experts = 0;
  std::vector<double> weights;  // [tokens x n_experts], zero where unselected
  std::vector<std::size_t> indices;
};

struct AttentionTrace {
  std::vector<AttentionMap> maps;
  std::vector<SelectionRecord> source, destination;
};

struct ForwardOptions {
  bool record_trace = false;
  bool force_unit_gates = false;  // every selected gate is exactly 1
  bool concat_readout = false;    // dense: W_O applied to concatenated heads
};

struct AttentionOutput {
  Tensor y;
  AttentionTrace trace;
  KVCache cache;
};

namespace detail {

// Sinusoidal encodings for relative offsets len, len-1, ..., -len+1 (2*len rows).
inline Tensor relative_encodings(std::size_t len, std::size_t d_model) {
  std::vector<double> v(2 * len * d_model);
  for (std::size_t i = 0; i < 2 * len; ++i) {
    const double off = static_cast<double>(len) - static_cast<double>(i);
    for (std::size_t c = 0; c < d_model; c += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(c) / static_cast<double>(d_model));
      v[i * d_model + c] = std::sin(off * freq);
      if (c + 1 < d_model) v[i * d_model + c + 1] = std::cos(off * freq);
    }
  }
  return Tensor::adopt({2 * len, d_model}, std::move(v));
}

struct HeadInputs {
  Tensor q;                        // [nq x dh]
  std::vector<std::size_t> q_pos;  // positions within the key window
  Tensor k, v;                     // [L x dh]
  const Tensor* rel = nullptr;     // xl: [2L x dh]
  const Tensor* u = nullptr;
  const Tensor* w = nullptr;
  std::size_t valid_keys = 0;
};

// One head on one sequence: scores, masked softmax, readout. Returns A V.
inline Tensor attend_head(const HeadInputs& in, const AttentionConfig& cfg, OpCounter* counter,
                          std::vector<double>* probs_out) {
  const std::size_t nq = in.q.dim(0), L = in.k.dim(0);
  Tensor scores;
  if (cfg.position == Position::xl_relative) {
    Tensor content;
    {
      auto s = count_as(counter, "attention-scores");
      content = matmul_nt(add_row(in.q, *in.u), in.k, counter);
    }
    Tensor pos_all;
    {
      auto s = count_as(counter, "position-scores");
      pos_all = matmul_nt(add_row(in.q, *in.w), *in.rel, counter);
    }
    std::vector<std::size_t> idx(nq * L);
    for (std::size_t i = 0; i < nq; ++i)
      for (std::size_t j = 0; j < L; ++j) idx[i * L + j] = L + j - in.q_pos[i];
    scores = add(content, gather_cols_per_row(pos_all, idx, L));
  } else {
    std::vector<std::size_t> kpos(L);
    for (std::size_t j = 0; j < L; ++j) kpos[j] = j;
    auto s = count_as(counter, "attention-scores");
    scores = matmul_nt(rotary(in.q, in.q_pos), rotary(in.k, kpos), counter);
  }
  scores = scale(scores, cfg.score_scale());

  std::vector<std::uint8_t> allowed(nq * L);
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t j = 0; j < L; ++j)
      allowed[i * L + j] = (j < in.valid_keys && (!cfg.causal || j <= in.q_pos[i])) ? 1 : 0;
  Tensor probs = masked_softmax_last(scores, allowed);
  if (counter) {
    auto s = count_as(counter, "attention-scores");
    counter->add_storage(2 * nq * L);  // logits and probabilities
    counter->add_score_rows(nq);
  }
  if (probs_out) probs_out->assign(probs.values().begin(), probs.values().end());

  Tensor av;
  {
    auto s = count_as(counter, "readout");
    av = matmul(probs, in.v, counter);
  }
  if (counter) {
    auto s = count_as(counter, "projections");
    counter->add_storage(nq * in.v.dim(1));
  }
  return av;
}

// Rows [b*len, (b+1)*len) of a batched tensor (no copy for a single sequence).
inline Tensor seq_rows(const Tensor& t, const SeqLayout& layout, std::size_t b) {
  if (layout.batch == 1) return t;
  return slice_rows(t, b * layout.len, layout.len);
}

inline Tensor with_cache(const Tensor& fresh, const KVCache* cache, const std::vector<Tensor>* part,
                         std::size_t head, std::size_t b) {
  if (!cache || cache->empty()) return fresh;
  const Tensor& c = (*part)[head];
  return concat_rows({slice_rows(c, b * cache->rows_per_seq, cache->rows_per_seq), fresh});
}

// Keeps the last (C - 1) * len rows per sequence of [cache ; fresh], detached.
inline Tensor roll_cache(const Tensor& fresh, const KVCache* cache, const std::vector<Tensor>* part,
                         std::size_t head, const SeqLayout& layout, std::size_t keep_rows) {
  const std::size_t dh = fresh.dim(1);
  const std::size_t old_rows = (cache && !cache->empty()) ? cache->rows_per_seq : 0;
  std::vector<double> out;
  out.reserve(layout.batch * keep_rows * dh);
  for (std::size_t b = 0; b < layout.batch; ++b) {
    const std::size_t total = old_rows + layout.len;
    for (std::size_t r = total - keep_rows; r < total; ++r) {
      const double* src = r < old_rows
                              ? (*part)[head].data() + (b * old_rows + r) * dh
                              : fresh.data() + (b * layout.len + (r - old_rows)) * dh;
      out.insert(out.end(), src, src + dh);
    }
  }
  return Tensor::adopt({layout.batch * keep_rows, dh}, std::move(out));
}

inline Tensor project(const Tensor& x, const Tensor& weight, OpCounter* counter) {
  auto s = count_as(counter, "projections");
  return matmul(x, weight, counter);
}

inline void store_rows(OpCounter* counter, const Tensor& t) {
  if (!counter) return;
  auto s = count_as(counter, "projections");
  counter->add_storage(t.numel());
}

inline SelectionRecord record_selection(const moe::ExpertSelection& sel, std::size_t head,
                                        const SeqLayout& layout, std::size_t b) {
  SelectionRecord r;
  r.batch = b;
  r.head = head;
  r.tokens = layout.len;
  r.n_experts = sel.n_experts;
  const auto dense = sel.dense_weights();
  r.weights.assign(dense.begin() + static_cast<std::ptrdiff_t>(b * layout.len * sel.n_experts),
                   dense.begin() + static_cast<std::ptrdiff_t>((b + 1) * layout.len * sel.n_experts));
  r.indices.assign(sel.indices.begin() + static_cast<std::ptrdiff_t>(b * layout.len * sel.k_active),
                   sel.indices.begin() + static_cast<std::ptrdiff_t>((b + 1) * layout.len * sel.k_active));
  return r;
}

struct Shared {
  const AttentionConfig& cfg;
  const SeqLayout& layout;
  const KVCache* cache;
  OpCounter* counter;
  const ForwardOptions& opts;
  std::size_t window = 0;  // L: keys visible to the current chunk
  std::size_t cached = 0;  // Lc
  std::vector<Tensor> rel;  // projected relative encodings, per head or shared
};

inline Shared prepare(const Tensor& x, const AttentionParams& p, const AttentionConfig& cfg,
                      const SeqLayout& layout, const KVCache* cache, OpCounter* counter,
                      const ForwardOptions& opts) {
  cfg.validate();
  if (x.rank() != 2 || x.dim(1) != cfg.d_model) {
    throw DimensionError("attention: input " + shape_str(x.shape()) + " vs d_model " +
                         std::to_string(cfg.d_model));
  }
  if (layout.len == 0 || layout.batch == 0) throw ContractError("attention: empty input (T >= 1 required)");
  if (layout.rows() != x.dim(0)) {
    throw DimensionError("attention: layout " + std::to_string(layout.batch) + "x" +
                         std::to_string(layout.len) + " vs input rows " + std::to_string(x.dim(0)));
  }
  if (!layout.valid.empty()) {
    if (layout.valid.size() != layout.batch) throw ContractError("attention: one valid length per sequence");
    for (std::size_t v : layout.valid)
      if (v == 0 || v > layout.len) throw ContractError("attention: valid length out of range");
  }
  Shared sh{cfg, layout, cache, counter, opts, 0, 0, {}};
  sh.cached = (cache && !cache->empty()) ? cache->rows_per_seq : 0;
  if (sh.cached) {
    if (cfg.position != Position::xl_relative) throw ContractError("attention: cache requires xl_relative");
    const std::size_t n_kv = cfg.variant == Variant::moa ? 1 : cfg.n_heads;
    if (cache->keys.size() != n_kv || cache->values.size() != n_kv) {
      throw ContractError("attention: cache holds " + std::to_string(cache->keys.size()) +
                          " heads, expected " + std::to_string(n_kv));
    }
    if (sh.cached > (cfg.context_mult - 1) * layout.len || sh.cached % layout.len != 0) {
      throw ContractError("attention: cache of " + std::to_string(sh.cached) +
                          " rows does not fit C-1=" + std::to_string(cfg.context_mult - 1) +
                          " chunks of " + std::to_string(layout.len));
    }
    for (std::size_t h = 0; h < n_kv; ++h) {
      const Shape want{layout.batch * sh.cached, cfg.d_head};
      if (cache->keys[h].shape() != want || cache->values[h].shape() != want) {
        throw ContractError("attention: cache shape " + shape_str(cache->keys[h].shape()) +
                            " expected " + shape_str(want));
      }
    }
  }
  sh.window = sh.cached + layout.len;
  if (cfg.position == Position::xl_relative) {
    const Tensor enc = relative_encodings(sh.window, cfg.d_model);
    auto s = count_as(counter, "position-encoding", true);
    for (const auto& wp : p.pos) sh.rel.push_back(matmul(enc, wp, counter));
  }
  return sh;
}

inline std::vector<std::size_t> chunk_positions(const Shared& sh) {
  std::vector<std::size_t> pos(sh.layout.len);
  for (std::size_t t = 0; t < pos.size(); ++t) pos[t] = sh.cached + t;
  return pos;
}

// Runs one head over every sequence; returns A V for all rows [N x dh].
inline Tensor run_head(const Shared& sh, const AttentionParams& p, std::size_t head,
                       const Tensor& q, const Tensor& k, const Tensor& v, AttentionTrace* trace) {
  const auto& cfg = sh.cfg;
  const std::size_t bias_idx = cfg.variant == Variant::moa ? 0 : head;
  std::vector<Tensor> outs;
  for (std::size_t b = 0; b < sh.layout.batch; ++b) {
    HeadInputs in;
    in.q = seq_rows(q, sh.layout, b);
    in.q_pos = chunk_positions(sh);
    in.k = with_cache(seq_rows(k, sh.layout, b), sh.cache, sh.cache ? &sh.cache->keys : nullptr, head, b);
    in.v = with_cache(seq_rows(v, sh.layout, b), sh.cache, sh.cache ? &sh.cache->values : nullptr, head, b);
    if (cfg.position == Position::xl_relative) {
      in.rel = &sh.rel[sh.rel.size() == 1 ? 0 : head];
      in.u = &p.u[bias_idx];
      in.w = &p.w[bias_idx];
    }
    in.valid_keys = sh.cached + sh.layout.valid_len(b);
    std::vector<double> probs;
    outs.push_back(attend_head(in, cfg, sh.counter, trace ? &probs : nullptr));
    if (trace) trace->maps.push_back({b, head, sh.layout.len, sh.window, std::move(probs)});
  }
  return outs.size() == 1 ? outs[0] : concat_rows(outs);
}

inline KVCache next_cache(const Shared& sh, const std::vector<Tensor>& keys,
                          const std::vector<Tensor>& values) {
  KVCache out;
  const std::size_t keep_chunks = std::min(sh.cfg.context_mult - 1, sh.cached / sh.layout.len + 1);
  if (sh.cfg.position != Position::xl_relative || keep_chunks == 0) return out;
  out.rows_per_seq = keep_chunks * sh.layout.len;
  for (std::size_t h = 0; h < keys.size(); ++h) {
    out.keys.push_back(roll_cache(keys[h], sh.cache, sh.cache ? &sh.cache->keys : nullptr, h,
                                  sh.layout, out.rows_per_seq));
    out.values.push_back(roll_cache(values[h], sh.cache, sh.cache ? &sh.cache->values : nullptr, h,
                                    sh.layout, out.rows_per_seq));
  }
  return out;
}

inline Tensor sum_all(const std::vector<Tensor>& ts) {
  Tensor acc = ts[0];
  for (std::size_t i = 1; i < ts.size(); ++i) acc = add(acc, ts[i]);
  return acc;
}

// Shared body of dense and head-gated attention: per-head K, Q, V and A V.
inline std::vector<Tensor> dense_heads(const Tensor& x, const AttentionParams& p, const Shared& sh,
                                       AttentionTrace* trace, std::vector<Tensor>& keys,
                                       std::vector<Tensor>& values) {
  std::vector<Tensor> av;
  for (std::size_t h = 0; h < sh.cfg.n_heads; ++h) {
    Tensor q, k, v;
    {
      auto s = count_as(sh.counter, "projections", true);
      q = matmul(x, p.q[h], sh.counter);
      k = matmul(x, p.k[h], sh.counter);
      v = matmul(x, p.v[h], sh.counter);
    }
    av.push_back(run_head(sh, p, h, q, k, v, trace));
    keys.push_back(k);
    values.push_back(v);
  }
  return av;
}

}  // namespace detail

// Standard multi-head attention (xl_relative or rope positions). The output
// is the per-head sum of W_O^h A^h V^h, or the concatenated-heads product
// when opts.concat_readout is set.
inline AttentionOutput dense_attention(const Tensor& x, const AttentionParams& p,
                                       const AttentionConfig& cfg, const SeqLayout& layout,
                                       const KVCache* cache = nullptr, OpCounter* counter = nullptr,
                                       const ForwardOptions& opts = {}) {
  if (cfg.variant != Variant::dense) throw ContractError("dense_attention: variant must be dense");
  auto sh = detail::prepare(x, p, cfg, layout, cache, counter, opts);
  AttentionOutput out;
  AttentionTrace* trace = opts.record_trace ? &out.trace : nullptr;
  std::vector<Tensor> keys, values;
  auto av = detail::dense_heads(x, p, sh, trace, keys, values);
  if (opts.concat_readout) {
    auto s = count_as(counter, "projections");
    out.y = matmul(concat_cols(av), concat_rows(p.o), counter);
  } else {
    std::vector<Tensor> ys;
    for (std::size_t h = 0; h < cfg.n_heads; ++h) ys.push_back(detail::project(av[h], p.o[h], counter));
    out.y = detail::sum_all(ys);
  }
  out.cache = detail::next_cache(sh, keys, values);
  return out;
}

// Dense attention with Transformer-XL relative positions over a cache of
// C - 1 previous chunks.
inline AttentionOutput xl_relative_attention(const Tensor& x, const KVCache* cache,
                                             const AttentionParams& p, const AttentionConfig& cfg,
                                             const SeqLayout& layout, OpCounter* counter = nullptr,
                                             const ForwardOptions& opts = {}) {
  if (cfg.position != Position::xl_relative) throw ContractError("xl_relative_attention: position must be xl");
  return dense_attention(x, p, cfg, layout, cache, counter, opts);
}

inline AttentionOutput rope_attention(const Tensor& x, const AttentionParams& p,
                                      const AttentionConfig& cfg, const SeqLayout& layout,
                                      OpCounter* counter = nullptr, const ForwardOptions& opts = {}) {
  if (cfg.position != Position::rope) throw ContractError("rope_attention: position must be rope");
  return dense_attention(x, p, cfg, layout, nullptr, counter, opts);
}

// Output-side head selection: y[t] = sum over selected h of s[t,h] (W_O^h A^h V^h)[t].
// Every head's source side is still computed.
inline AttentionOutput head_gated_attention(const Tensor& x, const AttentionParams& p,
                                            const AttentionConfig& cfg, const SeqLayout& layout,
                                            const KVCache* cache = nullptr,
                                            OpCounter* counter = nullptr,
                                            const ForwardOptions& opts = {}) {
  if (cfg.variant != Variant::head_gated) throw ContractError("head_gated_attention: wrong variant");
  auto sh = detail::prepare(x, p, cfg, layout, cache, counter, opts);
  AttentionOutput out;
  AttentionTrace* trace = opts.record_trace ? &out.trace : nullptr;
  std::vector<Tensor> keys, values;
  auto av = detail::dense_heads(x, p, sh, trace, keys, values);
  const moe::SelectionConfig sc{cfg.n_heads, cfg.k_active, moe::Activation::sigmoid, cfg.d_model};
  const auto sel = moe::select(x, p.head_gate, sc, counter, opts.force_unit_gates);
  const auto routes = moe::route(sel);
  std::vector<Tensor> parts(cfg.n_heads);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    if (routes.tokens[h].empty()) continue;
    Tensor zh = detail::project(gather_rows(av[h], routes.tokens[h]), p.o[h], counter);
    auto s = count_as(counter, "expert-mixing");
    parts[h] = scale_rows(zh, gather_elements(sel.weights, routes.weight_pos[h]), counter);
  }
  out.y = combine_rows(parts, routes.tokens, x.dim(0), cfg.d_model);
  if (trace) {
    for (std::size_t b = 0; b < layout.batch; ++b)
      out.trace.destination.push_back(detail::record_selection(sel, 0, layout, b));
  }
  out.cache = detail::next_cache(sh, keys, values);
  return out;
}

// SwitchHead: H attention matrices; per head, source-side experts (V, K)
// and destination-side experts (Q, O) are chosen independently by sigmoid
// top-k gates. Roles without the expert flag use a single matrix.
inline AttentionOutput switchhead_attention(const Tensor& x, const AttentionParams& p,
                                            const AttentionConfig& cfg, const SeqLayout& layout,
                                            const KVCache* cache = nullptr,
                                            OpCounter* counter = nullptr,
                                            const ForwardOptions& opts = {}) {
  if (cfg.variant != Variant::switchhead) throw ContractError("switchhead_attention: wrong variant");
  if (cfg.k_active > cfg.n_experts) {
    throw ContractError("switchhead_attention: k_active=" + std::to_string(cfg.k_active) +
                        " exceeds E=" + std::to_string(cfg.n_experts));
  }
  auto sh = detail::prepare(x, p, cfg, layout, cache, counter, opts);
  const ExpertFlags f = cfg.experts;
  const moe::SelectionConfig sc{cfg.n_experts, cfg.k_active, moe::Activation::sigmoid, cfg.d_model};
  AttentionOutput out;
  AttentionTrace* trace = opts.record_trace ? &out.trace : nullptr;
  std::vector<Tensor> keys, values, ys;
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    std::optional<moe::ExpertSelection> src, dst;
    if (f.source_side()) src = moe::select(x, p.sel_src[h], sc, counter, opts.force_unit_gates);
    if (f.destination_side()) dst = moe::select(x, p.sel_dst[h], sc, counter, opts.force_unit_gates);
    auto role = [&](bool expert, const Tensor& w, const std::optional<moe::ExpertSelection>& sel) {
      if (!expert) {
        auto s = count_as(counter, "projections", true);
        return matmul(x, w, counter);
      }
      Tensor r = moe::mixture_project(x, w, *sel, counter);
      detail::store_rows(counter, r);
      return r;
    };
    Tensor q = role(f.q, p.q[h], dst);
    Tensor k = role(f.k, p.k[h], src);
    Tensor v = role(f.v, p.v[h], src);
    Tensor av = detail::run_head(sh, p, h, q, k, v, trace);
    // Output experts are gated on their d_head-wide input; equal by linearity
    // and costs T*K*d_head gate products.
    ys.push_back(f.o ? moe::mixture_project(av, p.o[h], *dst, counter, moe::GateAt::input)
                     : detail::project(av, p.o[h], counter));
    keys.push_back(k);
    values.push_back(v);
    if (trace) {
      for (std::size_t b = 0; b < layout.batch; ++b) {
        if (src) out.trace.source.push_back(detail::record_selection(*src, h, layout, b));
        if (dst) out.trace.destination.push_back(detail::record_selection(*dst, h, layout, b));
      }
    }
  }
  out.y = detail::sum_all(ys);
  out.cache = detail::next_cache(sh, keys, values);
  return out;
}

// Mixture of attention heads: one shared K and V; a router picks k_active of
// E head-experts per token, each with its own Q and O and its own attention
// rows. Computes k_active score rows per token.
inline AttentionOutput moa_attention(const Tensor& x, const AttentionParams& p,
                                     const AttentionConfig& cfg, const SeqLayout& layout,
                                     const KVCache* cache = nullptr, OpCounter* counter = nullptr,
                                     const ForwardOptions& opts = {}) {
  if (cfg.variant != Variant::moa) throw ContractError("moa_attention: wrong variant");
  auto sh = detail::prepare(x, p, cfg, layout, cache, counter, opts);
  const moe::SelectionConfig sc{cfg.n_experts, cfg.k_active, cfg.selection, cfg.d_model};
  const auto sel = moe::select(x, p.router, sc, counter, opts.force_unit_gates);
  const auto routes = moe::route(sel);
  Tensor k, v;
  {
    auto s = count_as(counter, "projections", true);
    k = matmul(x, p.k[0], counter);
    v = matmul(x, p.v[0], counter);
  }
  const std::size_t T = layout.len, L = sh.window;
  AttentionOutput out;
  // probs_rows[e][i]: attention row of the i-th token routed to expert e.
  std::vector<std::vector<std::vector<double>>> probs_rows(cfg.n_experts);
  std::vector<Tensor> parts(cfg.n_experts);
  for (std::size_t e = 0; e < cfg.n_experts; ++e) {
    const auto& toks = routes.tokens[e];
    if (toks.empty()) continue;
    Tensor qe;
    {
      auto s = count_as(counter, "projections", true);
      qe = matmul(gather_rows(x, toks), expert_slice(p.q[0], e), counter);
    }
    std::vector<Tensor> av_parts;
    std::vector<std::vector<std::size_t>> av_rows;
    for (std::size_t b = 0; b < layout.batch; ++b) {
      std::vector<std::size_t> local, q_pos;
      for (std::size_t i = 0; i < toks.size(); ++i) {
        if (toks[i] / T != b) continue;
        local.push_back(i);
        q_pos.push_back(sh.cached + toks[i] % T);
      }
      if (local.empty()) continue;
      detail::HeadInputs in;
      in.q = gather_rows(qe, local);
      in.q_pos = q_pos;
      in.k = detail::with_cache(detail::seq_rows(k, layout, b), cache, cache ? &cache->keys : nullptr, 0, b);
      in.v = detail::with_cache(detail::seq_rows(v, layout, b), cache, cache ? &cache->values : nullptr, 0, b);
      if (cfg.position == Position::xl_relative) {
        in.rel = &sh.rel[0];
        in.u = &p.u[0];
        in.w = &p.w[0];
      }
      in.valid_keys = sh.cached + layout.valid_len(b);
      std::vector<double> probs;
      av_parts.push_back(detail::attend_head(in, cfg, counter, opts.record_trace ? &probs : nullptr));
      av_rows.push_back(local);
      if (opts.record_trace) {
        probs_rows[e].resize(toks.size());
        for (std::size_t r = 0; r < local.size(); ++r)
          probs_rows[e][local[r]].assign(probs.begin() + static_cast<std::ptrdiff_t>(r * L),
                                         probs.begin() + static_cast<std::ptrdiff_t>((r + 1) * L));
      }
    }
    Tensor av = combine_rows(av_parts, av_rows, toks.size(), cfg.d_head);
    {
      auto s = count_as(counter, "gating");
      av = scale_rows(av, gather_elements(sel.weights, routes.weight_pos[e]), counter);
    }
    parts[e] = detail::project(av, expert_slice(p.o[0], e), counter);
  }
  out.y = combine_rows(parts, routes.tokens, x.dim(0), cfg.d_model);

  if (opts.record_trace) {
    // Slot s of token t holds the row of its s-th selected expert, so the
    // trace has exactly k_active maps per sequence.
    std::vector<std::size_t> cursor(cfg.n_experts, 0);
    std::vector<AttentionMap> maps;
    for (std::size_t b = 0; b < layout.batch; ++b)
      for (std::size_t s = 0; s < cfg.k_active; ++s)
        maps.push_back({b, s, T, L, std::vector<double>(T * L, 0.0)});
    for (std::size_t t = 0; t < x.dim(0); ++t) {
      const std::size_t b = t / T;
      for (std::size_t s = 0; s < cfg.k_active; ++s) {
        const std::size_t e = sel.indices[t * cfg.k_active + s];
        const auto& row = probs_rows[e][cursor[e]++];
        std::copy(row.begin(), row.end(), maps[b * cfg.k_active + s].values.begin() +
                                              static_cast<std::ptrdiff_t>((t % T) * L));
      }
    }
    out.trace.maps = std::move(maps);
    for (std::size_t b = 0; b < layout.batch; ++b)
      out.trace.destination.push_back(detail::record_selection(sel, 0, layout, b));
  }
  out.cache = detail::next_cache(sh, {k}, {v});
  return out;
}

// Dispatches on cfg.variant.
inline AttentionOutput forward(const Tensor& x, const AttentionParams& p, const AttentionConfig& cfg,
                               const SeqLayout& layout, const KVCache* cache = nullptr,
                               OpCounter* counter = nullptr, const ForwardOptions& opts = {}) {
  switch (cfg.variant) {
    case Variant::dense: return dense_attention(x, p, cfg, layout, cache, counter, opts);
    case Variant::head_gated: return head_gated_attention(x, p, cfg, layout, cache, counter, opts);
    case Variant::switchhead: return switchhead_attention(x, p, cfg, layout, cache, counter, opts);
    case Variant::moa: return moa_attention(x, p, cfg, layout, cache, counter, opts);
  }
  throw ContractError("attention: unknown variant");
}

}  // namespace switchhead::attention
