#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "switchhead/errors.hpp"
#include "switchhead/numerics/op_counter.hpp"
#include "switchhead/numerics/rng.hpp"
#include "switchhead/numerics/tensor.hpp"

namespace switchhead {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// out (m x n) += op(a) * op(b); a is stored (ar x ac), b is (br x bc).
inline void gemm_acc(double* out, const double* a, std::size_t ar, std::size_t ac, bool ta,
                     const double* b, std::size_t br, std::size_t bc, bool tb) {
  ConstMap A(a, static_cast<Eigen::Index>(ar), static_cast<Eigen::Index>(ac));
  ConstMap B(b, static_cast<Eigen::Index>(br), static_cast<Eigen::Index>(bc));
  const auto m = static_cast<Eigen::Index>(ta ? ac : ar);
  const auto n = static_cast<Eigen::Index>(tb ? br : bc);
  MutMap C(out, m, n);
  if (!ta && !tb) C.noalias() += A * B;
  else if (ta && !tb) C.noalias() += A.transpose() * B;
  else if (!ta && tb) C.noalias() += A * B.transpose();
  else C.noalias() += A.transpose() * B.transpose();
}

inline void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

}  // namespace detail

// a [m x k] @ b [k x n]. Counts m*n*k MACs; the m*n output counts as stored
// when the counter's active scope tracks storage.
inline Tensor matmul(const Tensor& a, const Tensor& b, OpCounter* counter = nullptr) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " @ " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  if (m && n && k) detail::gemm_acc(out.data(), a.data(), m, k, false, b.data(), k, n, false);
  if (counter) {
    counter->add_macs(static_cast<std::uint64_t>(m) * n * k);
    counter->add_output(static_cast<std::uint64_t>(m) * n);
  }
  auto* pa = a.node().get();
  auto* pb = b.node().get();
  return detail::make_result({m, n}, std::move(out), {a, b}, [pa, pb, m, k, n](detail::Node& o) {
    if (pa->requires_grad) {
      detail::gemm_acc(pa->ensure_grad().data(), o.grad.data(), m, n, false, pb->value.data(), k,
                       n, true);
    }
    if (pb->requires_grad) {
      detail::gemm_acc(pb->ensure_grad().data(), pa->value.data(), m, k, true, o.grad.data(), m,
                       n, false);
    }
  });
}

// a [m x k] @ b^T where b is [n x k].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b, OpCounter* counter = nullptr) {
  detail::require_2d(a, "matmul_nt");
  detail::require_2d(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree: " + shape_str(a.shape()) +
                         " @ " + shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(m * n, 0.0);
  if (m && n && k) detail::gemm_acc(out.data(), a.data(), m, k, false, b.data(), n, k, true);
  if (counter) {
    counter->add_macs(static_cast<std::uint64_t>(m) * n * k);
    counter->add_output(static_cast<std::uint64_t>(m) * n);
  }
  auto* pa = a.node().get();
  auto* pb = b.node().get();
  return detail::make_result({m, n}, std::move(out), {a, b}, [pa, pb, m, k, n](detail::Node& o) {
    if (pa->requires_grad) {
      detail::gemm_acc(pa->ensure_grad().data(), o.grad.data(), m, n, false, pb->value.data(), n,
                       k, false);
    }
    if (pb->requires_grad) {
      detail::gemm_acc(pb->ensure_grad().data(), o.grad.data(), m, n, true, pa->value.data(), m,
                       k, false);
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto* pa = a.node().get();
  auto* pb = b.node().get();
  return detail::make_result(a.shape(), std::move(out), {a, b}, [pa, pb](detail::Node& o) {
    detail::accumulate(pa, o.grad);
    detail::accumulate(pb, o.grad);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto* pa = a.node().get();
  auto* pb = b.node().get();
  return detail::make_result(a.shape(), std::move(out), {a, b}, [pa, pb](detail::Node& o) {
    detail::accumulate(pa, o.grad);
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto* pa = a.node().get();
  auto* pb = b.node().get();
  return detail::make_result(a.shape(), std::move(out), {a, b}, [pa, pb](detail::Node& o) {
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pa->value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  auto* pa = a.node().get();
  return detail::make_result(a.shape(), std::move(out), {a}, [pa, s](detail::Node& o) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * s;
  });
}

// x [r x c] + row broadcast of v [c].
inline Tensor add_row(const Tensor& x, const Tensor& v) {
  detail::require_2d(x, "add_row");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (v.numel() != c) {
    throw DimensionError("add_row: row vector " + shape_str(v.shape()) + " vs " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] + v[j];
  auto* px = x.node().get();
  auto* pv = v.node().get();
  return detail::make_result(x.shape(), std::move(out), {x, v}, [px, pv, r, c](detail::Node& o) {
    detail::accumulate(px, o.grad);
    if (pv->requires_grad) {
      auto& g = pv->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j];
    }
  });
}

// y[i, :] = w[i] * x[i, :]. Each product is one MAC attributed to the
// counter's active term (the gate-weighting cost of a mixture).
inline Tensor scale_rows(const Tensor& x, const Tensor& w, OpCounter* counter = nullptr) {
  detail::require_2d(x, "scale_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (w.numel() != r) {
    throw DimensionError("scale_rows: weights " + shape_str(w.shape()) + " vs rows of " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] * w[i];
  if (counter) counter->add_macs(static_cast<std::uint64_t>(r) * c);
  auto* px = x.node().get();
  auto* pw = w.node().get();
  return detail::make_result(x.shape(), std::move(out), {x, w}, [px, pw, r, c](detail::Node& o) {
    if (px->requires_grad) {
      auto& g = px->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[i * c + j] * pw->value[i];
    }
    if (pw->requires_grad) {
      auto& g = pw->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += o.grad[i * c + j] * px->value[i * c + j];
        g[i] += s;
      }
    }
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  auto* px = x.node().get();
  return detail::make_result({1}, {s}, {x}, [px](detail::Node& o) {
    auto& g = px->ensure_grad();
    for (double& gi : g) gi += o.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  auto* px = x.node().get();
  return detail::make_result(x.shape(), std::move(out), {x}, [px](detail::Node& o) {
    auto& g = px->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (px->value[i] > 0.0) g[i] += o.grad[i];
  });
}

inline double sigmoid_scalar(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(x[i]);
  auto* px = x.node().get();
  return detail::make_result(x.shape(), std::move(out), {x}, [px](detail::Node& o) {
    auto& g = px->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = o.value[i];
      g[i] += o.grad[i] * s * (1.0 - s);
    }
  });
}

namespace detail {

// Shared by the masked and unmasked variants. `allowed` may be empty
// (everything allowed) or hold one flag per element.
inline Tensor softmax_impl(const Tensor& x, std::span<const std::uint8_t> allowed,
                           const char* op) {
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw DimensionError(std::string(op) + ": empty last dimension in " + shape_str(x.shape()));
  }
  const std::size_t c = x.shape().back();
  const std::size_t r = x.numel() / c;
  if (!allowed.empty() && allowed.size() != x.numel()) {
    throw DimensionError(std::string(op) + ": mask size mismatch");
  }
  std::vector<double> out(x.numel(), 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (allowed.empty() || allowed[i * c + j]) mx = std::max(mx, row[j]);
    if (!std::isfinite(mx)) throw ContractError(std::string(op) + ": row with no allowed entry");
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (allowed.empty() || allowed[i * c + j]) {
        out[i * c + j] = std::exp(row[j] - mx);
        z += out[i * c + j];
      }
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  auto* px = x.node().get();
  return make_result(x.shape(), std::move(out), {x}, [px, r, c](Node& o) {
    auto& g = px->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = o.value.data() + i * c;
      const double* gy = o.grad.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += y[j] * (gy[j] - dot);
    }
  });
}

}  // namespace detail

// Softmax over the last dimension with max-subtraction.
inline Tensor softmax_last(const Tensor& x) { return detail::softmax_impl(x, {}, "softmax_last"); }

// Softmax over the last dimension where masked-out entries are exactly 0 and
// receive no gradient. Every row needs at least one allowed entry.
inline Tensor masked_softmax_last(const Tensor& x, std::span<const std::uint8_t> allowed) {
  return detail::softmax_impl(x, allowed, "masked_softmax_last");
}

// Row-wise layer normalization with gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  detail::require_2d(x, "layer_norm");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (gain.numel() != c || bias.numel() != c) {
    throw DimensionError("layer_norm: gain/bias size vs " + shape_str(x.shape()));
  }
  std::vector<double> xhat(x.numel()), inv(r), out(x.numel());
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    inv[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (row[j] - mu) * inv[i];
      out[i * c + j] = xhat[i * c + j] * gain[j] + bias[j];
    }
  }
  auto* px = x.node().get();
  auto* pg = gain.node().get();
  auto* pb = bias.node().get();
  return detail::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [px, pg, pb, r, c, xhat = std::move(xhat), inv = std::move(inv)](detail::Node& o) {
        if (pg->requires_grad) {
          auto& g = pg->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j] * xhat[i * c + j];
        }
        if (pb->requires_grad) {
          auto& g = pb->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j];
        }
        if (px->requires_grad) {
          auto& g = px->ensure_grad();
          const double n = static_cast<double>(c);
          for (std::size_t i = 0; i < r; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dxh = o.grad[i * c + j] * pg->value[j];
              s1 += dxh;
              s2 += dxh * xhat[i * c + j];
            }
            for (std::size_t j = 0; j < c; ++j) {
              const double dxh = o.grad[i * c + j] * pg->value[j];
              g[i * c + j] += inv[i] * (dxh - s1 / n - xhat[i * c + j] * s2 / n);
            }
          }
        }
      });
}

// Picks rows of x by index (duplicates allowed).
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
  detail::require_2d(x, "gather_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(idx.size() * c);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= r) throw ContractError("gather_rows: index " + std::to_string(idx[i]) + " out of range");
    std::copy_n(x.data() + idx[i] * c, c, out.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  auto* px = x.node().get();
  std::vector<std::size_t> ids(idx.begin(), idx.end());
  return detail::make_result({idx.size(), c}, std::move(out), {x},
                             [px, c, ids = std::move(ids)](detail::Node& o) {
                               auto& g = px->ensure_grad();
                               for (std::size_t i = 0; i < ids.size(); ++i)
                                 for (std::size_t j = 0; j < c; ++j)
                                   g[ids[i] * c + j] += o.grad[i * c + j];
                             });
}

// Embedding lookup: rows of table selected by token id.
inline Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  return gather_rows(table, ids);
}

// Scatter-add: out[rows[p][i], :] += parts[p][i, :]; out has n_rows rows.
inline Tensor combine_rows(const std::vector<Tensor>& parts,
                           const std::vector<std::vector<std::size_t>>& rows, std::size_t n_rows,
                           std::size_t n_cols) {
  if (parts.size() != rows.size()) throw ContractError("combine_rows: parts/index count mismatch");
  std::vector<double> out(n_rows * n_cols, 0.0);
  for (std::size_t p = 0; p < parts.size(); ++p) {
    if (!parts[p].defined()) continue;
    if (parts[p].rows() != rows[p].size() || parts[p].cols() != n_cols) {
      throw DimensionError("combine_rows: part " + std::to_string(p) + " shape " +
                           shape_str(parts[p].shape()));
    }
    for (std::size_t i = 0; i < rows[p].size(); ++i) {
      if (rows[p][i] >= n_rows) throw ContractError("combine_rows: row index out of range");
      for (std::size_t j = 0; j < n_cols; ++j)
        out[rows[p][i] * n_cols + j] += parts[p][i * n_cols + j];
    }
  }
  std::vector<detail::Node*> ps;
  std::vector<Tensor> inputs;
  std::vector<std::vector<std::size_t>> rows_used;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    if (!parts[p].defined()) continue;
    ps.push_back(parts[p].node().get());
    inputs.push_back(parts[p]);
    rows_used.push_back(rows[p]);
  }
  return detail::make_result({n_rows, n_cols}, std::move(out), inputs,
                             [ps = std::move(ps), rows_used = std::move(rows_used),
                              n_cols](detail::Node& o) {
                               for (std::size_t p = 0; p < ps.size(); ++p) {
                                 if (!ps[p]->requires_grad) continue;
                                 auto& g = ps[p]->ensure_grad();
                                 for (std::size_t i = 0; i < rows_used[p].size(); ++i)
                                   for (std::size_t j = 0; j < n_cols; ++j)
                                     g[i * n_cols + j] += o.grad[rows_used[p][i] * n_cols + j];
                               }
                             });
}

// Flat element gather: out[i] = x.flat[idx[i]].
inline Tensor gather_elements(const Tensor& x, std::span<const std::size_t> idx) {
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.numel()) throw ContractError("gather_elements: index out of range");
    out[i] = x[idx[i]];
  }
  auto* px = x.node().get();
  std::vector<std::size_t> ids(idx.begin(), idx.end());
  return detail::make_result({idx.size()}, std::move(out), {x},
                             [px, ids = std::move(ids)](detail::Node& o) {
                               auto& g = px->ensure_grad();
                               for (std::size_t i = 0; i < ids.size(); ++i) g[ids[i]] += o.grad[i];
                             });
}

// out[i, j] = x[i, idx[i * cols_out + j]] for a [r x c] input.
inline Tensor gather_cols_per_row(const Tensor& x, std::span<const std::size_t> idx,
                                  std::size_t cols_out) {
  detail::require_2d(x, "gather_cols_per_row");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (idx.size() != r * cols_out) throw DimensionError("gather_cols_per_row: index size");
  std::vector<double> out(r * cols_out);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < cols_out; ++j) {
      const std::size_t k = idx[i * cols_out + j];
      if (k >= c) throw ContractError("gather_cols_per_row: column out of range");
      out[i * cols_out + j] = x[i * c + k];
    }
  auto* px = x.node().get();
  std::vector<std::size_t> ids(idx.begin(), idx.end());
  return detail::make_result({r, cols_out}, std::move(out), {x},
                             [px, r, c, cols_out, ids = std::move(ids)](detail::Node& o) {
                               auto& g = px->ensure_grad();
                               for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t j = 0; j < cols_out; ++j)
                                   g[i * c + ids[i * cols_out + j]] += o.grad[i * cols_out + j];
                             });
}

inline Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  detail::require_2d(x, "slice_rows");
  if (start + count > x.dim(0)) throw ContractError("slice_rows: range out of bounds");
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = start + i;
  return gather_rows(x, idx);
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: nothing to concatenate");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw DimensionError("concat_rows: column count mismatch");
    total += p.rows();
  }
  std::vector<std::vector<std::size_t>> rows;
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::vector<std::size_t> r(p.rows());
    for (auto& v : r) v = at++;
    rows.push_back(std::move(r));
  }
  return combine_rows(parts, rows, total, c);
}

// Columns [start, start + count) of a 2-D tensor.
inline Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  detail::require_2d(x, "slice_cols");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (start + count > c) throw ContractError("slice_cols: range out of bounds");
  std::vector<double> out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x[i * c + start + j];
  auto* px = x.node().get();
  return detail::make_result({r, count}, std::move(out), {x},
                             [px, r, c, start, count](detail::Node& o) {
                               auto& g = px->ensure_grad();
                               for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t j = 0; j < count; ++j)
                                   g[i * c + start + j] += o.grad[i * count + j];
                             });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: nothing to concatenate");
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  std::vector<std::size_t> offs;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_cols");
    if (p.rows() != r) throw DimensionError("concat_cols: row count mismatch");
    offs.push_back(c);
    c += p.cols();
  }
  std::vector<double> out(r * c);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t pc = parts[k].cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pc; ++j) out[i * c + offs[k] + j] = parts[k][i * pc + j];
  }
  std::vector<detail::Node*> ps;
  for (const auto& p : parts) ps.push_back(p.node().get());
  return detail::make_result({r, c}, std::move(out), parts,
                             [ps = std::move(ps), offs = std::move(offs), r, c](detail::Node& o) {
                               for (std::size_t k = 0; k < ps.size(); ++k) {
                                 if (!ps[k]->requires_grad) continue;
                                 auto& g = ps[k]->ensure_grad();
                                 const std::size_t pc = ps[k]->value.size() / r;
                                 for (std::size_t i = 0; i < r; ++i)
                                   for (std::size_t j = 0; j < pc; ++j)
                                     g[i * pc + j] += o.grad[i * c + offs[k] + j];
                               }
                             });
}

// Slice e of an expert bank [E x d_in x d_out] as a [d_in x d_out] matrix.
inline Tensor expert_slice(const Tensor& bank, std::size_t e) {
  if (bank.rank() != 3) throw DimensionError("expert_slice: bank must be 3-D, got " + shape_str(bank.shape()));
  if (e >= bank.dim(0)) {
    throw ContractError("expert_slice: expert " + std::to_string(e) + " out of range for " +
                        std::to_string(bank.dim(0)) + " experts");
  }
  const std::size_t din = bank.dim(1), dout = bank.dim(2), n = din * dout;
  std::vector<double> out(bank.values().begin() + static_cast<std::ptrdiff_t>(e * n),
                          bank.values().begin() + static_cast<std::ptrdiff_t>((e + 1) * n));
  auto* pb = bank.node().get();
  return detail::make_result({din, dout}, std::move(out), {bank}, [pb, e, n](detail::Node& o) {
    auto& g = pb->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) g[e * n + i] += o.grad[i];
  });
}

// Rotary position embedding on channel pairs (2i, 2i+1) of x [T x d];
// row t is rotated by positions[t] * base^(-2i/d).
inline Tensor rotary(const Tensor& x, std::span<const std::size_t> positions, double base = 10000.0) {
  detail::require_2d(x, "rotary");
  const std::size_t r = x.dim(0), d = x.dim(1);
  if (d % 2 != 0) throw ContractError("rotary: channel count " + std::to_string(d) + " is odd");
  if (positions.size() != r) throw DimensionError("rotary: one position per row required");
  std::vector<double> cs(r * d / 2), sn(r * d / 2), out(x.numel());
  for (std::size_t t = 0; t < r; ++t) {
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const double ang = static_cast<double>(positions[t]) * freq;
      cs[t * d / 2 + i] = std::cos(ang);
      sn[t * d / 2 + i] = std::sin(ang);
      const double a = x[t * d + 2 * i], b = x[t * d + 2 * i + 1];
      out[t * d + 2 * i] = a * cs[t * d / 2 + i] - b * sn[t * d / 2 + i];
      out[t * d + 2 * i + 1] = a * sn[t * d / 2 + i] + b * cs[t * d / 2 + i];
    }
  }
  auto* px = x.node().get();
  return detail::make_result(x.shape(), std::move(out), {x},
                             [px, r, d, cs = std::move(cs), sn = std::move(sn)](detail::Node& o) {
                               auto& g = px->ensure_grad();
                               for (std::size_t t = 0; t < r; ++t)
                                 for (std::size_t i = 0; i < d / 2; ++i) {
                                   const double ga = o.grad[t * d + 2 * i];
                                   const double gb = o.grad[t * d + 2 * i + 1];
                                   const double c = cs[t * d / 2 + i], s = sn[t * d / 2 + i];
                                   g[t * d + 2 * i] += ga * c + gb * s;
                                   g[t * d + 2 * i + 1] += -ga * s + gb * c;
                                 }
                             });
}

// Mean of selected row ranges: out[b, :] = mean of x rows [starts[b], starts[b] + counts[b]).
inline Tensor mean_row_groups(const Tensor& x, std::span<const std::size_t> starts,
                              std::span<const std::size_t> counts) {
  detail::require_2d(x, "mean_row_groups");
  const std::size_t c = x.dim(1), b = starts.size();
  if (counts.size() != b) throw ContractError("mean_row_groups: starts/counts mismatch");
  std::vector<double> out(b * c, 0.0);
  for (std::size_t k = 0; k < b; ++k) {
    if (counts[k] == 0 || starts[k] + counts[k] > x.dim(0)) {
      throw ContractError("mean_row_groups: empty or out-of-range group");
    }
    for (std::size_t i = starts[k]; i < starts[k] + counts[k]; ++i)
      for (std::size_t j = 0; j < c; ++j) out[k * c + j] += x[i * c + j];
    for (std::size_t j = 0; j < c; ++j) out[k * c + j] /= static_cast<double>(counts[k]);
  }
  auto* px = x.node().get();
  std::vector<std::size_t> st(starts.begin(), starts.end()), ct(counts.begin(), counts.end());
  return detail::make_result({b, c}, std::move(out), {x},
                             [px, c, st = std::move(st), ct = std::move(ct)](detail::Node& o) {
                               auto& g = px->ensure_grad();
                               for (std::size_t k = 0; k < st.size(); ++k) {
                                 const double w = 1.0 / static_cast<double>(ct[k]);
                                 for (std::size_t i = st[k]; i < st[k] + ct[k]; ++i)
                                   for (std::size_t j = 0; j < c; ++j)
                                     g[i * c + j] += o.grad[k * c + j] * w;
                               }
                             });
}

// Inverted dropout; identity when p == 0.
inline Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ContractError("dropout: rate must be < 1");
  std::vector<double> mask(x.numel()), out(x.numel());
  const double keep = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.bernoulli(p) ? 0.0 : keep;
    out[i] = x[i] * mask[i];
  }
  auto* px = x.node().get();
  return detail::make_result(x.shape(), std::move(out), {x},
                             [px, mask = std::move(mask)](detail::Node& o) {
                               auto& g = px->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * mask[i];
                             });
}

// Mean cross-entropy of logits [n x classes] against integer targets, with
// the per-row NLL returned through `nll_out` when given.
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                            std::vector<double>* nll_out = nullptr) {
  detail::require_2d(logits, "cross_entropy");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (targets.size() != n) throw DimensionError("cross_entropy: one target per row required");
  if (n == 0) throw ContractError("cross_entropy: empty batch");
  std::vector<double> probs(n * k);
  double total = 0.0;
  if (nll_out) nll_out->assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= k) throw ContractError("cross_entropy: target out of range");
    const double* row = logits.data() + i * k;
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - lse);
    const double nll = lse - row[targets[i]];
    total += nll;
    if (nll_out) (*nll_out)[i] = nll;
  }
  auto* pl = logits.node().get();
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  return detail::make_result(
      {1}, {total / static_cast<double>(n)}, {logits},
      [pl, n, k, probs = std::move(probs), tg = std::move(tg)](detail::Node& o) {
        auto& g = pl->ensure_grad();
        const double s = o.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < k; ++j)
            g[i * k + j] += s * (probs[i * k + j] - (j == tg[i] ? 1.0 : 0.0));
      });
}

}  // namespace switchhead
