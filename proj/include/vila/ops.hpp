#pragma once

// Differentiable tensor operations. Every op validates shapes, computes its
// value eagerly and, when any input requires grad, records a backward rule.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <cblas.h>

#include "vila/autodiff.hpp"

namespace vila::ad {

namespace detail {

struct MatDims {
  std::size_t rows;
  std::size_t cols;
};

// Rank-1 tensors act as a single row.
inline MatDims mat_dims(const Shape& s, const char* op) {
  if (s.size() == 1) return {1, s[0]};
  if (s.size() == 2) return {s[0], s[1]};
  throw ShapeError(std::string(op) + ": expected rank 1 or 2, got " + to_string(s));
}

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " +
                   to_string(b));
}

template <typename T>
void require_same(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

template <typename T>
bool wants(const std::shared_ptr<Node<T>>& p) {
  return p->requires_grad;
}

// Row-major CBLAS gemm with beta = 1: C += op(A) * op(B).
template <typename T>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T* c) {
  const auto opa = ta ? CblasTrans : CblasNoTrans;
  const auto opb = tb ? CblasTrans : CblasNoTrans;
  const auto M = static_cast<int>(m), N = static_cast<int>(n), K = static_cast<int>(k);
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, opa, opb, M, N, K, 1.0f, a, static_cast<int>(lda), b, static_cast<int>(ldb), 1.0f, c, N);
  } else {
    cblas_dgemm(CblasRowMajor, opa, opb, M, N, K, 1.0, a, static_cast<int>(lda), b, static_cast<int>(ldb), 1.0, c, N);
  }
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  gemm(false, false, m, n, k, a, k, b, n, c);
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  gemm(false, true, m, n, k, a, k, b, k, c);
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  gemm(true, false, k, n, m, a, k, b, n, c);
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    detail::shape_fail("matmul", a.shape(), b.shape());
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
  return make_result<T>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (detail::wants(pa)) detail::gemm_nt(m, n, k, self.grad.data(), pb->value.data(), pa->grad.data());
    if (detail::wants(pb)) detail::gemm_tn(m, k, n, pa->value.data(), self.grad.data(), pb->grad.data());
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + to_string(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  const auto& v = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
  return make_result<T>("transpose", {n, m}, std::move(out), {a}, [m, n](Node<T>& self) {
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("add", a, b);
  std::vector<T> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
  return make_result<T>("add", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("sub", a, b);
  std::vector<T> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
  return make_result<T>("sub", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa->requires_grad) pa->grad[i] += self.grad[i];
      if (pb->requires_grad) pb->grad[i] -= self.grad[i];
    }
  });
}

/// Elementwise product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("mul", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa->requires_grad) pa->grad[i] += self.grad[i] * pb->value[i];
      if (pb->requires_grad) pb->grad[i] += self.grad[i] * pa->value[i];
    }
  });
}

/// Adds a row vector to every row: x[m,n] + b[n].
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  const auto xd = detail::mat_dims(x.shape(), "add_bias");
  if (b.size() != xd.cols) detail::shape_fail("add_bias", x.shape(), b.shape());
  std::vector<T> out(x.data());
  for (std::size_t i = 0; i < xd.rows; ++i)
    for (std::size_t j = 0; j < xd.cols; ++j) out[i * xd.cols + j] += b.data()[j];
  return make_result<T>("add_bias", x.shape(), std::move(out), {x, b}, [xd](Node<T>& self) {
    auto& px = self.parents[0];
    auto& pb = self.parents[1];
    if (px->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
    if (pb->requires_grad)
      for (std::size_t i = 0; i < xd.rows; ++i)
        for (std::size_t j = 0; j < xd.cols; ++j) pb->grad[j] += self.grad[i * xd.cols + j];
  });
}

/// x has B·r rows, y has r rows; y is added to each consecutive block of r rows.
template <typename T>
Tensor<T> add_tiled(const Tensor<T>& x, const Tensor<T>& y) {
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(1) || x.dim(0) % y.dim(0) != 0) {
    detail::shape_fail("add_tiled", x.shape(), y.shape());
  }
  const std::size_t block = y.size();
  std::vector<T> out(x.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y.data()[i % block];
  return make_result<T>("add_tiled", x.shape(), std::move(out), {x, y}, [block](Node<T>& self) {
    auto& px = self.parents[0];
    auto& py = self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (px->requires_grad) px->grad[i] += self.grad[i];
      if (py->requires_grad) py->grad[i % block] += self.grad[i];
    }
  });
}

/// Stacks `times` copies of x vertically.
template <typename T>
Tensor<T> tile_rows(const Tensor<T>& x, std::size_t times) {
  if (x.rank() != 2 || times == 0) throw ShapeError("tile_rows: expected rank 2 and times > 0");
  const std::size_t block = x.size();
  std::vector<T> out(block * times);
  for (std::size_t t = 0; t < times; ++t)
    std::copy(x.data().begin(), x.data().end(), out.begin() + t * block);
  return make_result<T>("tile_rows", {x.dim(0) * times, x.dim(1)}, std::move(out), {x},
                        [block](Node<T>& self) {
                          auto& g = self.parents[0]->grad;
                          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % block] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double s) {
  std::vector<T> out(a.data());
  const T st = static_cast<T>(s);
  for (auto& v : out) v *= st;
  return make_result<T>("scale", a.shape(), std::move(out), {a}, [st](Node<T>& self) {
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += st * self.grad[i];
  });
}

/// a / s for a one-element tensor s.
template <typename T>
Tensor<T> div_scalar(const Tensor<T>& a, const Tensor<T>& s) {
  if (s.size() != 1) detail::shape_fail("div_scalar", a.shape(), s.shape());
  const T sv = s.data()[0];
  std::vector<T> out(a.data());
  for (auto& v : out) v /= sv;
  return make_result<T>("div_scalar", a.shape(), std::move(out), {a, s}, [sv](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& ps = self.parents[1];
    T acc = T(0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa->requires_grad) pa->grad[i] += self.grad[i] / sv;
      acc += self.grad[i] * self.value[i];
    }
    if (ps->requires_grad) ps->grad[0] -= acc / sv;
  });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
  return make_result<T>("exp", a.shape(), std::move(out), {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

/// Natural log with inputs clamped below at kEps.
template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  const T eps = static_cast<T>(kEps);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(a.data()[i], eps));
  return make_result<T>("log", a.shape(), std::move(out), {a}, [eps](Node<T>& self) {
    auto& p = self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (p->value[i] > eps) p->grad[i] += self.grad[i] / p->value[i];
    }
  });
}

/// max(0, x); the subgradient at exactly 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
  return make_result<T>("relu", a.shape(), std::move(out), {a}, [](Node<T>& self) {
    auto& p = self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (p->value[i] > T(0)) p->grad[i] += self.grad[i];
  });
}

/// Tanh-approximated GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.data()[i];
    out[i] = T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x)));
  }
  return make_result<T>("gelu", a.shape(), std::move(out), {a}, [c, k](Node<T>& self) {
    auto& p = self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T x = p->value[i];
      const T t = std::tanh(c * (x + k * x * x * x));
      const T d = T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
      p->grad[i] += self.grad[i] * d;
    }
  });
}

/// Softmax along `axis` (0 or 1) of a rank-2 tensor; rank-1 inputs use axis 0.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis = -1) {
  std::size_t outer, len, stride;
  if (a.rank() == 1) {
    if (axis != -1 && axis != 0) throw ShapeError("softmax: invalid axis for rank-1 input");
    outer = 1, len = a.dim(0), stride = 1;
  } else if (a.rank() == 2) {
    if (axis == -1) axis = 1;
    if (axis != 0 && axis != 1) throw ShapeError("softmax: invalid axis " + std::to_string(axis));
    if (axis == 1) outer = a.dim(0), len = a.dim(1), stride = 1;
    else outer = a.dim(1), len = a.dim(0), stride = a.dim(1);
  } else {
    throw ShapeError("softmax: expected rank 1 or 2, got " + to_string(a.shape()));
  }
  const std::size_t step = (stride == 1) ? len : 1;
  std::vector<T> out(a.size());
  const auto& v = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * step;
    T mx = v[base];
    for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, v[base + j * stride]);
    T sum = T(0);
    for (std::size_t j = 0; j < len; ++j) {
      const T e = std::exp(v[base + j * stride] - mx);
      out[base + j * stride] = e;
      sum += e;
    }
    for (std::size_t j = 0; j < len; ++j) out[base + j * stride] /= sum;
  }
  return make_result<T>("softmax", a.shape(), std::move(out), {a},
                        [outer, len, stride, step](Node<T>& self) {
                          auto& g = self.parents[0]->grad;
                          for (std::size_t o = 0; o < outer; ++o) {
                            const std::size_t base = o * step;
                            T dot = T(0);
                            for (std::size_t j = 0; j < len; ++j) {
                              const std::size_t idx = base + j * stride;
                              dot += self.grad[idx] * self.value[idx];
                            }
                            for (std::size_t j = 0; j < len; ++j) {
                              const std::size_t idx = base + j * stride;
                              g[idx] += self.value[idx] * (self.grad[idx] - dot);
                            }
                          }
                        });
}

/// Per-row layer normalization with learned gain and bias (both length n).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps = 1e-5) {
  const auto d = detail::mat_dims(x.shape(), "layer_norm");
  if (gain.size() != d.cols || bias.size() != d.cols) detail::shape_fail("layer_norm", x.shape(), gain.shape());
  const std::size_t m = d.rows, n = d.cols;
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(m);
  const auto& v = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = v.data() + i * n;
    T mean = T(0);
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<T>(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(n);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    inv_std[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (row[j] - mean) * is;
      xhat[i * n + j] = h;
      out[i * n + j] = h * gain.data()[j] + bias.data()[j];
    }
  }
  return make_result<T>(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        for (std::size_t i = 0; i < m; ++i) {
          const T* go = self.grad.data() + i * n;
          const T* h = xhat.data() + i * n;
          if (pg->requires_grad)
            for (std::size_t j = 0; j < n; ++j) pg->grad[j] += go[j] * h[j];
          if (pb->requires_grad)
            for (std::size_t j = 0; j < n; ++j) pb->grad[j] += go[j];
          if (px->requires_grad) {
            T sum_g = T(0), sum_gh = T(0);
            for (std::size_t j = 0; j < n; ++j) {
              const T gh = go[j] * pg->value[j];
              sum_g += gh;
              sum_gh += gh * h[j];
            }
            const T inv_n = T(1) / static_cast<T>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const T gh = go[j] * pg->value[j];
              px->grad[i * n + j] += inv_std[i] * (gh - inv_n * sum_g - h[j] * inv_n * sum_gh);
            }
          }
        }
      });
}

/// Rows of `table` selected by `ids`.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2, got " + to_string(table.shape()));
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  std::vector<T> out(idx.size() * d);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(idx[r]) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(table.data().begin() + idx[r] * d, d, out.begin() + r * d);
  }
  const std::size_t rows = idx.size();
  return make_result<T>("embedding", {rows, d}, std::move(out), {table},
                        [d, idx = std::move(idx)](Node<T>& self) {
                          auto& g = self.parents[0]->grad;
                          for (std::size_t r = 0; r < idx.size(); ++r)
                            for (std::size_t j = 0; j < d; ++j) g[idx[r] * d + j] += self.grad[r * d + j];
                        });
}

/// Rows of x at the given indices (repeats allowed).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  const auto d = detail::mat_dims(x.shape(), "gather_rows");
  if (rows.empty()) throw ShapeError("gather_rows: empty index list");
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<T> out(idx.size() * d.cols);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= d.rows) {
      throw ShapeError("gather_rows: row " + std::to_string(idx[r]) + " out of range for " +
                       to_string(x.shape()));
    }
    std::copy_n(x.data().begin() + idx[r] * d.cols, d.cols, out.begin() + r * d.cols);
  }
  const std::size_t n = d.cols, count = idx.size();
  return make_result<T>("gather_rows", {count, n}, std::move(out), {x},
                        [n, idx = std::move(idx)](Node<T>& self) {
                          auto& g = self.parents[0]->grad;
                          for (std::size_t r = 0; r < idx.size(); ++r)
                            for (std::size_t j = 0; j < n; ++j) g[idx[r] * n + j] += self.grad[r * n + j];
                        });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  const auto d = detail::mat_dims(x.shape(), "slice_rows");
  if (count == 0 || begin + count > d.rows) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + to_string(x.shape()));
  }
  const std::size_t n = d.cols;
  std::vector<T> out(x.data().begin() + begin * n, x.data().begin() + (begin + count) * n);
  return make_result<T>("slice_rows", {count, n}, std::move(out), {x}, [begin, n](Node<T>& self) {
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
  });
}

/// Vertical concatenation of rank-2 tensors sharing a column count.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = detail::mat_dims(parts[0].shape(), "concat_rows").cols;
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const auto d = detail::mat_dims(p.shape(), "concat_rows");
    if (d.cols != n) detail::shape_fail("concat_rows", parts[0].shape(), p.shape());
    offsets.push_back(total);
    total += d.rows;
  }
  std::vector<T> out;
  out.reserve(total * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result<T>("concat_rows", {total, n}, std::move(out), parts,
                        [n, offsets = std::move(offsets)](Node<T>& self) {
                          for (std::size_t k = 0; k < self.parents.size(); ++k) {
                            auto& p = self.parents[k];
                            if (!p->requires_grad) continue;
                            const std::size_t off = offsets[k] * n;
                            for (std::size_t i = 0; i < p->value.size(); ++i) p->grad[i] += self.grad[off + i];
                          }
                        });
}

/// Divides every row by its Euclidean norm. Rows with norm < kEps are rejected.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
  const auto d = detail::mat_dims(x.shape(), "l2_normalize");
  std::vector<T> out(x.size());
  std::vector<T> norms(d.rows);
  for (std::size_t i = 0; i < d.rows; ++i) {
    const T* row = x.data().data() + i * d.cols;
    T ss = T(0);
    for (std::size_t j = 0; j < d.cols; ++j) ss += row[j] * row[j];
    const T nrm = std::sqrt(ss);
    if (!(static_cast<double>(nrm) >= kEps)) {
      throw DegenerateError("l2_normalize: row " + std::to_string(i) + " has norm below 1e-12");
    }
    norms[i] = nrm;
    for (std::size_t j = 0; j < d.cols; ++j) out[i * d.cols + j] = row[j] / nrm;
  }
  return make_result<T>("l2_normalize", x.shape(), std::move(out), {x},
                        [d, norms = std::move(norms)](Node<T>& self) {
                          auto& g = self.parents[0]->grad;
                          for (std::size_t i = 0; i < d.rows; ++i) {
                            const T* y = self.value.data() + i * d.cols;
                            const T* go = self.grad.data() + i * d.cols;
                            T dot = T(0);
                            for (std::size_t j = 0; j < d.cols; ++j) dot += go[j] * y[j];
                            for (std::size_t j = 0; j < d.cols; ++j)
                              g[i * d.cols + j] += (go[j] - y[j] * dot) / norms[i];
                          }
                        });
}

/// Sum over rows with mask[i] != 0 of -log softmax(logits[i])[targets[i]].
/// An empty mask includes every row.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> mask = {}) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be rank 2, got " + to_string(logits.shape()));
  const std::size_t m = logits.dim(0), v = logits.dim(1);
  if (targets.size() != m || (!mask.empty() && mask.size() != m)) {
    throw ShapeError("cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets / " + std::to_string(mask.size()) +
                     " mask entries");
  }
  std::vector<T> probs(m * v, T(0));
  std::vector<std::uint8_t> active(m, 1);
  T total = T(0);
  for (std::size_t i = 0; i < m; ++i) {
    if (!mask.empty() && !mask[i]) {
      active[i] = 0;
      continue;
    }
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw ShapeError("cross_entropy: target " + std::to_string(targets[i]) + " outside vocab " +
                       std::to_string(v));
    }
    const T* row = logits.data().data() + i * v;
    T mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (std::size_t j = 0; j < v; ++j) {
      const T e = std::exp(row[j] - mx);
      probs[i * v + j] = e;
      sum += e;
    }
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= sum;
    total += std::log(sum) + mx - row[targets[i]];
  }
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  return make_result<T>("cross_entropy", {1}, {total}, {logits},
                        [m, v, probs = std::move(probs), active = std::move(active),
                         tgt = std::move(tgt)](Node<T>& self) {
                          auto& g = self.parents[0]->grad;
                          const T go = self.grad[0];
                          for (std::size_t i = 0; i < m; ++i) {
                            if (!active[i]) continue;
                            for (std::size_t j = 0; j < v; ++j) g[i * v + j] += go * probs[i * v + j];
                            g[i * v + tgt[i]] -= go;
                          }
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (auto x : a.data()) total += x;
  return make_result<T>("sum", {1}, {total}, {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad;
    for (auto& x : g) x += self.grad[0];
  });
}

/// Running mean; returns the common value exactly when all elements are equal.
template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  T m = T(0);
  std::size_t k = 0;
  for (auto x : a.data()) m += (x - m) / static_cast<T>(++k);
  const T inv = T(1) / static_cast<T>(a.size());
  return make_result<T>("mean", {1}, {m}, {a}, [inv](Node<T>& self) {
    auto& g = self.parents[0]->grad;
    for (auto& x : g) x += self.grad[0] * inv;
  });
}

/// Multi-head scaled dot-product attention over a batch.
/// q: [batch*tq, d], k and v: [batch*tk, d]. With `causal`, query i sees keys 0..i.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t batch,
                    std::size_t heads, bool causal) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || k.shape() != v.shape() ||
      q.dim(1) != k.dim(1) || batch == 0 || heads == 0 || q.dim(1) % heads != 0 ||
      q.dim(0) % batch != 0 || k.dim(0) % batch != 0) {
    throw ShapeError("attention: incompatible shapes q" + to_string(q.shape()) + " k" +
                     to_string(k.shape()) + " v" + to_string(v.shape()) + " for batch " +
                     std::to_string(batch) + ", heads " + std::to_string(heads));
  }
  const std::size_t d = q.dim(1), dh = d / heads;
  const std::size_t tq = q.dim(0) / batch, tk = k.dim(0) / batch;
  if (causal && tq != tk) throw ShapeError("attention: causal mask needs equal query/key lengths");
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> probs(batch * heads * tq * tk, T(0));
  std::vector<T> out(batch * tq * d, T(0));
  const T* Q = q.data().data();
  const T* K = k.data().data();
  const T* V = v.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < tq; ++i) {
        const std::size_t limit = causal ? i + 1 : tk;
        T* p = probs.data() + ((b * heads + h) * tq + i) * tk;
        const T* qi = Q + (b * tq + i) * d + h * dh;
        T mx = T(0);
        for (std::size_t j = 0; j < limit; ++j) {
          const T* kj = K + (b * tk + j) * d + h * dh;
          T s = T(0);
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          s *= inv_sqrt;
          p[j] = s;
          mx = (j == 0) ? s : std::max(mx, s);
        }
        T sum = T(0);
        for (std::size_t j = 0; j < limit; ++j) {
          p[j] = std::exp(p[j] - mx);
          sum += p[j];
        }
        T* oi = out.data() + (b * tq + i) * d + h * dh;
        for (std::size_t j = 0; j < limit; ++j) {
          p[j] /= sum;
          const T* vj = V + (b * tk + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }
  return make_result<T>(
      "attention", {batch * tq, d}, std::move(out), {q, k, v},
      [=, probs = std::move(probs)](Node<T>& self) {
        auto& pq = self.parents[0];
        auto& pk = self.parents[1];
        auto& pv = self.parents[2];
        std::vector<T> dp(tk);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < tq; ++i) {
              const std::size_t limit = causal ? i + 1 : tk;
              const T* p = probs.data() + ((b * heads + h) * tq + i) * tk;
              const T* go = self.grad.data() + (b * tq + i) * d + h * dh;
              T dot = T(0);
              for (std::size_t j = 0; j < limit; ++j) {
                const std::size_t row = (b * tk + j) * d + h * dh;
                const T* vj = pv->value.data() + row;
                T s = T(0);
                for (std::size_t c = 0; c < dh; ++c) s += go[c] * vj[c];
                dp[j] = s;
                dot += s * p[j];
                if (pv->requires_grad) {
                  T* gv = pv->grad.data() + row;
                  for (std::size_t c = 0; c < dh; ++c) gv[c] += p[j] * go[c];
                }
              }
              const std::size_t qrow = (b * tq + i) * d + h * dh;
              for (std::size_t j = 0; j < limit; ++j) {
                const T ds = p[j] * (dp[j] - dot) * inv_sqrt;
                if (ds == T(0)) continue;
                const std::size_t row = (b * tk + j) * d + h * dh;
                if (pq->requires_grad) {
                  const T* kj = pk->value.data() + row;
                  T* gq = pq->grad.data() + qrow;
                  for (std::size_t c = 0; c < dh; ++c) gq[c] += ds * kj[c];
                }
                if (pk->requires_grad) {
                  const T* qi = pq->value.data() + qrow;
                  T* gk = pk->grad.data() + row;
                  for (std::size_t c = 0; c < dh; ++c) gk[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

/// x · W + b for x [m,k], W [k,n], b [n].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_bias(matmul(x, w), b);
}

}  // namespace vila::ad
