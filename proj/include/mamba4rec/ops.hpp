#pragma once

// Differentiable tensor operations. Every op validates shapes, computes
// its forward result, rejects non-finite output, and (when an input needs a
// gradient) records a closure that accumulates into the inputs' grads.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "mamba4rec/errors.hpp"
#include "mamba4rec/rng.hpp"
#include "mamba4rec/tensor.hpp"

namespace m4r {

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      to_string(a.shape()) + " vs " +
                                      to_string(b.shape()));
}

template <class T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

// Elementwise map with derivative dy/dx expressed through (x, y).
template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& x, const char* name, F f, DF df) {
  std::vector<T> out(x.size());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  Tensor<T> y = make_result<T>(x.shape(), std::move(out), name, {x});
  on_backward(y, [yn = y.node(), xn = x.node(), df] {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += yn->grad[i] * df(xn->data[i], yn->data[i]);
    }
  });
  return y;
}

}  // namespace detail

// ---------------------------------------------------------------- linear

namespace detail {

// dst[cols, rows] = src[rows, cols]^T
template <class T>
std::vector<T> transposed(const T* src, std::size_t rows, std::size_t cols) {
  std::vector<T> dst(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
  return dst;
}

// out[M, P] += a[M, K] b[K, P], written as row updates so the inner loop
// vectorizes without reassociating sums.
template <class T>
void gemm_acc(const T* a, const T* b, T* out, std::size_t M, std::size_t K, std::size_t P) {
  for (std::size_t m = 0; m < M; ++m) {
    T* o = out + m * P;
    const T* am = a + m * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = am[k];
      const T* bk = b + k * P;
      for (std::size_t p = 0; p < P; ++p) o[p] += av * bk[p];
    }
  }
}

}  // namespace detail

// a[..., M, K] x b[K, P] -> [..., M, P]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(b.rank() == 2, "matmul: right operand must be rank 2");
  const std::size_t K = b.dim(0), P = b.dim(1);
  detail::require(a.dim(-1) == K, "matmul: inner extents differ " +
                                      to_string(a.shape()) + " x " +
                                      to_string(b.shape()));
  const std::size_t R = a.size() / K;
  std::vector<T> out(R * P, T{0});
  detail::gemm_acc(a.data().data(), b.data().data(), out.data(), R, K, P);
  OpCounter::add(static_cast<std::uint64_t>(R) * K * P);
  Shape shape = a.shape();
  shape.back() = P;
  Tensor<T> y = detail::make_result<T>(std::move(shape), std::move(out), "matmul", {a, b});
  detail::on_backward(y, [yn = y.node(), an = a.node(), bn = b.node(), R, K, P] {
    const T* G = yn->grad.data();
    if (an->requires_grad) {
      const auto bt = detail::transposed(bn->data.data(), K, P);
      detail::gemm_acc(G, bt.data(), an->ensure_grad().data(), R, P, K);
    }
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (std::size_t r = 0; r < R; ++r) {
        const T* gr = G + r * P;
        const T* ar = an->data.data() + r * K;
        for (std::size_t k = 0; k < K; ++k) {
          const T av = ar[k];
          T* gbr = gb.data() + k * P;
          for (std::size_t p = 0; p < P; ++p) gbr[p] += av * gr[p];
        }
      }
    }
  });
  return y;
}

// a[..., K] x b[P, K]^T -> [..., P]. Scores against a row-major table.
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(b.rank() == 2, "matmul_nt: right operand must be rank 2");
  const std::size_t P = b.dim(0), K = b.dim(1);
  detail::require(a.dim(-1) == K, "matmul_nt: inner extents differ " +
                                      to_string(a.shape()) + " x " +
                                      to_string(b.shape()) + "^T");
  const std::size_t R = a.size() / K;
  std::vector<T> out(R * P, T{0});
  const auto bt = detail::transposed(b.data().data(), P, K);
  detail::gemm_acc(a.data().data(), bt.data(), out.data(), R, K, P);
  OpCounter::add(static_cast<std::uint64_t>(R) * K * P);
  Shape shape = a.shape();
  shape.back() = P;
  Tensor<T> y = detail::make_result<T>(std::move(shape), std::move(out), "matmul_nt", {a, b});
  detail::on_backward(y, [yn = y.node(), an = a.node(), bn = b.node(), R, K, P] {
    const T* G = yn->grad.data();
    if (an->requires_grad) {
      auto& ga = an->ensure_grad();
      for (std::size_t r = 0; r < R; ++r) {
        T* gar = ga.data() + r * K;
        for (std::size_t p = 0; p < P; ++p) {
          const T g = G[r * P + p];
          if (g == T{0}) continue;
          const T* br = bn->data.data() + p * K;
          for (std::size_t k = 0; k < K; ++k) gar[k] += g * br[k];
        }
      }
    }
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (std::size_t r = 0; r < R; ++r) {
        const T* ar = an->data.data() + r * K;
        for (std::size_t p = 0; p < P; ++p) {
          const T g = G[r * P + p];
          if (g == T{0}) continue;
          T* gbr = gb.data() + p * K;
          for (std::size_t k = 0; k < K; ++k) gbr[k] += g * ar[k];
        }
      }
    }
  });
  return y;
}

// Batched a[B, M, K] x b[B, N, K]^T -> [B, M, N].
template <class T>
Tensor<T> batched_matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) &&
                      a.dim(2) == b.dim(2),
                  "batched_matmul_nt: shape mismatch " + to_string(a.shape()) +
                      " x " + to_string(b.shape()));
  const std::size_t Bt = a.dim(0), M = a.dim(1), N = b.dim(1), K = a.dim(2);
  std::vector<T> out(Bt * M * N, T{0});
  for (std::size_t bi = 0; bi < Bt; ++bi) {
    const auto bt = detail::transposed(b.data().data() + bi * N * K, N, K);
    detail::gemm_acc(a.data().data() + bi * M * K, bt.data(), out.data() + bi * M * N, M, K, N);
  }
  OpCounter::add(static_cast<std::uint64_t>(Bt) * M * N * K);
  Tensor<T> y = detail::make_result<T>({Bt, M, N}, std::move(out), "batched_matmul_nt", {a, b});
  detail::on_backward(y, [yn = y.node(), an = a.node(), bn = b.node(), Bt, M, N, K] {
    for (std::size_t bi = 0; bi < Bt; ++bi) {
      const T* G = yn->grad.data() + bi * M * N;
      const T* A = an->data.data() + bi * M * K;
      const T* Bm = bn->data.data() + bi * N * K;
      for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t n = 0; n < N; ++n) {
          const T g = G[m * N + n];
          if (an->requires_grad) {
            T* ga = an->ensure_grad().data() + bi * M * K + m * K;
            for (std::size_t k = 0; k < K; ++k) ga[k] += g * Bm[n * K + k];
          }
          if (bn->requires_grad) {
            T* gb = bn->ensure_grad().data() + bi * N * K + n * K;
            for (std::size_t k = 0; k < K; ++k) gb[k] += g * A[m * K + k];
          }
        }
      }
    }
  });
  return y;
}

// Batched a[B, M, K] x b[B, K, P] -> [B, M, P].
template <class T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) &&
                      a.dim(2) == b.dim(1),
                  "batched_matmul: shape mismatch " + to_string(a.shape()) +
                      " x " + to_string(b.shape()));
  const std::size_t Bt = a.dim(0), M = a.dim(1), K = a.dim(2), P = b.dim(2);
  std::vector<T> out(Bt * M * P, T{0});
  for (std::size_t bi = 0; bi < Bt; ++bi) {
    detail::gemm_acc(a.data().data() + bi * M * K, b.data().data() + bi * K * P,
                     out.data() + bi * M * P, M, K, P);
  }
  OpCounter::add(static_cast<std::uint64_t>(Bt) * M * K * P);
  Tensor<T> y = detail::make_result<T>({Bt, M, P}, std::move(out), "batched_matmul", {a, b});
  detail::on_backward(y, [yn = y.node(), an = a.node(), bn = b.node(), Bt, M, K, P] {
    for (std::size_t bi = 0; bi < Bt; ++bi) {
      const T* G = yn->grad.data() + bi * M * P;
      const T* A = an->data.data() + bi * M * K;
      const T* Bm = bn->data.data() + bi * K * P;
      if (an->requires_grad) {
        const auto bt = detail::transposed(Bm, K, P);
        detail::gemm_acc(G, bt.data(), an->ensure_grad().data() + bi * M * K, M, P, K);
      }
      for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t k = 0; k < K; ++k) {
          if (bn->requires_grad) {
            const T av = A[m * K + k];
            T* gb = bn->ensure_grad().data() + bi * K * P + k * P;
            for (std::size_t p = 0; p < P; ++p) gb[p] += av * G[m * P + p];
          }
        }
      }
    }
  });
  return y;
}

// ------------------------------------------------------------ elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor<T> y = detail::make_result<T>(a.shape(), std::move(out), "add", {a, b});
  detail::on_backward(y, [yn = y.node(), an = a.node(), bn = b.node()] {
    for (auto* n : {an, bn}) {
      if (!n->requires_grad) continue;
      auto& g = n->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i];
    }
  });
  return y;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor<T> y = detail::make_result<T>(a.shape(), std::move(out), "mul", {a, b});
  detail::on_backward(y, [yn = y.node(), an = a.node(), bn = b.node()] {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i] * an->data[i];
    }
  });
  return y;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(
      x, "scale", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

// x[..., C] + bias[C]
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require(bias.rank() == 1 && bias.dim(0) == x.dim(-1),
                  "add_bias: bias " + to_string(bias.shape()) +
                      " does not match " + to_string(x.shape()));
  const std::size_t C = bias.size();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + bias[i % C];
  Tensor<T> y = detail::make_result<T>(x.shape(), std::move(out), "add_bias", {x, bias});
  detail::on_backward(y, [yn = y.node(), xn = x.node(), bn = bias.node(), C] {
    if (xn->requires_grad) {
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < yn->grad.size(); ++i) g[i % C] += yn->grad[i];
    }
  });
  return y;
}

// col[..., 1] broadcast against row[C] -> [..., C], out = col + row.
template <class T>
Tensor<T> broadcast_add(const Tensor<T>& col, const Tensor<T>& row) {
  detail::require(col.dim(-1) == 1 && row.rank() == 1,
                  "broadcast_add: expected [...,1] and [C], got " +
                      to_string(col.shape()) + " and " + to_string(row.shape()));
  const std::size_t R = col.size(), C = row.size();
  std::vector<T> out(R * C);
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = col[r] + row[c];
  }
  Shape shape = col.shape();
  shape.back() = C;
  Tensor<T> y = detail::make_result<T>(std::move(shape), std::move(out), "broadcast_add", {col, row});
  detail::on_backward(y, [yn = y.node(), cn = col.node(), rn = row.node(), R, C] {
    for (std::size_t r = 0; r < R; ++r) {
      for (std::size_t c = 0; c < C; ++c) {
        const T g = yn->grad[r * C + c];
        if (cn->requires_grad) cn->ensure_grad()[r] += g;
        if (rn->requires_grad) rn->ensure_grad()[c] += g;
      }
    }
  });
  return y;
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s{0};
  for (const T v : x.data()) s += v;
  Tensor<T> y = detail::make_result<T>({1}, {s}, "sum", {x});
  detail::on_backward(y, [yn = y.node(), xn = x.node()] {
    auto& g = xn->ensure_grad();
    for (auto& v : g) v += yn->grad[0];
  });
  return y;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, "sigmoid", [](T v) { return detail::sigmoid(v); },
      [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary(
      x, "silu", [](T v) { return v * detail::sigmoid(v); },
      [](T v, T) {
        const T s = detail::sigmoid(v);
        return s * (T{1} + v * (T{1} - s));
      });
}

// Tanh approximation of GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T a = static_cast<T>(0.044715);
  return detail::unary(
      x, "gelu",
      [](T v) { return T{0.5} * v * (T{1} + std::tanh(c * (v + a * v * v * v))); },
      [](T v, T) {
        const T t = std::tanh(c * (v + a * v * v * v));
        return T{0.5} * (T{1} + t) +
               T{0.5} * v * (T{1} - t * t) * c * (T{1} + T{3} * a * v * v);
      });
}

template <class T>
T softplus_scalar(T v) {
  return v > T{30} ? v : std::log1p(std::exp(v));
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary(
      x, "softplus", [](T v) { return softplus_scalar(v); },
      [](T v, T) { return v > T{30} ? T{1} : detail::sigmoid(v); });
}

// -exp(x); turns a log-parameterized magnitude into a strictly negative value.
template <class T>
Tensor<T> neg_exp(const Tensor<T>& x) {
  return detail::unary(
      x, "neg_exp", [](T v) { return -std::exp(v); }, [](T, T y) { return y; });
}

// --------------------------------------------------------- normalization

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t V = x.rank() ? x.dim(-1) : 0;
  detail::require(V > 0, "softmax: empty distribution axis");
  const std::size_t R = x.size() / V;
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < R; ++r) {
    const T* in = x.data().data() + r * V;
    T* o = out.data() + r * V;
    const T mx = *std::max_element(in, in + V);
    T z{0};
    for (std::size_t v = 0; v < V; ++v) z += (o[v] = std::exp(in[v] - mx));
    for (std::size_t v = 0; v < V; ++v) o[v] /= z;
  }
  Tensor<T> y = detail::make_result<T>(x.shape(), std::move(out), "softmax", {x});
  detail::on_backward(y, [yn = y.node(), xn = x.node(), R, V] {
    auto& g = xn->ensure_grad();
    for (std::size_t r = 0; r < R; ++r) {
      const T* yr = yn->data.data() + r * V;
      const T* gr = yn->grad.data() + r * V;
      T dot{0};
      for (std::size_t v = 0; v < V; ++v) dot += gr[v] * yr[v];
      for (std::size_t v = 0; v < V; ++v) g[r * V + v] += yr[v] * (gr[v] - dot);
    }
  });
  return y;
}

// Softmax over the last axis of scores[B, L, L] with entries j > i
// excluded, i.e. softmax(scores + causal_mask) with -inf above the diagonal.
template <class T>
Tensor<T> causal_softmax(const Tensor<T>& scores) {
  detail::require(scores.rank() == 3 && scores.dim(1) == scores.dim(2),
                  "causal_softmax: expected [B, L, L], got " + to_string(scores.shape()));
  const std::size_t Bt = scores.dim(0), L = scores.dim(1);
  std::vector<T> out(scores.size(), T{0});
  constexpr T neg_inf = -std::numeric_limits<T>::infinity();
  std::vector<T> row(L);
  for (std::size_t b = 0; b < Bt; ++b) {
    for (std::size_t i = 0; i < L; ++i) {
      const T* in = scores.data().data() + (b * L + i) * L;
      T* o = out.data() + (b * L + i) * L;
      for (std::size_t j = 0; j < L; ++j) row[j] = j > i ? neg_inf : in[j];
      const T mx = *std::max_element(row.begin(), row.end());
      T z{0};
      for (std::size_t j = 0; j < L; ++j) z += (o[j] = std::exp(row[j] - mx));
      for (std::size_t j = 0; j < L; ++j) o[j] /= z;
    }
  }
  Tensor<T> y = detail::make_result<T>(scores.shape(), std::move(out), "causal_softmax", {scores});
  detail::on_backward(y, [yn = y.node(), xn = scores.node(), Bt, L] {
    auto& g = xn->ensure_grad();
    for (std::size_t r = 0; r < Bt * L; ++r) {
      const T* yr = yn->data.data() + r * L;
      const T* gr = yn->grad.data() + r * L;
      T dot{0};
      for (std::size_t j = 0; j < L; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j < L; ++j) g[r * L + j] += yr[j] * (gr[j] - dot);
    }
  });
  return y;
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = static_cast<T>(1e-12)) {
  const std::size_t D = x.rank() ? x.dim(-1) : 0;
  detail::require(D > 0, "layer_norm: empty normalization axis");
  detail::require(gamma.size() == D && beta.size() == D,
                  "layer_norm: affine parameters must have extent " + std::to_string(D));
  if (!(eps > T{0})) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t R = x.size() / D;
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(R);
  for (std::size_t r = 0; r < R; ++r) {
    const T* in = x.data().data() + r * D;
    T mean{0};
    for (std::size_t d = 0; d < D; ++d) mean += in[d];
    mean /= static_cast<T>(D);
    T var{0};
    for (std::size_t d = 0; d < D; ++d) var += (in[d] - mean) * (in[d] - mean);
    var /= static_cast<T>(D);
    const T inv = T{1} / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t d = 0; d < D; ++d) {
      const T h = (in[d] - mean) * inv;
      xhat[r * D + d] = h;
      out[r * D + d] = gamma[d] * h + beta[d];
    }
  }
  Tensor<T> y = detail::make_result<T>(x.shape(), std::move(out), "layer_norm", {x, gamma, beta});
  detail::on_backward(y, [yn = y.node(), xn = x.node(), gn = gamma.node(), bn = beta.node(),
                          xhat = std::move(xhat), inv_std = std::move(inv_std), R, D] {
    std::vector<T> dxhat(D);
    for (std::size_t r = 0; r < R; ++r) {
      const T* gr = yn->grad.data() + r * D;
      const T* hr = xhat.data() + r * D;
      if (gn->requires_grad) {
        auto& gg = gn->ensure_grad();
        for (std::size_t d = 0; d < D; ++d) gg[d] += gr[d] * hr[d];
      }
      if (bn->requires_grad) {
        auto& gb = bn->ensure_grad();
        for (std::size_t d = 0; d < D; ++d) gb[d] += gr[d];
      }
      if (xn->requires_grad) {
        T s1{0}, s2{0};
        for (std::size_t d = 0; d < D; ++d) {
          dxhat[d] = gr[d] * gn->data[d];
          s1 += dxhat[d];
          s2 += dxhat[d] * hr[d];
        }
        auto& gx = xn->ensure_grad();
        const T k = inv_std[r] / static_cast<T>(D);
        for (std::size_t d = 0; d < D; ++d) {
          gx[r * D + d] += k * (static_cast<T>(D) * dxhat[d] - s1 - hr[d] * s2);
        }
      }
    }
  });
  return y;
}

// Inverted dropout: survivors are scaled by 1/(1-p). Identity when p == 0
// or outside training.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.size());
  for (auto& m : mask) m = rng.uniform() < p ? T{0} : keep_scale;
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
  Tensor<T> y = detail::make_result<T>(x.shape(), std::move(out), "dropout", {x});
  detail::on_backward(y, [yn = y.node(), xn = x.node(), mask = std::move(mask)] {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i] * mask[i];
  });
  return y;
}

// ------------------------------------------------------------ sequence ops

// out[b,t,c] = bias[c] + sum_k w[c,k] * x[b, t-K+1+k, c]; out-of-range x is 0.
template <class T>
Tensor<T> causal_depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& w,
                                  const Tensor<T>& bias) {
  if (w.rank() != 2 || w.dim(1) < 1) throw ConfigError("conv1d: kernel must be [C, K] with K >= 1");
  detail::require(x.rank() == 3 && x.dim(2) == w.dim(0) && bias.size() == w.dim(0),
                  "conv1d: x " + to_string(x.shape()) + ", w " + to_string(w.shape()) +
                      ", bias " + to_string(bias.shape()));
  const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2), K = w.dim(1);
  std::vector<T> out(x.size());
  const T* X = x.data().data();
  const T* W = w.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < L; ++t) {
      T* o = out.data() + (b * L + t) * C;
      for (std::size_t c = 0; c < C; ++c) o[c] = bias[c];
      for (std::size_t k = 0; k < K; ++k) {
        // source position t - (K-1) + k
        if (t + k + 1 < K) continue;
        const std::size_t s = t + k + 1 - K;
        const T* xs = X + (b * L + s) * C;
        for (std::size_t c = 0; c < C; ++c) o[c] += W[c * K + k] * xs[c];
      }
    }
  }
  OpCounter::add(static_cast<std::uint64_t>(B) * L * C * K);
  Tensor<T> y = detail::make_result<T>(x.shape(), std::move(out), "causal_conv1d", {x, w, bias});
  detail::on_backward(y, [yn = y.node(), xn = x.node(), wn = w.node(), bn = bias.node(), B, L, C, K] {
    const T* G = yn->grad.data();
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (std::size_t r = 0; r < B * L; ++r) {
        for (std::size_t c = 0; c < C; ++c) gb[c] += G[r * C + c];
      }
    }
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t t = 0; t < L; ++t) {
        const T* gt = G + (b * L + t) * C;
        for (std::size_t k = 0; k < K; ++k) {
          if (t + k + 1 < K) continue;
          const std::size_t s = t + k + 1 - K;
          if (wn->requires_grad) {
            auto& gw = wn->ensure_grad();
            const T* xs = xn->data.data() + (b * L + s) * C;
            for (std::size_t c = 0; c < C; ++c) gw[c * K + k] += gt[c] * xs[c];
          }
          if (xn->requires_grad) {
            T* gx = xn->ensure_grad().data() + (b * L + s) * C;
            for (std::size_t c = 0; c < C; ++c) gx[c] += gt[c] * wn->data[c * K + k];
          }
        }
      }
    }
  });
  return y;
}

// Mean over rows of -log softmax(logits)[target].
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets) {
  detail::require(logits.rank() == 2 && logits.dim(0) == targets.size(),
                  "cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                      std::to_string(targets.size()) + " targets");
  const std::size_t B = logits.dim(0), V = logits.dim(1);
  std::vector<T> probs(logits.size());
  T loss{0};
  for (std::size_t r = 0; r < B; ++r) {
    if (targets[r] >= V) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[r]) +
                       " outside [0, " + std::to_string(V) + ")");
    }
    const T* in = logits.data().data() + r * V;
    T* pr = probs.data() + r * V;
    const T mx = *std::max_element(in, in + V);
    T z{0};
    for (std::size_t v = 0; v < V; ++v) z += (pr[v] = std::exp(in[v] - mx));
    for (std::size_t v = 0; v < V; ++v) pr[v] /= z;
    loss += (mx + std::log(z)) - in[targets[r]];
  }
  loss /= static_cast<T>(B);
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  Tensor<T> y = detail::make_result<T>({1}, {loss}, "cross_entropy", {logits});
  detail::on_backward(y, [yn = y.node(), ln = logits.node(), probs = std::move(probs),
                          tgt = std::move(tgt), B, V] {
    auto& g = ln->ensure_grad();
    const T s = yn->grad[0] / static_cast<T>(B);
    for (std::size_t r = 0; r < B; ++r) {
      for (std::size_t v = 0; v < V; ++v) {
        g[r * V + v] += s * (probs[r * V + v] - (v == tgt[r] ? T{1} : T{0}));
      }
    }
  });
  return y;
}

// table[V, D] gathered at indices (row-major over `index_shape`) -> [..., D].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::size_t> indices,
                    Shape index_shape) {
  detail::require(table.rank() == 2, "embedding: table must be rank 2");
  detail::require(numel(index_shape) == indices.size(), "embedding: index shape mismatch");
  const std::size_t V = table.dim(0), D = table.dim(1);
  std::vector<T> out(indices.size() * D);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= V) {
      throw IndexError("embedding: index " + std::to_string(indices[i]) +
                       " outside vocabulary of " + std::to_string(V));
    }
    std::copy_n(table.data().data() + indices[i] * D, D, out.data() + i * D);
  }
  index_shape.push_back(D);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  Tensor<T> y = detail::make_result<T>(std::move(index_shape), std::move(out), "embedding", {table});
  detail::on_backward(y, [yn = y.node(), tn = table.node(), idx = std::move(idx), D] {
    auto& g = tn->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t d = 0; d < D; ++d) g[idx[i] * D + d] += yn->grad[i * D + d];
    }
  });
  return y;
}

// Columns [begin, end) of the last axis.
template <class T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  const std::size_t C = x.dim(-1);
  detail::require(begin < end && end <= C, "slice_last: bad range");
  const std::size_t W = end - begin, R = x.size() / C;
  std::vector<T> out(R * W);
  for (std::size_t r = 0; r < R; ++r) {
    std::copy_n(x.data().data() + r * C + begin, W, out.data() + r * W);
  }
  Shape shape = x.shape();
  shape.back() = W;
  Tensor<T> y = detail::make_result<T>(std::move(shape), std::move(out), "slice_last", {x});
  detail::on_backward(y, [yn = y.node(), xn = x.node(), R, C, W, begin] {
    auto& g = xn->ensure_grad();
    for (std::size_t r = 0; r < R; ++r) {
      for (std::size_t j = 0; j < W; ++j) g[r * C + begin + j] += yn->grad[r * W + j];
    }
  });
  return y;
}

// x[B, L, D] -> x[:, L-1, :]
template <class T>
Tensor<T> take_last_position(const Tensor<T>& x) {
  detail::require(x.rank() == 3, "take_last_position: expected [B, L, D]");
  const std::size_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  std::vector<T> out(B * D);
  for (std::size_t b = 0; b < B; ++b) {
    std::copy_n(x.data().data() + (b * L + L - 1) * D, D, out.data() + b * D);
  }
  Tensor<T> y = detail::make_result<T>({B, D}, std::move(out), "take_last_position", {x});
  detail::on_backward(y, [yn = y.node(), xn = x.node(), B, L, D] {
    auto& g = xn->ensure_grad();
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t d = 0; d < D; ++d) g[(b * L + L - 1) * D + d] += yn->grad[b * D + d];
    }
  });
  return y;
}

// Zeroes the rows x[b, t, :] whose keep flag is 0; keep has B*L entries.
template <class T>
Tensor<T> mask_positions(const Tensor<T>& x, std::span<const std::uint8_t> keep) {
  detail::require(x.rank() == 3 && keep.size() == x.dim(0) * x.dim(1),
                  "mask_positions: mask does not match " + to_string(x.shape()));
  const std::size_t D = x.dim(2);
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    if (!keep[r]) std::fill_n(out.data() + r * D, D, T{0});
  }
  std::vector<std::uint8_t> k(keep.begin(), keep.end());
  Tensor<T> y = detail::make_result<T>(x.shape(), std::move(out), "mask_positions", {x});
  detail::on_backward(y, [yn = y.node(), xn = x.node(), k = std::move(k), D] {
    auto& g = xn->ensure_grad();
    for (std::size_t r = 0; r < k.size(); ++r) {
      if (!k[r]) continue;
      for (std::size_t d = 0; d < D; ++d) g[r * D + d] += yn->grad[r * D + d];
    }
  });
  return y;
}

// x[B, L, D] + pe[L, D] broadcast over the batch.
template <class T>
Tensor<T> add_positional(const Tensor<T>& x, const Tensor<T>& pe) {
  detail::require(x.rank() == 3 && pe.rank() == 2 && pe.dim(0) >= x.dim(1) &&
                      pe.dim(1) == x.dim(2),
                  "add_positional: x " + to_string(x.shape()) + ", pe " + to_string(pe.shape()));
  const std::size_t B = x.dim(0), LD = x.dim(1) * x.dim(2);
  std::vector<T> out(x.size());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < LD; ++i) out[b * LD + i] = x[b * LD + i] + pe[i];
  }
  Tensor<T> y = detail::make_result<T>(x.shape(), std::move(out), "add_positional", {x, pe});
  detail::on_backward(y, [yn = y.node(), xn = x.node(), pn = pe.node(), B, LD] {
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < LD; ++i) {
        const T g = yn->grad[b * LD + i];
        if (xn->requires_grad) xn->ensure_grad()[b * LD + i] += g;
        if (pn->requires_grad) pn->ensure_grad()[i] += g;
      }
    }
  });
  return y;
}

}  // namespace m4r
