#pragma once

// Discretized selective state-space recurrence with diagonal state matrix.
//
// Per channel c and state index n:
//   h_t[n] = a_bar[t,c,n] * h_{t-1}[n] + b_bar_x[t,c,n],   h_{-1} = 0
//   y[t,c] = sum_n c[t,n] * h_t[n]
// with zero-order-hold discretization a_bar = exp(delta*A),
// b_bar = (exp(delta*A) - 1) / A * B.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mamba4rec/errors.hpp"
#include "mamba4rec/ops.hpp"
#include "mamba4rec/parallel.hpp"
#include "mamba4rec/tensor.hpp"

namespace m4r {

enum class ScanMode { sequential, parallel };

inline constexpr std::size_t kDefaultScanChunk = 128;

// A = -exp(a_log), so A < 0 no matter how a_log is updated.
template <class T>
struct StateMatrix {
  Tensor<T> a_log;  // [C, N]

  std::size_t channels() const { return a_log.dim(0); }
  std::size_t state_dim() const { return a_log.dim(1); }
  Tensor<T> a() const { return neg_exp(a_log); }
};

// S4D-real initialization: A[c, n] = -(n + 1) for every channel.
template <class T>
StateMatrix<T> init_state_matrix(std::size_t channels, std::size_t state_dim) {
  if (channels < 1 || state_dim < 1) throw ConfigError("state matrix extents must be >= 1");
  std::vector<T> v(channels * state_dim);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t n = 0; n < state_dim; ++n) {
      v[c * state_dim + n] = static_cast<T>(std::log(static_cast<double>(n + 1)));
    }
  }
  return {Tensor<T>::from({channels, state_dim}, std::move(v), true)};
}

// --------------------------------------------------------------- monoid

// Affine map h -> a*h + b. Composition "first e1 then e2" is
// (a1*a2, a2*b1 + b2), which is associative.
template <class T>
struct ScanElement {
  T a{1};
  T b{0};

  friend bool operator==(const ScanElement&, const ScanElement&) = default;
};

template <class T>
constexpr ScanElement<T> combine(const ScanElement<T>& first, const ScanElement<T>& second) {
  return {first.a * second.a, second.a * first.b + second.b};
}

// Work-efficient (up-sweep / down-sweep) inclusive scan in place.
// Element i becomes combine(e_0, ..., e_i); its b is the recurrence state h_i.
template <class T>
void inclusive_scan_tree(std::span<ScanElement<T>> elems) {
  const std::size_t n = elems.size();
  if (n < 2) return;
  std::size_t size = 1;
  while (size < n) size <<= 1;
  std::vector<ScanElement<T>> tree(size);  // identity-padded
  std::copy(elems.begin(), elems.end(), tree.begin());
  // up-sweep: tree[k] holds the reduction of its subtree
  for (std::size_t stride = 1; stride < size; stride <<= 1) {
    for (std::size_t i = 2 * stride - 1; i < size; i += 2 * stride) {
      tree[i] = combine(tree[i - stride], tree[i]);
    }
  }
  // down-sweep producing an exclusive scan
  tree[size - 1] = ScanElement<T>{};
  for (std::size_t stride = size / 2; stride >= 1; stride >>= 1) {
    for (std::size_t i = 2 * stride - 1; i < size; i += 2 * stride) {
      const ScanElement<T> left = tree[i - stride];
      tree[i - stride] = tree[i];
      tree[i] = combine(tree[i], left);
    }
    if (stride == 1) break;
  }
  for (std::size_t i = 0; i < n; ++i) elems[i] = combine(tree[i], elems[i]);
}

namespace detail {

// h[i] = a[i] * h[i-1] + u[i] for i in [0, len), h[-1] = 0. Elements are
// `stride` apart so a [t][n] buffer can be scanned lane by lane.
template <class T>
void linear_scan_sequential(const T* a, const T* u, T* h, std::size_t len, std::size_t stride) {
  T state{0};
  for (std::size_t i = 0; i < len; ++i) {
    state = a[i * stride] * state + u[i * stride];
    h[i * stride] = state;
  }
}

// Same recurrence evaluated in carry-passing chunks:
//   1. each chunk scans locally from a zero state and records the running
//      product of its a's (independent across chunks),
//   2. chunk carries are chained with the monoid combine,
//   3. each element is corrected by running_product * incoming carry.
// Phases 1 and 3 have no cross-chunk dependency.
template <class T>
void linear_scan_chunked(const T* a, const T* u, T* h, std::size_t len, std::size_t stride,
                         std::size_t chunk, std::vector<T>& prod) {
  if (len == 0) return;
  if (chunk == 0) chunk = kDefaultScanChunk;
  prod.resize(len);
  const std::size_t chunks = (len + chunk - 1) / chunk;
  for (std::size_t j = 0; j < chunks; ++j) {
    const std::size_t lo = j * chunk, hi = std::min(len, lo + chunk);
    T state{0}, p{1};
    for (std::size_t i = lo; i < hi; ++i) {
      state = a[i * stride] * state + u[i * stride];
      p *= a[i * stride];
      h[i * stride] = state;
      prod[i] = p;
    }
  }
  ScanElement<T> carry{T{1}, T{0}};
  for (std::size_t j = 0; j < chunks; ++j) {
    const std::size_t lo = j * chunk, hi = std::min(len, lo + chunk);
    const T incoming = carry.b;
    carry = combine(carry, ScanElement<T>{prod[hi - 1], h[(hi - 1) * stride]});
    if (j == 0) continue;
    for (std::size_t i = lo; i < hi; ++i) h[i * stride] += prod[i] * incoming;
  }
}

template <class T>
void linear_scan(ScanMode mode, const T* a, const T* u, T* h, std::size_t len,
                 std::size_t stride, std::size_t chunk, std::vector<T>& scratch) {
  if (mode == ScanMode::sequential) {
    linear_scan_sequential(a, u, h, len, stride);
  } else {
    linear_scan_chunked(a, u, h, len, stride, chunk, scratch);
  }
}

// `width` independent recurrences stored row-major [len][width], scanned
// together so the inner loop runs over contiguous memory. Same arithmetic as
// the single-lane scans above.
template <class T>
void linear_scan_lanes(ScanMode mode, const T* a, const T* u, T* h, std::size_t len,
                       std::size_t width, std::size_t chunk, std::vector<T>& scratch) {
  if (len == 0) return;
  if (mode == ScanMode::sequential) chunk = len;
  if (chunk == 0) chunk = kDefaultScanChunk;
  const bool chunked = chunk < len;
  if (chunked) scratch.resize(len * width + 2 * width);
  T* prod = chunked ? scratch.data() : nullptr;
  for (std::size_t lo = 0; lo < len; lo += chunk) {
    const std::size_t hi = std::min(len, lo + chunk);
    for (std::size_t n = 0; n < width; ++n) h[lo * width + n] = u[lo * width + n];
    if (chunked) {
      for (std::size_t n = 0; n < width; ++n) prod[lo * width + n] = a[lo * width + n];
    }
    for (std::size_t i = lo + 1; i < hi; ++i) {
      const T* ai = a + i * width;
      const T* ui = u + i * width;
      const T* hp = h + (i - 1) * width;
      T* hi_row = h + i * width;
      for (std::size_t n = 0; n < width; ++n) hi_row[n] = ai[n] * hp[n] + ui[n];
      if (chunked) {
        const T* pp = prod + (i - 1) * width;
        T* pi = prod + i * width;
        for (std::size_t n = 0; n < width; ++n) pi[n] = pp[n] * ai[n];
      }
    }
  }
  if (!chunked) return;
  T* carry = scratch.data() + len * width;
  T* incoming = carry + width;
  std::fill(carry, carry + width, T{0});
  for (std::size_t lo = 0; lo < len; lo += chunk) {
    const std::size_t hi = std::min(len, lo + chunk);
    std::copy(carry, carry + width, incoming);
    const T* pl = prod + (hi - 1) * width;
    const T* hl = h + (hi - 1) * width;
    for (std::size_t n = 0; n < width; ++n) carry[n] = pl[n] * carry[n] + hl[n];
    if (lo == 0) continue;
    for (std::size_t i = lo; i < hi; ++i) {
      const T* pi = prod + i * width;
      T* hr = h + i * width;
      for (std::size_t n = 0; n < width; ++n) hr[n] += pi[n] * incoming[n];
    }
  }
}

// Lane-wise adjoint g[i] = e[i] + a[i+1] * g[i+1] over [len][width] buffers.
template <class T>
void adjoint_scan_lanes(ScanMode mode, const T* a, const T* e, T* g, std::size_t len,
                        std::size_t width, std::size_t chunk, std::vector<T>& ra,
                        std::vector<T>& re, std::vector<T>& rg, std::vector<T>& scratch) {
  ra.resize(len * width);
  re.resize(len * width);
  rg.resize(len * width);
  for (std::size_t s = 0; s < len; ++s) {
    const std::size_t i = len - 1 - s;
    if (s == 0) {
      std::fill_n(ra.begin(), width, T{0});
    } else {
      std::copy_n(a + (i + 1) * width, width, ra.begin() + s * width);
    }
    std::copy_n(e + i * width, width, re.begin() + s * width);
  }
  linear_scan_lanes(mode, ra.data(), re.data(), rg.data(), len, width, chunk, scratch);
  for (std::size_t s = 0; s < len; ++s) {
    std::copy_n(rg.begin() + s * width, width, g + (len - 1 - s) * width);
  }
}

// Reverse-time adjoint g[i] = e[i] + a[i+1] * g[i+1], g[len] = 0, computed
// with the forward scan on reversed buffers.
template <class T>
void adjoint_scan(ScanMode mode, const T* a, std::size_t a_stride, const T* e, T* g,
                  std::size_t len, std::size_t stride, std::size_t chunk, std::vector<T>& ra,
                  std::vector<T>& re, std::vector<T>& rg, std::vector<T>& scratch) {
  ra.resize(len);
  re.resize(len);
  rg.resize(len);
  for (std::size_t s = 0; s < len; ++s) {
    const std::size_t i = len - 1 - s;
    ra[s] = s == 0 ? T{0} : a[(i + 1) * a_stride];
    re[s] = e[i * stride];
  }
  linear_scan(mode, ra.data(), re.data(), rg.data(), len, 1, chunk, scratch);
  for (std::size_t s = 0; s < len; ++s) g[(len - 1 - s) * stride] = rg[s];
}

template <class T>
struct ZohCoeffs {
  T a_bar;  // exp(z)
  T phi;    // (exp(z) - 1) / A, so b_bar = phi * B
  // derivatives with respect to delta and A
  T da_bar_ddelta, da_bar_dA, dphi_ddelta, dphi_dA;
};

// expm1(z) / z for |z| <= 0.5 by its Taylor series; truncation error is
// below the type's rounding (9 terms for float, 16 for double).
template <class T>
T expm1_over_z(T z) {
  constexpr int terms = sizeof(T) <= 4 ? 9 : 16;
  T r{1};
  for (int k = terms; k >= 2; --k) r = T{1} + z * r / static_cast<T>(k);
  return r;
}

// a_bar = exp(z) and phi = (exp(z) - 1) / A for z = delta * A.
template <class T>
void zoh_forward(T delta, T A, T& a_bar, T& phi) {
  const T z = delta * A;
  if (std::abs(z) <= T{0.5}) {
    // (e^z - 1)/A = delta * expm1(z)/z, accurate down to z = 0
    const T e = expm1_over_z(z);
    phi = delta * e;
    a_bar = T{1} + z * e;
  } else {
    a_bar = std::exp(z);
    // no cancellation in exp(z) - 1 for z < -0.5
    phi = (z < T{0} ? a_bar - T{1} : std::expm1(z)) / A;
  }
}

// Derivatives from already computed a_bar and phi; no transcendental calls.
template <class T>
void zoh_derivatives(T delta, T A, ZohCoeffs<T>& k) {
  const T z = delta * A;
  k.da_bar_ddelta = A * k.a_bar;
  k.da_bar_dA = delta * k.a_bar;
  k.dphi_ddelta = k.a_bar;
  // d phi / dA = delta^2 * (z e^z - (e^z - 1)) / z^2, and e^z - 1 = A * phi
  T g;
  if (std::abs(z) < T{1e-2}) {
    g = T{0.5} + z * (T{1} / T{3} + z * (T{1} / T{8} + z / T{30}));
  } else {
    g = (z * k.a_bar - A * k.phi) / (z * z);
  }
  k.dphi_dA = delta * delta * g;
}

template <class T>
ZohCoeffs<T> zoh(T delta, T A) {
  ZohCoeffs<T> k{};
  zoh_forward(delta, A, k.a_bar, k.phi);
  zoh_derivatives(delta, A, k);
  return k;
}

}  // namespace detail

// ------------------------------------------------------------ discretize

template <class T>
struct Discretized {
  Tensor<T> a_bar;  // [B, L, C, N]
  Tensor<T> b_bar;  // [B, L, C, N]
};

// Zero-order hold for diagonal A. delta[B,L,C] > 0, a[C,N], b[B,L,N].
template <class T>
Discretized<T> discretize(const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(delta.rank() == 3 && a.rank() == 2 && b.rank() == 3 &&
                      a.dim(0) == delta.dim(2) && b.dim(0) == delta.dim(0) &&
                      b.dim(1) == delta.dim(1) && b.dim(2) == a.dim(1),
                  "discretize: delta " + to_string(delta.shape()) + ", A " +
                      to_string(a.shape()) + ", B " + to_string(b.shape()));
  const std::size_t Bt = delta.dim(0), L = delta.dim(1), C = delta.dim(2), N = a.dim(1);
  for (const T d : delta.data()) {
    if (!(d > T{0})) throw ContractError("discretize: step size delta must be positive");
  }
  std::vector<T> abar(Bt * L * C * N), bbar(Bt * L * C * N);
  for (std::size_t bl = 0; bl < Bt * L; ++bl) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t n = 0; n < N; ++n) {
        const auto k = detail::zoh(delta[bl * C + c], a[c * N + n]);
        abar[(bl * C + c) * N + n] = k.a_bar;
        bbar[(bl * C + c) * N + n] = k.phi * b[bl * N + n];
      }
    }
  }
  const Shape shape{Bt, L, C, N};
  Tensor<T> ya = detail::make_result<T>(shape, std::move(abar), "discretize_a", {delta, a});
  Tensor<T> yb = detail::make_result<T>(shape, std::move(bbar), "discretize_b", {delta, a, b});
  detail::on_backward(ya, [yn = ya.node(), dn = delta.node(), an = a.node(), Bt, L, C, N] {
    for (std::size_t bl = 0; bl < Bt * L; ++bl) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t n = 0; n < N; ++n) {
          const T g = yn->grad[(bl * C + c) * N + n];
          const auto k = detail::zoh(dn->data[bl * C + c], an->data[c * N + n]);
          if (dn->requires_grad) dn->ensure_grad()[bl * C + c] += g * k.da_bar_ddelta;
          if (an->requires_grad) an->ensure_grad()[c * N + n] += g * k.da_bar_dA;
        }
      }
    }
  });
  detail::on_backward(yb, [yn = yb.node(), dn = delta.node(), an = a.node(), bn = b.node(), Bt, L, C, N] {
    for (std::size_t bl = 0; bl < Bt * L; ++bl) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t n = 0; n < N; ++n) {
          const T g = yn->grad[(bl * C + c) * N + n];
          const auto k = detail::zoh(dn->data[bl * C + c], an->data[c * N + n]);
          const T bv = bn->data[bl * N + n];
          if (dn->requires_grad) dn->ensure_grad()[bl * C + c] += g * k.dphi_ddelta * bv;
          if (an->requires_grad) an->ensure_grad()[c * N + n] += g * k.dphi_dA * bv;
          if (bn->requires_grad) bn->ensure_grad()[bl * N + n] += g * k.phi;
        }
      }
    }
  });
  return {ya, yb};
}

// Inputs of the scan with B_bar * x already formed.
template <class T>
struct DiscretizedParams {
  Tensor<T> a_bar;    // [B, L, C, N]
  Tensor<T> b_bar_x;  // [B, L, C, N]
  Tensor<T> c;        // [B, L, N]

  std::size_t batch() const { return a_bar.dim(0); }
  std::size_t length() const { return a_bar.dim(1); }
  std::size_t channels() const { return a_bar.dim(2); }
  std::size_t state_dim() const { return a_bar.dim(3); }
};

// b_bar[B,L,C,N] scaled by x[B,L,C] broadcast over the state axis.
template <class T>
Tensor<T> scale_by_input(const Tensor<T>& b_bar, const Tensor<T>& x) {
  detail::require(b_bar.rank() == 4 && x.rank() == 3 && x.dim(0) == b_bar.dim(0) &&
                      x.dim(1) == b_bar.dim(1) && x.dim(2) == b_bar.dim(2),
                  "scale_by_input: b_bar " + to_string(b_bar.shape()) + ", x " + to_string(x.shape()));
  const std::size_t R = x.size(), N = b_bar.dim(3);
  std::vector<T> out(b_bar.size());
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t n = 0; n < N; ++n) out[r * N + n] = b_bar[r * N + n] * x[r];
  }
  Tensor<T> y = detail::make_result<T>(b_bar.shape(), std::move(out), "scale_by_input", {b_bar, x});
  detail::on_backward(y, [yn = y.node(), bn = b_bar.node(), xn = x.node(), R, N] {
    for (std::size_t r = 0; r < R; ++r) {
      for (std::size_t n = 0; n < N; ++n) {
        const T g = yn->grad[r * N + n];
        if (bn->requires_grad) bn->ensure_grad()[r * N + n] += g * xn->data[r];
        if (xn->requires_grad) xn->ensure_grad()[r] += g * bn->data[r * N + n];
      }
    }
  });
  return y;
}

template <class T>
DiscretizedParams<T> form_scan_inputs(const Discretized<T>& d, const Tensor<T>& x,
                                      const Tensor<T>& c) {
  return {d.a_bar, scale_by_input(d.b_bar, x), c};
}

// ------------------------------------------------------------------ scans

namespace detail {

template <class T>
void check_scan_params(const DiscretizedParams<T>& p) {
  require(p.a_bar.rank() == 4 && p.b_bar_x.shape() == p.a_bar.shape() && p.c.rank() == 3 &&
              p.c.dim(0) == p.a_bar.dim(0) && p.c.dim(1) == p.a_bar.dim(1) &&
              p.c.dim(2) == p.a_bar.dim(3),
          "selective_scan: a_bar " + to_string(p.a_bar.shape()) + ", b_bar_x " +
              to_string(p.b_bar_x.shape()) + ", c " + to_string(p.c.shape()));
}

// Scan over materialized discretized parameters. States are kept for the
// backward pass; lanes are (batch, channel, state) triples.
template <class T>
Tensor<T> selective_scan_impl(const DiscretizedParams<T>& p, ScanMode mode, std::size_t chunk) {
  check_scan_params(p);
  const std::size_t Bt = p.batch(), L = p.length(), C = p.channels(), N = p.state_dim();
  const std::size_t lane_stride = C * N;  // distance between t and t+1
  std::vector<T> h(p.a_bar.size());
  std::vector<T> y(Bt * L * C, T{0});
  const T* A = p.a_bar.data().data();
  const T* U = p.b_bar_x.data().data();
  parallel_for(Bt * C, [&](std::size_t lo, std::size_t hi) {
    std::vector<T> scratch;
    for (std::size_t lane = lo; lane < hi; ++lane) {
      const std::size_t b = lane / C, c = lane % C;
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t off = b * L * C * N + c * N + n;
        linear_scan(mode, A + off, U + off, h.data() + off, L, lane_stride, chunk, scratch);
      }
      for (std::size_t t = 0; t < L; ++t) {
        const T* ct = p.c.data().data() + (b * L + t) * N;
        const T* ht = h.data() + ((b * L + t) * C + c) * N;
        T s{0};
        for (std::size_t n = 0; n < N; ++n) s += ct[n] * ht[n];
        y[(b * L + t) * C + c] = s;
      }
    }
  }, 4);
  OpCounter::add(static_cast<std::uint64_t>(Bt) * L * C * N * 2);
  Tensor<T> out = make_result<T>({Bt, L, C}, std::move(y),
                                 mode == ScanMode::sequential ? "scan_sequential" : "scan_parallel",
                                 {p.a_bar, p.b_bar_x, p.c});
  on_backward(out, [yn = out.node(), an = p.a_bar.node(), un = p.b_bar_x.node(), cn = p.c.node(),
                    h = std::move(h), mode, chunk, Bt, L, C, N] {
    const std::size_t lane_stride = C * N;
    std::vector<T> e(L), g(L), ra, re, rg, scratch;
    for (std::size_t b = 0; b < Bt; ++b) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t off = b * L * C * N + c * N + n;
          for (std::size_t t = 0; t < L; ++t) {
            const T gy = yn->grad[(b * L + t) * C + c];
            e[t] = gy * cn->data[(b * L + t) * N + n];
            if (cn->requires_grad) {
              cn->ensure_grad()[(b * L + t) * N + n] += gy * h[off + t * lane_stride];
            }
          }
          adjoint_scan(mode, an->data.data() + off, lane_stride, e.data(), g.data(), L, 1, chunk,
                       ra, re, rg, scratch);
          for (std::size_t t = 0; t < L; ++t) {
            const std::size_t i = off + t * lane_stride;
            if (un->requires_grad) un->ensure_grad()[i] += g[t];
            if (an->requires_grad && t > 0) an->ensure_grad()[i] += g[t] * h[i - lane_stride];
          }
        }
      }
    }
  });
  return out;
}

}  // namespace detail

// Strictly O(L) recurrence per (batch, channel, state) lane.
template <class T>
Tensor<T> selective_scan_sequential(const DiscretizedParams<T>& params) {
  return detail::selective_scan_impl(params, ScanMode::sequential, 0);
}

// Chunked carry-passing scan; chunk bodies are independent and can be
// evaluated concurrently.
template <class T>
Tensor<T> selective_scan_parallel(const DiscretizedParams<T>& params,
                                  std::size_t chunk = kDefaultScanChunk) {
  return detail::selective_scan_impl(params, ScanMode::parallel, chunk);
}

// ------------------------------------------------------------- fused path

// Discretization, B_bar*x, scan and C-readout in one op. Discretized values
// and states are recomputed lane by lane in backward instead of stored, so
// memory stays O(B*L*(C+N)) rather than O(B*L*C*N).
//   x[B,L,C], delta[B,L,C] > 0, a_log[C,N], b[B,L,N], c[B,L,N] -> y[B,L,C]
template <class T>
Tensor<T> selective_ssm(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& a_log,
                        const Tensor<T>& b, const Tensor<T>& c,
                        ScanMode mode = ScanMode::parallel,
                        std::size_t chunk = kDefaultScanChunk) {
  detail::require(x.rank() == 3 && delta.shape() == x.shape() && a_log.rank() == 2 &&
                      a_log.dim(0) == x.dim(2) && b.rank() == 3 && c.shape() == b.shape() &&
                      b.dim(0) == x.dim(0) && b.dim(1) == x.dim(1) && b.dim(2) == a_log.dim(1),
                  "selective_ssm: x " + to_string(x.shape()) + ", delta " +
                      to_string(delta.shape()) + ", A " + to_string(a_log.shape()) + ", B " +
                      to_string(b.shape()) + ", C " + to_string(c.shape()));
  const std::size_t Bt = x.dim(0), L = x.dim(1), C = x.dim(2), N = a_log.dim(1);
  for (const T d : delta.data()) {
    if (!(d > T{0})) throw ContractError("selective_ssm: step size delta must be positive");
  }
  std::vector<T> y(Bt * L * C, T{0});

  std::vector<T> a_diag(C * N);
  for (std::size_t i = 0; i < a_diag.size(); ++i) a_diag[i] = -std::exp(a_log.data()[i]);

  // Fills abar/phi/u/h buffers laid out [t][n] for lane (b, c).
  auto lane_forward = [L, N, mode, chunk](const T* X, const T* Dl, const T* Ad, const T* Bm,
                                          std::size_t b, std::size_t c, std::size_t C,
                                          std::vector<T>& abar, std::vector<T>& phi,
                                          std::vector<T>& u, std::vector<T>& h,
                                          std::vector<T>& scratch) {
    const T* A = Ad + c * N;
    for (std::size_t t = 0; t < L; ++t) {
      const T d = Dl[(b * L + t) * C + c];
      const T xv = X[(b * L + t) * C + c];
      const T* bt = Bm + (b * L + t) * N;
      for (std::size_t n = 0; n < N; ++n) {
        detail::zoh_forward(d, A[n], abar[t * N + n], phi[t * N + n]);
        u[t * N + n] = phi[t * N + n] * bt[n] * xv;
      }
    }
    detail::linear_scan_lanes(mode, abar.data(), u.data(), h.data(), L, N, chunk, scratch);
  };

  parallel_for(Bt * C, [&](std::size_t lo, std::size_t hi) {
    std::vector<T> abar(L * N), phi(L * N), u(L * N), h(L * N), scratch;
    for (std::size_t lane = lo; lane < hi; ++lane) {
      const std::size_t bi = lane / C, ci = lane % C;
      lane_forward(x.data().data(), delta.data().data(), a_diag.data(), b.data().data(), bi, ci,
                   C, abar, phi, u, h, scratch);
      for (std::size_t t = 0; t < L; ++t) {
        const T* ct = c.data().data() + (bi * L + t) * N;
        T s{0};
        for (std::size_t n = 0; n < N; ++n) s += ct[n] * h[t * N + n];
        y[(bi * L + t) * C + ci] = s;
      }
    }
  }, 4);
  // per element: a_bar*h + u, phi*B*x, C readout
  OpCounter::add(static_cast<std::uint64_t>(Bt) * L * C * N * 4);

  Tensor<T> out = detail::make_result<T>({Bt, L, C}, std::move(y), "selective_ssm",
                                         {x, delta, a_log, b, c});
  detail::on_backward(out, [yn = out.node(), xn = x.node(), dn = delta.node(), an = a_log.node(),
                            bn = b.node(), cn = c.node(), a_diag = std::move(a_diag), lane_forward, Bt,
                            L, C, N, mode, chunk] {
    // Batch rows are processed in fixed blocks so the reduction order of the
    // shared A gradient does not depend on the number of threads.
    constexpr std::size_t kBlock = 8;
    const std::size_t blocks = (Bt + kBlock - 1) / kBlock;
    std::vector<std::vector<T>> da_part(blocks);
    // grads of x/delta/b/c are per batch row, so blocks write disjoint ranges
    if (xn->requires_grad) xn->ensure_grad();
    if (dn->requires_grad) dn->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    if (cn->requires_grad) cn->ensure_grad();
    parallel_for(blocks, [&](std::size_t lo, std::size_t hi) {
      std::vector<T> abar(L * N), phi(L * N), u(L * N), h(L * N), e(L * N), g(L * N);
      std::vector<T> ra, re, rg, scratch;
      for (std::size_t blk = lo; blk < hi; ++blk) {
        auto& da = da_part[blk];
        if (an->requires_grad) da.assign(C * N, T{0});
        for (std::size_t bi = blk * kBlock; bi < std::min(Bt, (blk + 1) * kBlock); ++bi) {
          for (std::size_t ci = 0; ci < C; ++ci) {
            lane_forward(xn->data.data(), dn->data.data(), a_diag.data(), bn->data.data(), bi,
                         ci, C, abar, phi, u, h, scratch);
            for (std::size_t t = 0; t < L; ++t) {
              const T gy = yn->grad[(bi * L + t) * C + ci];
              for (std::size_t n = 0; n < N; ++n) {
                e[t * N + n] = gy * cn->data[(bi * L + t) * N + n];
                if (cn->requires_grad) cn->grad[(bi * L + t) * N + n] += gy * h[t * N + n];
              }
            }
            detail::adjoint_scan_lanes(mode, abar.data(), e.data(), g.data(), L, N, chunk, ra, re,
                                       rg, scratch);
            for (std::size_t t = 0; t < L; ++t) {
              const std::size_t r = (bi * L + t) * C + ci;
              const T d = dn->data[r];
              const T xv = xn->data[r];
              T gx{0}, gd{0};
              for (std::size_t n = 0; n < N; ++n) {
                const T A = a_diag[ci * N + n];
                detail::ZohCoeffs<T> k{};
                k.a_bar = abar[t * N + n];
                k.phi = phi[t * N + n];
                detail::zoh_derivatives(d, A, k);
                const T du = g[t * N + n];
                const T da_bar = t > 0 ? du * h[(t - 1) * N + n] : T{0};
                const T bv = bn->data[(bi * L + t) * N + n];
                const T dphi = du * bv * xv;
                gx += du * k.phi * bv;
                gd += da_bar * k.da_bar_ddelta + dphi * k.dphi_ddelta;
                if (bn->requires_grad) bn->grad[(bi * L + t) * N + n] += du * k.phi * xv;
                if (an->requires_grad) {
                  // dA/da_log = A
                  da[ci * N + n] += (da_bar * k.da_bar_dA + dphi * k.dphi_dA) * A;
                }
              }
              if (xn->requires_grad) xn->grad[r] += gx;
              if (dn->requires_grad) dn->grad[r] += gd;
            }
          }
        }
      }
    }, 1);
    if (an->requires_grad) {
      auto& ga = an->ensure_grad();
      for (const auto& part : da_part) {
        for (std::size_t i = 0; i < part.size(); ++i) ga[i] += part[i];
      }
    }
  });
  return out;
}

}  // namespace m4r
