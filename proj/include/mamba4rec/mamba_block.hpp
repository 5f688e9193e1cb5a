#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mamba4rec/errors.hpp"
#include "mamba4rec/ops.hpp"
#include "mamba4rec/rng.hpp"
#include "mamba4rec/ssm.hpp"
#include "mamba4rec/tensor.hpp"

namespace m4r {

struct BlockConfig {
  std::size_t d_model = 64;    // D
  std::size_t state_dim = 32;  // N
  std::size_t conv_kernel = 4; // K
  std::size_t expand = 2;      // E
  ScanMode scan = ScanMode::parallel;
  double dt_min = 1e-3;
  double dt_max = 1e-1;

  std::size_t inner() const { return expand * d_model; }

  void validate() const {
    if (d_model < 1 || state_dim < 1 || conv_kernel < 1 || expand < 1) {
      throw ConfigError("block extents d_model, state_dim, conv_kernel, expand must be >= 1");
    }
    if (!(dt_min > 0.0 && dt_min <= dt_max)) throw ConfigError("need 0 < dt_min <= dt_max");
  }
};

template <class T>
struct MambaBlockParams {
  Tensor<T> w_in;     // [D, 2*E*D], columns [0, ED) -> H_x, [ED, 2ED) -> H_z
  Tensor<T> conv_w;   // [E*D, K]
  Tensor<T> conv_b;   // [E*D]
  Tensor<T> w_b;      // [E*D, N]
  Tensor<T> w_c;      // [E*D, N]
  Tensor<T> w_dt;     // [E*D, 1]
  Tensor<T> dt_bias;  // [E*D]
  StateMatrix<T> state;
  Tensor<T> w_out;    // [E*D, D]

  template <class F>
  void for_each(F&& f) {
    f("w_in", w_in);
    f("conv_w", conv_w);
    f("conv_b", conv_b);
    f("w_b", w_b);
    f("w_c", w_c);
    f("w_dt", w_dt);
    f("dt_bias", dt_bias);
    f("a_log", state.a_log);
    f("w_out", w_out);
  }
};

namespace detail {

template <class T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng rng) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <class T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, const Rng& rng, const std::string& name) {
  return uniform_tensor<T>(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)),
                           rng.fork(name));
}

}  // namespace detail

// Inverse of softplus: the bias b with softplus(b) == dt.
inline double inverse_softplus(double dt) { return dt + std::log(-std::expm1(-dt)); }

// Each tensor draws from its own named substream of `rng`, so adding or
// removing a parameter elsewhere never shifts these values.
template <class T>
MambaBlockParams<T> init_block(const BlockConfig& cfg, const Rng& rng) {
  cfg.validate();
  const std::size_t D = cfg.d_model, ED = cfg.inner(), N = cfg.state_dim, K = cfg.conv_kernel;
  MambaBlockParams<T> p;
  p.w_in = detail::fan_in_uniform<T>({D, 2 * ED}, D, rng, "w_in");
  p.conv_w = detail::fan_in_uniform<T>({ED, K}, K, rng, "conv_w");
  p.conv_b = detail::fan_in_uniform<T>({ED}, K, rng, "conv_b");
  p.w_b = detail::fan_in_uniform<T>({ED, N}, ED, rng, "w_b");
  p.w_c = detail::fan_in_uniform<T>({ED, N}, ED, rng, "w_c");
  p.w_dt = detail::fan_in_uniform<T>({ED, 1}, ED, rng, "w_dt");
  // softplus(dt_bias) log-uniform in [dt_min, dt_max]
  Rng dt_rng = rng.fork("dt_bias");
  std::vector<T> bias(ED);
  const double lo = std::log(cfg.dt_min), hi = std::log(cfg.dt_max);
  for (auto& b : bias) b = static_cast<T>(inverse_softplus(std::exp(dt_rng.uniform(lo, hi))));
  p.dt_bias = Tensor<T>::from({ED}, std::move(bias), true);
  p.state = init_state_matrix<T>(ED, N);
  p.w_out = detail::fan_in_uniform<T>({ED, D}, ED, rng, "w_out");
  return p;
}

// Single bias-free projection split into the x branch and the gate branch.
template <class T>
std::pair<Tensor<T>, Tensor<T>> project_in(const Tensor<T>& h_in, const MambaBlockParams<T>& p) {
  detail::require(h_in.dim(-1) == p.w_in.dim(0),
                  "project_in: input width " + std::to_string(h_in.dim(-1)) +
                      " != d_model " + std::to_string(p.w_in.dim(0)));
  const std::size_t ED = p.w_in.dim(1) / 2;
  Tensor<T> both = matmul(h_in, p.w_in);
  return {slice_last(both, 0, ED), slice_last(both, ED, 2 * ED)};
}

template <class T>
struct SsmInputs {
  Tensor<T> b;      // [B, L, N]
  Tensor<T> c;      // [B, L, N]
  Tensor<T> delta;  // [B, L, E*D], strictly positive
};

// B and C by linear maps; delta = softplus(dt_bias + broadcast(h_conv * w_dt)).
template <class T>
SsmInputs<T> generate_ssm_params(const Tensor<T>& h_conv, const MambaBlockParams<T>& p) {
  Tensor<T> dt = matmul(h_conv, p.w_dt);  // [B, L, 1]
  return {matmul(h_conv, p.w_b), matmul(h_conv, p.w_c), softplus(broadcast_add(dt, p.dt_bias))};
}

// Intermediate tensors of one block evaluation, kept for inspection.
template <class T>
struct BlockTrace {
  Tensor<T> h_x, h_z, h_conv, h_y, h_gated;
  SsmInputs<T> ssm;
};

// Gated selective-SSM block: [B, L, D] -> [B, L, D].
//
// `keep` (optional, B*L flags) marks real positions. Padded positions are
// zeroed on the block input and after the convolution, so they add nothing
// to the state and the result at real positions does not depend on how
// much left padding precedes them.
template <class T>
Tensor<T> mamba_block_forward(const Tensor<T>& h_in, const MambaBlockParams<T>& p,
                              std::span<const std::uint8_t> keep = {},
                              ScanMode mode = ScanMode::parallel,
                              BlockTrace<T>* trace = nullptr) {
  detail::require(h_in.rank() == 3, "mamba_block_forward: expected [B, L, D], got " +
                                        to_string(h_in.shape()));
  Tensor<T> x_in = keep.empty() ? h_in : mask_positions(h_in, keep);
  auto [h_x, h_z] = project_in(x_in, p);
  Tensor<T> h_conv = silu(causal_depthwise_conv1d(h_x, p.conv_w, p.conv_b));
  if (!keep.empty()) h_conv = mask_positions(h_conv, keep);
  SsmInputs<T> s = generate_ssm_params(h_conv, p);
  Tensor<T> h_y = selective_ssm(h_conv, s.delta, p.state.a_log, s.b, s.c, mode);
  Tensor<T> gated = mul(h_y, silu(h_z));
  Tensor<T> out = matmul(gated, p.w_out);
  if (trace) *trace = {h_x, h_z, h_conv, h_y, gated, s};
  return out;
}

}  // namespace m4r
