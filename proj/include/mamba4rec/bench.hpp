#pragma once

// Sequence-length scaling of one Mamba layer against reference attention.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mamba4rec/attention.hpp"
#include "mamba4rec/errors.hpp"
#include "mamba4rec/model.hpp"
#include "mamba4rec/ops.hpp"

namespace m4r {

struct BenchOptions {
  std::vector<std::size_t> lengths{64, 128, 256, 512, 1024};
  std::size_t batch = 8;
  std::size_t d_model = 64;
  std::size_t reps = 5;
  std::size_t fit_min = 128;
  std::size_t fit_max = 1024;
  bool backward = true;
  std::uint64_t seed = 2024;
  BlockConfig block;  // d_model is overwritten by `d_model`
};

struct BenchRow {
  std::string model;
  std::size_t length = 0;
  double forward_seconds = 0.0;   // median
  double backward_seconds = 0.0;  // median, 0 when skipped
  std::uint64_t forward_macs = 0;
  std::size_t activation_bytes = 0;
};

struct BenchResult {
  std::vector<BenchRow> rows;
  double mamba_exponent = 0.0;
  double attention_exponent = 0.0;
};

// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractError("slope fit needs >= 2 points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <class T>
void set_requires_grad(ModelParams<T>& p, bool on) {
  p.for_each([on](const std::string&, Tensor<T>& t) { t.set_requires_grad(on); });
}

namespace detail {

template <class F>
BenchRow measure(const std::string& name, std::size_t L, std::size_t reps, bool backward,
                 F&& forward, const std::function<void(bool)>& grad_mode) {
  using Clock = std::chrono::steady_clock;
  BenchRow row{name, L};
  grad_mode(false);
  {
    OpCounter counter;
    forward();
    row.forward_macs = counter.macs();
  }
  std::vector<double> fwd, bwd;
  for (std::size_t r = 0; r < reps; ++r) {
    const auto t0 = Clock::now();
    auto out = forward();
    fwd.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
  }
  row.forward_seconds = median(fwd);
  if (backward) {
    grad_mode(true);
    for (std::size_t r = 0; r < reps; ++r) {
      auto loss = sum(forward());
      Graph<float> g(loss);
      row.activation_bytes = g.value_bytes();
      const auto t0 = Clock::now();
      g.backward();
      bwd.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
    }
    row.backward_seconds = median(bwd);
    grad_mode(false);
  }
  return row;
}

}  // namespace detail

// Times the inference forward (and optionally backward) of one default
// Mamba layer and of reference attention on random [B, L, D] inputs.
// Repetitions run in a fixed order; medians are reported.
inline BenchResult run_bench(const BenchOptions& opt) {
  if (opt.batch == 0) throw ConfigError("bench: batch must be >= 1");
  if (opt.reps == 0) throw ConfigError("bench: reps must be >= 1");
  if (opt.lengths.empty()) throw ConfigError("bench: no lengths given");
  ModelConfig mcfg;
  mcfg.num_items = 1;
  mcfg.block = opt.block;
  mcfg.block.d_model = opt.d_model;
  mcfg.max_len = *std::max_element(opt.lengths.begin(), opt.lengths.end());
  ModelParams<float> mamba = init_model<float>(mcfg, opt.seed);
  AttentionParams<float> attn = init_attention<float>(opt.d_model, opt.seed);
  auto attn_grad = [&attn](bool on) {
    for (auto* t : {&attn.w_q, &attn.w_k, &attn.w_v}) t->set_requires_grad(on);
  };
  auto mamba_grad = [&mamba](bool on) { set_requires_grad(mamba, on); };

  BenchResult res;
  std::vector<double> fit_l, fit_m, fit_a;
  Rng rng(opt.seed);
  for (const std::size_t L : opt.lengths) {
    if (L == 0) throw ConfigError("bench: lengths must be >= 1");
    std::vector<float> x(opt.batch * L * opt.d_model);
    for (auto& v : x) v = static_cast<float>(rng.normal());
    const Tensor<float> h = Tensor<float>::from({opt.batch, L, opt.d_model}, std::move(x));
    Rng unused(0);
    auto m = detail::measure(
        "mamba_layer", L, opt.reps, opt.backward,
        [&] { return mamba_layer_forward(h, 0, mamba, mcfg, unused, false); }, mamba_grad);
    auto a = detail::measure(
        "attention", L, opt.reps, opt.backward,
        [&] { return reference_attention_forward(h, attn); }, attn_grad);
    if (L >= opt.fit_min && L <= opt.fit_max) {
      fit_l.push_back(static_cast<double>(L));
      fit_m.push_back(m.forward_seconds);
      fit_a.push_back(a.forward_seconds);
    }
    res.rows.push_back(std::move(m));
    res.rows.push_back(std::move(a));
  }
  if (fit_l.size() >= 2) {
    res.mamba_exponent = loglog_slope(fit_l, fit_m);
    res.attention_exponent = loglog_slope(fit_l, fit_a);
  }
  return res;
}

}  // namespace m4r
