#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mamba4rec/data.hpp"
#include "mamba4rec/errors.hpp"
#include "mamba4rec/eval.hpp"
#include "mamba4rec/model.hpp"
#include "mamba4rec/ops.hpp"

namespace m4r {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moments per parameter, in the params' for_each order.
template <class T>
struct OptimState {
  AdamConfig cfg;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m, v;
};

// Bias-corrected Adam update, in place. Every parameter must carry a
// finite gradient.
template <class T>
void adam_step(ModelParams<T>& params, OptimState<T>& st) {
  std::size_t idx = 0;
  // validate before touching anything
  params.for_each([&](const std::string& name, Tensor<T>& p) {
    if (!p.has_grad()) return;
    for (const T g : p.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + name);
    }
  });
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.cfg.beta2, static_cast<double>(st.step));
  const T b1 = static_cast<T>(st.cfg.beta1), b2 = static_cast<T>(st.cfg.beta2);
  params.for_each([&](const std::string&, Tensor<T>& p) {
    if (st.m.size() <= idx) {
      st.m.emplace_back(p.size(), T{0});
      st.v.emplace_back(p.size(), T{0});
    }
    auto& m = st.m[idx];
    auto& v = st.v[idx];
    if (m.size() != p.size()) throw DimensionError("optimizer state does not match parameters");
    ++idx;
    if (!p.has_grad()) return;
    auto g = p.grad();
    auto w = p.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (T{1} - b1) * g[i];
      v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
      const double mh = static_cast<double>(m[i]) / bc1;
      const double vh = static_cast<double>(v[i]) / bc2;
      w[i] -= static_cast<T>(st.cfg.lr * mh / (std::sqrt(vh) + st.cfg.eps));
    }
  });
}

template <class T>
void zero_grads(ModelParams<T>& params) {
  params.for_each([](const std::string&, Tensor<T>& p) { p.zero_grad(); });
}

struct TrainConfig {
  AdamConfig adam;
  std::size_t batch_size = 2048;
  std::size_t eval_batch_size = 4096;
  std::size_t max_epochs = 200;
  std::size_t patience = 10;
  std::size_t k = 10;
  bool mask_history = true;
  std::uint64_t seed = 2024;

  void validate() const {
    if (batch_size < 1 || eval_batch_size < 1) throw ConfigError("batch sizes must be >= 1");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (!(adam.lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double valid_ndcg = 0.0;
  double seconds = 0.0;
};

template <class T>
struct TrainResult {
  ModelParams<T> best;
  std::size_t best_epoch = 0;
  double best_valid_ndcg = -1.0;
  std::vector<EpochRecord> history;
  bool diverged = false;
  std::string diverged_reason;
};

// Full-softmax cross-entropy of the next item at the readout position.
template <class T>
Tensor<T> batch_loss(const Batch& b, const ModelParams<T>& params, const ModelConfig& cfg, Rng& rng) {
  Tensor<T> h = model_forward(b.items, params, cfg, rng, true);
  return cross_entropy(predict_logits(h, params), b.targets);
}

// Adam over shuffled training batches; after every epoch the validation
// NDCG@k decides whether the current weights become the best copy. Stops
// after `patience` epochs without improvement.
template <class T>
TrainResult<T> train(ModelParams<T> params, const ModelConfig& mcfg, const InteractionDataset& ds,
                     const SplitViews& splits, const TrainConfig& tcfg,
                     const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  mcfg.validate();
  tcfg.validate();
  if (splits.train.empty()) throw ContractError("train: the training split is empty");
  TrainResult<T> result;
  result.best = params.clone();
  OptimState<T> opt{tcfg.adam, 0, {}, {}};
  Rng shuffle_rng = Rng(tcfg.seed).fork("shuffle");
  Rng dropout_rng = Rng(tcfg.seed).fork("dropout");
  EvalOptions eopt{tcfg.k, tcfg.eval_batch_size, mcfg.max_len, tcfg.mask_history};
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    try {
      BatchStream stream(ds, splits.train, mcfg.max_len, tcfg.batch_size, &shuffle_rng, true);
      Batch batch;
      double total = 0.0;
      std::size_t seen = 0;
      while (stream.next(batch)) {
        zero_grads(params);
        Tensor<T> loss = batch_loss(batch, params, mcfg, dropout_rng);
        Graph<T>(loss).backward();
        // the pad row is not a real item and stays at zero
        auto g = params.item_embedding.grad();
        std::fill_n(g.begin(), mcfg.d_model(), T{0});
        adam_step(params, opt);
        total += static_cast<double>(loss.item()) * batch.targets.size();
        seen += batch.targets.size();
      }
      rec.loss = total / static_cast<double>(seen);
      rec.valid_ndcg = evaluate(params, mcfg, ds, splits, Split::valid, eopt).ndcg;
    } catch (const NumericError& e) {
      result.diverged = true;
      result.diverged_reason = "epoch " + std::to_string(epoch) + ": " + e.what() +
                               "; best checkpoint is from epoch " +
                               std::to_string(result.best_epoch);
      break;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (rec.valid_ndcg > result.best_valid_ndcg) {
      result.best_valid_ndcg = rec.valid_ndcg;
      result.best_epoch = epoch;
      result.best = params.clone();
      since_best = 0;
    } else if (++since_best >= tcfg.patience) {
      break;
    }
  }
  return result;
}

}  // namespace m4r
