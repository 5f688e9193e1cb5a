#pragma once

// Full-catalog ranking evaluation (HR@K, NDCG@K, MRR@K).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mamba4rec/data.hpp"
#include "mamba4rec/errors.hpp"
#include "mamba4rec/model.hpp"

namespace m4r {

// 1-based rank of `target` among unmasked items. Ties are broken by item
// index, so an equal-scoring item with a smaller index ranks ahead.
// The pad index is always excluded; `masked` flags other excluded items.
template <class T>
std::size_t rank_target(std::span<const T> scores, std::size_t target,
                        std::span<const std::uint8_t> masked = {}) {
  if (target >= scores.size()) throw IndexError("rank_target: target outside the catalog");
  auto is_masked = [&](std::size_t v) {
    return v == kPadItem || (!masked.empty() && masked[v]);
  };
  if (is_masked(target)) throw ContractError("rank_target: target item is masked");
  const T st = scores[target];
  std::size_t rank = 1;
  for (std::size_t v = 0; v < scores.size(); ++v) {
    if (is_masked(v)) continue;
    if (scores[v] > st || (scores[v] == st && v < target)) ++rank;
  }
  return rank;
}

struct MetricsReport {
  double hr = 0.0;
  double ndcg = 0.0;
  double mrr = 0.0;
  std::size_t k = 10;
  std::size_t num_users = 0;
  std::vector<std::size_t> per_user_rank;
};

struct UserMetrics {
  double hr, ndcg, mrr;
};

inline UserMetrics metrics_for_rank(std::size_t rank, std::size_t k) {
  if (rank == 0) throw ContractError("ranks are 1-based");
  if (rank > k) return {0.0, 0.0, 0.0};
  return {1.0, 1.0 / std::log2(static_cast<double>(rank) + 1.0), 1.0 / static_cast<double>(rank)};
}

inline MetricsReport metrics_at_k(std::span<const std::size_t> ranks, std::size_t k = 10) {
  if (ranks.empty()) throw ContractError("metrics_at_k: no ranks to aggregate");
  if (k < 1) throw ConfigError("metrics_at_k: k must be >= 1");
  MetricsReport rep;
  rep.k = k;
  rep.num_users = ranks.size();
  for (auto r : ranks) {
    const auto m = metrics_for_rank(r, k);
    rep.hr += m.hr;
    rep.ndcg += m.ndcg;
    rep.mrr += m.mrr;
  }
  const double n = static_cast<double>(ranks.size());
  rep.hr /= n;
  rep.ndcg /= n;
  rep.mrr /= n;
  rep.per_user_rank.assign(ranks.begin(), ranks.end());
  return rep;
}

struct EvalOptions {
  std::size_t k = 10;
  std::size_t batch_size = 4096;
  std::size_t max_len = 200;
  // Exclude items already present in the evaluated context (other than the
  // target itself) from the ranking.
  bool mask_history = true;
};

// Scores a batch of contexts: returns B rows of |V|+1 scores.
template <class T>
using BatchScorer = std::function<std::vector<T>(const Batch&)>;

template <class T>
MetricsReport evaluate_with(const BatchScorer<T>& scorer, const InteractionDataset& ds,
                            const std::vector<Instance>& instances, const EvalOptions& opt) {
  const std::size_t V = ds.num_items() + 1;
  std::vector<std::size_t> ranks;
  ranks.reserve(instances.size());
  BatchStream stream(ds, instances, opt.max_len, opt.batch_size, nullptr, false);
  Batch batch;
  std::vector<std::uint8_t> mask(V, 0);
  while (stream.next(batch)) {
    const std::vector<T> scores = scorer(batch);
    if (scores.size() != batch.targets.size() * V) {
      throw DimensionError("scorer returned " + std::to_string(scores.size()) + " scores");
    }
    for (std::size_t r = 0; r < batch.targets.size(); ++r) {
      const auto& seq = ds.sequences[batch.users[r]];
      const std::size_t ctx = instances[ranks.size()].context_length;
      if (opt.mask_history) {
        for (std::size_t i = 0; i < ctx; ++i) mask[seq[i]] = 1;
        mask[batch.targets[r]] = 0;
      }
      ranks.push_back(rank_target<T>(std::span(scores).subspan(r * V, V), batch.targets[r],
                                     opt.mask_history ? std::span<const std::uint8_t>(mask)
                                                      : std::span<const std::uint8_t>{}));
      if (opt.mask_history) {
        for (std::size_t i = 0; i < ctx; ++i) mask[seq[i]] = 0;
      }
    }
  }
  return metrics_at_k(ranks, opt.k);
}

// Model scorer: tied-embedding logits in inference mode.
template <class T>
BatchScorer<T> model_scorer(const ModelParams<T>& params, const ModelConfig& cfg) {
  return [&params, &cfg](const Batch& b) {
    Rng unused(0);
    Tensor<T> h = model_forward(b.items, params, cfg, unused, false);
    return ranking_scores(predict_logits(h, params));
  };
}

template <class T>
MetricsReport evaluate(const ModelParams<T>& params, const ModelConfig& cfg,
                       const InteractionDataset& ds, const SplitViews& splits, Split split,
                       EvalOptions opt) {
  if (split == Split::train) throw ContractError("evaluate: split must be valid or test");
  opt.max_len = cfg.max_len;
  return evaluate_with<T>(model_scorer(params, cfg), ds, split_view(splits, split), opt);
}

// Item interaction counts over the training portion (all but the last two
// items of each user). Every context gets the same scores.
inline std::vector<double> popularity_counts(const InteractionDataset& ds) {
  std::vector<double> counts(ds.num_items() + 1, 0.0);
  for (const auto& seq : ds.sequences) {
    for (std::size_t i = 0; i + 2 < seq.size(); ++i) counts[seq[i]] += 1.0;
  }
  return counts;
}

inline BatchScorer<double> popularity_scorer(const InteractionDataset& ds) {
  return [counts = popularity_counts(ds)](const Batch& b) {
    std::vector<double> s;
    s.reserve(b.targets.size() * counts.size());
    for (std::size_t r = 0; r < b.targets.size(); ++r) s.insert(s.end(), counts.begin(), counts.end());
    return s;
  };
}

}  // namespace m4r
