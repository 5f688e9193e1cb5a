#include <gtest/gtest.h>

#include <cmath>

#include "metric_checks.hpp"
#include "oracles.hpp"

using namespace m4r;
using namespace m4r::testing;

namespace {

InteractionDataset dataset_of(std::vector<std::vector<std::size_t>> seqs, std::size_t items) {
  InteractionDataset ds;
  ds.item_ids.emplace_back("<pad>");
  for (std::size_t i = 1; i <= items; ++i) ds.item_ids.push_back(std::to_string(i));
  for (std::size_t u = 0; u < seqs.size(); ++u) ds.user_ids.push_back("u" + std::to_string(u));
  ds.sequences = std::move(seqs);
  return ds;
}

InteractionDataset random_dataset(std::size_t users, std::size_t items, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> seqs;
  for (std::size_t u = 0; u < users; ++u) {
    std::vector<std::size_t> s(3 + rng.below(12));
    for (auto& x : s) x = 1 + rng.below(items);
    seqs.push_back(std::move(s));
  }
  return dataset_of(std::move(seqs), items);
}

// Deterministic pseudo-random scores per (user, item), independent of batching.
BatchScorer<double> hashed_scorer(std::size_t V, double (*f)(double) = nullptr) {
  return [V, f](const Batch& b) {
    std::vector<double> s(b.targets.size() * V);
    for (std::size_t r = 0; r < b.targets.size(); ++r) {
      Rng rng(1000 + b.users[r] * 7919 + b.lengths[r]);
      for (std::size_t v = 0; v < V; ++v) {
        const double x = rng.normal(0, 1);
        s[r * V + v] = f ? f(x) : x;
      }
    }
    return s;
  };
}

double affine(double x) { return 3.0 * x + 1.0; }
double expo(double x) { return std::exp(x); }

}  // namespace

// ------------------------------------------------------------------ rank

TEST(Rank, Examples) {
  std::vector<double> s{0.0, 0.1, 0.9, 0.5, 0.3};
  EXPECT_EQ(rank_target<double>(s, 2), 1u);
  EXPECT_EQ(rank_target<double>(s, 3), 2u);
  EXPECT_EQ(rank_target<double>(s, 1), 4u);
  std::vector<std::uint8_t> mask{0, 0, 1, 0, 0};
  EXPECT_EQ(rank_target<double>(s, 3, mask), 1u);
  EXPECT_THROW(rank_target<double>(s, 2, mask), ContractError);
  EXPECT_THROW(rank_target<double>(s, 0), ContractError);
  EXPECT_THROW(rank_target<double>(s, 5), IndexError);
}

TEST(Rank, TiesGoToSmallerIndex) {
  std::vector<double> s(6, 1.0);  // pad plus items 1..5, all equal
  EXPECT_EQ(rank_target<double>(s, 3), 3u);
  EXPECT_EQ(rank_target<double>(s, 1), 1u);
  EXPECT_EQ(rank_target<double>(s, 5), 5u);
}

TEST(Rank, PadScoreIsIgnored) {
  std::vector<double> s{100.0, 0.1, 0.2};
  EXPECT_EQ(rank_target<double>(s, 2), 1u);
}

TEST(Rank, AgreesWithSortOracle) {
  const auto r = metric_oracle_agreement(10000, 3);
  EXPECT_EQ(r.instances, 10000u);
  EXPECT_EQ(r.rank_mismatches, 0u);
  EXPECT_LE(r.max_metric_error, 1e-15);
}

// --------------------------------------------------------------- metrics

TEST(Metrics, ClosedForms) {
  auto m = metrics_for_rank(3, 10);
  EXPECT_EQ(m.hr, 1.0);
  EXPECT_DOUBLE_EQ(m.ndcg, 0.5);
  EXPECT_DOUBLE_EQ(m.mrr, 1.0 / 3.0);
  m = metrics_for_rank(1, 10);
  EXPECT_EQ(m.ndcg, 1.0);
  m = metrics_for_rank(11, 10);
  EXPECT_EQ(m.hr, 0.0);
  EXPECT_EQ(m.ndcg, 0.0);
  EXPECT_EQ(m.mrr, 0.0);
  m = metrics_for_rank(10, 10);
  EXPECT_DOUBLE_EQ(m.ndcg, 1.0 / std::log2(11.0));
  EXPECT_THROW(metrics_for_rank(0, 10), ContractError);
}

TEST(Metrics, AveragesOverUsers) {
  std::vector<std::size_t> ranks{1, 3, 11, 2};
  auto rep = metrics_at_k(ranks, 10);
  EXPECT_DOUBLE_EQ(rep.hr, 0.75);
  EXPECT_DOUBLE_EQ(rep.ndcg, (1.0 + 0.5 + 1.0 / std::log2(3.0)) / 4);
  EXPECT_DOUBLE_EQ(rep.mrr, (1.0 + 1.0 / 3 + 0.5) / 4);
  EXPECT_EQ(rep.num_users, 4u);
  EXPECT_EQ(rep.per_user_rank, ranks);
}

TEST(Metrics, KOfOneCollapsesAllThree) {
  Rng rng(4);
  std::vector<std::size_t> ranks(200);
  for (auto& r : ranks) r = 1 + rng.below(4);
  auto rep = metrics_at_k(ranks, 1);
  EXPECT_EQ(rep.hr, rep.ndcg);
  EXPECT_EQ(rep.hr, rep.mrr);
}

TEST(Metrics, EmptyInputIsContractError) {
  EXPECT_THROW(metrics_at_k(std::vector<std::size_t>{}, 10), ContractError);
  EXPECT_THROW(metrics_at_k(std::vector<std::size_t>{1}, 0), ConfigError);
}

// ------------------------------------------------------------ evaluation

TEST(Evaluate, PerUserRanksFollowScorer) {
  auto ds = random_dataset(60, 25, 5);
  auto sp = build_splits(ds);
  const std::size_t V = 26;
  EvalOptions opt{10, 7, 6, false};
  auto scorer = hashed_scorer(V);
  auto rep = evaluate_with<double>(scorer, ds, sp.test, opt);
  ASSERT_EQ(rep.per_user_rank.size(), 60u);
  BatchStream stream(ds, sp.test, 6, 1, nullptr, false);
  Batch b;
  for (std::size_t i = 0; stream.next(b); ++i) {
    EXPECT_EQ(rep.per_user_rank[i], sort_rank(scorer(b), b.targets[0], {}));
  }
}

TEST(Evaluate, HistoryMaskingExcludesSeenItems) {
  auto ds = random_dataset(60, 25, 6);
  auto sp = build_splits(ds);
  const std::size_t V = 26;
  auto scorer = hashed_scorer(V);
  auto rep = evaluate_with<double>(scorer, ds, sp.valid, EvalOptions{10, 16, 50, true});
  for (std::size_t u = 0; u < 60; ++u) {
    const auto& in = sp.valid[u];
    std::vector<std::uint8_t> mask(V, 0);
    for (std::size_t i = 0; i < in.context_length; ++i) mask[ds.sequences[u][i]] = 1;
    mask[in.target] = 0;
    const std::vector<Instance> one{in};
    BatchStream s(ds, one, 50, 1, nullptr, false);
    Batch b;
    s.next(b);
    EXPECT_EQ(rep.per_user_rank[u], sort_rank(scorer(b), in.target, mask));
  }
}

TEST(Evaluate, MonotoneScoreTransformsDoNotChangeMetrics) {
  auto ds = random_dataset(80, 30, 7);
  auto sp = build_splits(ds);
  EvalOptions opt{10, 32, 8, true};
  auto base = evaluate_with<double>(hashed_scorer(31), ds, sp.test, opt);
  for (auto f : {&affine, &expo}) {
    auto other = evaluate_with<double>(hashed_scorer(31, f), ds, sp.test, opt);
    EXPECT_EQ(other.per_user_rank, base.per_user_rank);
    EXPECT_EQ(other.ndcg, base.ndcg);
  }
}

TEST(Evaluate, BatchSizeDoesNotChangeResults) {
  auto ds = random_dataset(90, 30, 8);
  auto sp = build_splits(ds);
  auto a = evaluate_with<double>(hashed_scorer(31), ds, sp.test, EvalOptions{10, 1, 8, true});
  auto b = evaluate_with<double>(hashed_scorer(31), ds, sp.test, EvalOptions{10, 4096, 8, true});
  EXPECT_EQ(a.per_user_rank, b.per_user_rank);
  EXPECT_EQ(a.hr, b.hr);
  EXPECT_EQ(a.ndcg, b.ndcg);
  EXPECT_EQ(a.mrr, b.mrr);
}

TEST(Evaluate, BatchSizeDoesNotChangeModelResults) {
  auto ds = random_dataset(50, 20, 9);
  auto sp = build_splits(ds);
  ModelConfig cfg = tiny_model_config();
  cfg.num_items = 20;
  cfg.max_len = 10;
  auto p = init_model<float>(cfg, 3);
  auto a = evaluate(p, cfg, ds, sp, Split::test, EvalOptions{10, 1, 0, true});
  auto b = evaluate(p, cfg, ds, sp, Split::test, EvalOptions{10, 4096, 0, true});
  EXPECT_EQ(a.per_user_rank, b.per_user_rank);
  EXPECT_THROW(evaluate(p, cfg, ds, sp, Split::train, EvalOptions{}), ContractError);
}

TEST(Evaluate, DuplicatingUsersKeepsAverages) {
  auto ds = random_dataset(40, 20, 10);
  auto twice = ds;
  for (std::size_t u = 0; u < 40; ++u) {
    twice.user_ids.push_back(ds.user_ids[u] + "'");
    twice.sequences.push_back(ds.sequences[u]);
  }
  EvalOptions opt{10, 64, 8, true};
  auto pop = evaluate_with<double>(popularity_scorer(ds), ds, build_splits(ds).test, opt);
  auto pop2 = evaluate_with<double>(popularity_scorer(twice), twice, build_splits(twice).test, opt);
  EXPECT_DOUBLE_EQ(pop.hr, pop2.hr);
  EXPECT_DOUBLE_EQ(pop.ndcg, pop2.ndcg);
  EXPECT_DOUBLE_EQ(pop.mrr, pop2.mrr);
}

TEST(Evaluate, PopularityOnHandFixture) {
  // training-portion counts: item1 6, item2 3, item3 2, item4 0
  auto ds = dataset_of({{1, 2, 1, 3, 4}, {1, 2, 3, 4}, {2, 1, 4, 3}, {1, 3, 2, 4}, {3, 1, 2, 4}}, 4);
  EXPECT_EQ(popularity_counts(ds), (std::vector<double>{0, 6, 3, 2, 0}));
  auto sp = build_splits(ds);
  auto r10 = evaluate_with<double>(popularity_scorer(ds), ds, sp.test, EvalOptions{10, 2, 8, false});
  EXPECT_EQ(r10.per_user_rank, (std::vector<std::size_t>{4, 4, 3, 4, 4}));
  EXPECT_DOUBLE_EQ(r10.hr, 1.0);
  EXPECT_DOUBLE_EQ(r10.ndcg, (4.0 / std::log2(5.0) + 0.5) / 5);
  EXPECT_DOUBLE_EQ(r10.mrr, (4 * 0.25 + 1.0 / 3) / 5);
  auto r3 = evaluate_with<double>(popularity_scorer(ds), ds, sp.test, EvalOptions{3, 2, 8, false});
  EXPECT_DOUBLE_EQ(r3.hr, 0.2);
  EXPECT_DOUBLE_EQ(r3.ndcg, 0.1);
  EXPECT_DOUBLE_EQ(r3.mrr, 1.0 / 15);
  // with history masking every test target is the only unseen item
  auto masked = evaluate_with<double>(popularity_scorer(ds), ds, sp.test, EvalOptions{10, 2, 8, true});
  EXPECT_EQ(masked.per_user_rank, (std::vector<std::size_t>{1, 1, 1, 1, 1}));
}

TEST(Evaluate, PerfectScorerScoresOne) {
  auto ds = random_dataset(30, 15, 11);
  auto sp = build_splits(ds);
  BatchScorer<double> oracle = [](const Batch& b) {
    std::vector<double> s(b.targets.size() * 16, 0.0);
    for (std::size_t r = 0; r < b.targets.size(); ++r) s[r * 16 + b.targets[r]] = 1.0;
    return s;
  };
  auto rep = evaluate_with<double>(oracle, ds, sp.test, EvalOptions{10, 8, 8, false});
  EXPECT_EQ(rep.hr, 1.0);
  EXPECT_EQ(rep.ndcg, 1.0);
  EXPECT_EQ(rep.mrr, 1.0);
}

TEST(Evaluate, WrongScoreWidthIsDimensionError) {
  auto ds = random_dataset(5, 10, 12);
  BatchScorer<double> bad = [](const Batch& b) { return std::vector<double>(b.targets.size() * 3); };
  EXPECT_THROW(evaluate_with<double>(bad, ds, build_splits(ds).test, EvalOptions{}), DimensionError);
}

TEST(Evaluate, UntrainedModelHitRateIsChance) {
  // targets independent of the scores make the rank uniform on 1..|V|
  const std::size_t items = 200, users = 3000;
  auto ds = random_dataset(users, items, 13);
  auto sp = build_splits(ds);
  ModelConfig cfg = tiny_model_config();
  cfg.num_items = items;
  cfg.max_len = 16;
  auto p = init_model<float>(cfg, 14);
  auto rep = evaluate(p, cfg, ds, sp, Split::test, EvalOptions{10, 512, 0, false});
  const double pr = 10.0 / items, sigma = std::sqrt(pr * (1 - pr) / users);
  EXPECT_NEAR(rep.hr, pr, 3 * sigma);
}
