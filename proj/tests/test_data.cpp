#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "oracles.hpp"

using namespace m4r;
using namespace m4r::testing;

namespace {

std::vector<InteractionRecord> parse(const std::string& text, LogFormat f = LogFormat::ml1m) {
  std::istringstream in(text);
  return parse_interactions(in, f, "log.dat");
}

std::vector<InteractionRecord> random_log(Rng& rng, std::size_t users, std::size_t items,
                                          std::size_t n) {
  std::vector<InteractionRecord> r;
  for (std::size_t i = 0; i < n; ++i) {
    // skewed item draw so that filtering has work to do
    const double u = rng.uniform();
    const auto item = static_cast<std::size_t>(u * u * static_cast<double>(items));
    r.push_back({"u" + std::to_string(rng.below(users)), "i" + std::to_string(item),
                 static_cast<std::int64_t>(rng.below(1000))});
  }
  return r;
}

InteractionDataset dataset_of(std::vector<std::vector<std::size_t>> seqs, std::size_t items) {
  InteractionDataset ds;
  ds.item_ids.emplace_back("<pad>");
  for (std::size_t i = 1; i <= items; ++i) ds.item_ids.push_back(std::to_string(i));
  for (std::size_t u = 0; u < seqs.size(); ++u) ds.user_ids.push_back("u" + std::to_string(u));
  ds.sequences = std::move(seqs);
  return ds;
}

}  // namespace

// --------------------------------------------------------------- parsing

TEST(Parse, MovieLensLine) {
  auto r = parse("1::1193::5::978300760\n");
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0], (InteractionRecord{"1", "1193", 978300760}));
}

TEST(Parse, EmptyInputHasNoRecordsAndFiltersToError) {
  EXPECT_TRUE(parse("").empty());
  EXPECT_TRUE(parse("\n\n").empty());
  EXPECT_THROW(k_core_filter(parse(""), 5), IoError);
}

TEST(Parse, WrongFieldCountNamesTheLine) {
  try {
    parse("1::2::5::100\n1::3::100\n");
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("log.dat:2"), std::string::npos) << e.what();
  }
}

TEST(Parse, NonNumericTimestampIsRejected) {
  EXPECT_THROW(parse("1::2::5::soon\n"), IoError);
  EXPECT_THROW(parse("a,b,5,12.5\n", LogFormat::amazon_csv), IoError);
}

TEST(Parse, OtherFormats) {
  auto a = parse("A1,B9,4.0,1400000000.0\r\nA2,B9,5,1400000001\n", LogFormat::amazon_csv);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[0], (InteractionRecord{"A1", "B9", 1400000000}));
  auto t = parse("u\ti\t7\n", LogFormat::tsv);
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0], (InteractionRecord{"u", "i", 7}));
  EXPECT_THROW(parse("u\ti\t5\t7\n", LogFormat::tsv), IoError);
  EXPECT_EQ(parse_log_format("amazon-csv"), LogFormat::amazon_csv);
  EXPECT_THROW(parse_log_format("csv"), ConfigError);
}

TEST(Parse, MissingFileIsIoError) {
  EXPECT_THROW(parse_interactions("/nonexistent/ratings.dat", LogFormat::ml1m), IoError);
}

// ------------------------------------------------------------- filtering

TEST(KCore, DenseLogIsUnchanged) {
  std::vector<InteractionRecord> r;
  for (int u = 0; u < 5; ++u)
    for (int i = 0; i < 5; ++i) r.push_back({"u" + std::to_string(u), "i" + std::to_string(i), u * 10 + i});
  EXPECT_EQ(k_core_filter(r, 5), r);
}

TEST(KCore, SparseUserIsRemoved) {
  std::vector<InteractionRecord> r;
  for (int u = 0; u < 5; ++u)
    for (int i = 0; i < 5; ++i) r.push_back({"u" + std::to_string(u), "i" + std::to_string(i), i});
  auto dense = r;
  for (int i = 0; i < 4; ++i) r.push_back({"lonely", "i" + std::to_string(i), 0});
  EXPECT_EQ(k_core_filter(r, 5), dense);
}

TEST(KCore, MatchesOneAtATimeFixpoint) {
  Rng rng(1);
  for (int trial = 0; trial < 40; ++trial) {
    auto log = random_log(rng, 20, 30, 300);
    const std::size_t k = 2 + rng.below(4);
    const auto want = brute_k_core(log, k);
    if (want.empty()) {
      EXPECT_THROW(k_core_filter(log, k), IoError);
      continue;
    }
    const auto got = k_core_filter(log, k);
    EXPECT_EQ(got, want) << "trial " << trial;
    std::map<std::string, std::size_t> uc, ic;
    for (const auto& x : got) {
      ++uc[x.user];
      ++ic[x.item];
    }
    for (auto& [_, c] : uc) EXPECT_GE(c, k);
    for (auto& [_, c] : ic) EXPECT_GE(c, k);
  }
}

TEST(KCore, CascadeCanEmptyTheLog) {
  std::vector<InteractionRecord> r;
  for (int i = 0; i < 6; ++i) r.push_back({"u", "i" + std::to_string(i), i});
  EXPECT_THROW(k_core_filter(r, 5), IoError);
  EXPECT_THROW(k_core_filter(r, 0), ConfigError);
}

// ------------------------------------------------------------ sequencing

TEST(Dataset, ChronologicalWithFileOrderTies) {
  auto r = parse("u::b::1::20\nu::a::1::10\nu::c::1::20\nv::a::1::5\n");
  auto ds = build_dataset(r);
  ASSERT_EQ(ds.num_users(), 2u);
  EXPECT_EQ(ds.num_items(), 3u);
  // items numbered by first appearance: b=1, a=2, c=3
  EXPECT_EQ(ds.sequences[0], (std::vector<std::size_t>{2, 1, 3}));
  EXPECT_EQ(ds.sequences[1], (std::vector<std::size_t>{2}));
  EXPECT_EQ(ds.item_ids[0], "<pad>");
  EXPECT_EQ(ds.num_interactions(), 4u);
}

// ---------------------------------------------------------------- splits

TEST(Splits, FiveItemSequence) {
  auto ds = dataset_of({{11, 12, 13, 14, 15}}, 15);
  auto v = build_splits(ds);
  EXPECT_EQ(v.train, (std::vector<Instance>{{0, 1, 12}, {0, 2, 13}}));
  EXPECT_EQ(v.valid, (std::vector<Instance>{{0, 3, 14}}));
  EXPECT_EQ(v.test, (std::vector<Instance>{{0, 4, 15}}));
}

TEST(Splits, ShortestAllowedSequence) {
  auto v = build_splits(dataset_of({{1, 2, 3}}, 3));
  EXPECT_TRUE(v.train.empty());
  EXPECT_EQ(v.valid, (std::vector<Instance>{{0, 1, 2}}));
  EXPECT_EQ(v.test, (std::vector<Instance>{{0, 2, 3}}));
  EXPECT_THROW(build_splits(dataset_of({{1, 2}}, 2)), ContractError);
}

TEST(Splits, CountsAndDisjointTargetPositions) {
  Rng rng(2);
  std::vector<std::vector<std::size_t>> seqs;
  std::size_t expected = 0;
  for (int u = 0; u < 50; ++u) {
    std::vector<std::size_t> s(3 + rng.below(20));
    for (auto& x : s) x = 1 + rng.below(40);
    expected += s.size() - 3;
    seqs.push_back(std::move(s));
  }
  auto ds = dataset_of(seqs, 40);
  auto v = build_splits(ds);
  EXPECT_EQ(v.train.size(), expected);
  EXPECT_EQ(v.valid.size(), 50u);
  EXPECT_EQ(v.test.size(), 50u);
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto* view : {&v.train, &v.valid, &v.test}) {
    for (const auto& in : *view) {
      EXPECT_EQ(in.target, ds.sequences[in.user][in.context_length]);
      EXPECT_TRUE(seen.insert({in.user, in.context_length}).second);
    }
  }
  EXPECT_EQ(parse_split("valid"), Split::valid);
  EXPECT_THROW(parse_split("dev"), ConfigError);
}

TEST(Splits, SubsampleKeepsWholeSequences) {
  Rng rng(3);
  std::vector<std::vector<std::size_t>> seqs;
  for (int u = 0; u < 30; ++u) seqs.push_back({1 + rng.below(9), 1 + rng.below(9), 1 + rng.below(9)});
  auto ds = dataset_of(seqs, 9);
  auto a = subsample_users(ds, 10, 4), b = subsample_users(ds, 10, 4);
  EXPECT_EQ(a.num_users(), 10u);
  EXPECT_EQ(a.user_ids, b.user_ids);
  for (std::size_t i = 0; i < a.num_users(); ++i) {
    const auto u = std::stoul(a.user_ids[i].substr(1));
    EXPECT_EQ(a.sequences[i], ds.sequences[u]);
  }
  EXPECT_EQ(subsample_users(ds, 0, 4).num_users(), 30u);
}

// -------------------------------------------------------------- batching

TEST(Batching, ShortContextIsLeftPadded) {
  std::vector<std::size_t> row(5);
  std::vector<std::size_t> ctx{7, 8, 9};
  EXPECT_EQ(fill_row(ctx, 5, row.data()), 3u);
  EXPECT_EQ(row, (std::vector<std::size_t>{0, 0, 7, 8, 9}));
}

TEST(Batching, LongContextKeepsMostRecentItems) {
  std::vector<std::size_t> row(3);
  std::vector<std::size_t> ctx{1, 2, 3, 4, 5, 6};
  EXPECT_EQ(fill_row(ctx, 3, row.data()), 3u);
  EXPECT_EQ(row, (std::vector<std::size_t>{4, 5, 6}));
}

TEST(Batching, StreamCoversEveryInstanceOnce) {
  auto ds = dataset_of({{1, 2, 3, 4, 5, 6}, {6, 5, 4}, {2, 2, 3, 3}}, 6);
  auto v = build_splits(ds);
  Rng rng(5);
  BatchStream s(ds, v.train, 4, 2, &rng, true);
  EXPECT_EQ(s.num_batches(), 2u);
  Batch b;
  std::multiset<std::pair<std::size_t, std::size_t>> got, want;
  while (s.next(b)) {
    for (std::size_t r = 0; r < b.items.batch; ++r) {
      got.insert({b.users[r], b.targets[r]});
      EXPECT_NE(b.items.items[(r + 1) * 4 - 1], kPadItem);
    }
  }
  for (const auto& in : v.train) want.insert({in.user, in.target});
  EXPECT_EQ(got, want);
}

TEST(Batching, SameSeedSameBatches) {
  Rng g(6);
  std::vector<std::vector<std::size_t>> seqs;
  for (int u = 0; u < 40; ++u) {
    std::vector<std::size_t> s(4 + g.below(10));
    for (auto& x : s) x = 1 + g.below(20);
    seqs.push_back(s);
  }
  auto ds = dataset_of(seqs, 20);
  auto v = build_splits(ds);
  auto collect = [&](std::uint64_t seed) {
    Rng rng(seed);
    BatchStream s(ds, v.train, 6, 16, &rng, true);
    std::vector<std::size_t> all;
    Batch b;
    while (s.next(b)) all.insert(all.end(), b.items.items.begin(), b.items.items.end());
    return all;
  };
  EXPECT_EQ(collect(7), collect(7));
  EXPECT_NE(collect(7), collect(8));
  EXPECT_THROW(BatchStream(ds, v.train, 6, 0, nullptr, false), ConfigError);
  EXPECT_THROW(BatchStream(ds, v.train, 6, 4, nullptr, true), ContractError);
}

// --------------------------------------------------------------- caching

TEST(Cache, RoundTripPreservesDataset) {
  Rng rng(9);
  auto ds = build_dataset(k_core_filter(random_log(rng, 30, 20, 600), 3));
  const auto path = (std::filesystem::temp_directory_path() / "m4r_data_rt.m4r").string();
  save_dataset(path, ds);
  auto back = load_dataset(path);
  EXPECT_EQ(back.user_ids, ds.user_ids);
  EXPECT_EQ(back.item_ids, ds.item_ids);
  EXPECT_EQ(back.sequences, ds.sequences);
  std::filesystem::remove(path);
}

TEST(Cache, KeyTracksContentFormatAndThreshold) {
  const auto dir = std::filesystem::temp_directory_path();
  const auto a = (dir / "m4r_key_a.dat").string(), b = (dir / "m4r_key_b.dat").string();
  std::ofstream(a) << "1::2::5::3\n";
  std::ofstream(b) << "1::2::5::4\n";
  const auto ka = dataset_cache_key(a, LogFormat::ml1m, 5);
  EXPECT_EQ(ka, dataset_cache_key(a, LogFormat::ml1m, 5));
  EXPECT_NE(ka, dataset_cache_key(b, LogFormat::ml1m, 5));
  EXPECT_NE(ka, dataset_cache_key(a, LogFormat::ml1m, 4));
  EXPECT_NE(ka, dataset_cache_key(a, LogFormat::tsv, 5));
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}
