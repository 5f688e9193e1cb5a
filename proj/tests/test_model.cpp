#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>

#include "grad_cases.hpp"
#include "oracles.hpp"

using namespace m4r;
using namespace m4r::testing;

namespace {

template <class T>
std::vector<double> values(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

ModelConfig small_config(std::size_t layers = 1) {
  ModelConfig c;
  c.num_items = 30;
  c.num_layers = layers;
  c.max_len = 12;
  c.block.d_model = 8;
  c.block.state_dim = 4;
  return c;
}

template <class T>
Tensor<T> eval_forward(const ItemBatch& b, const ModelParams<T>& p, const ModelConfig& cfg,
                       ForwardProbe* probe = nullptr) {
  Rng rng(0);
  return model_forward(b, p, cfg, rng, false, probe);
}

std::vector<double> ln_unit(const std::vector<double>& row, double eps) {
  return layer_norm_ref(row, std::vector<double>(row.size(), 1.0),
                        std::vector<double>(row.size(), 0.0), eps);
}

std::vector<double> pffn_ref(const std::vector<double>& h, std::size_t R, const LayerParams<double>& l) {
  const std::size_t D = l.ffn_w1.dim(0);
  auto a = naive_matmul(h, values(l.ffn_w1), R, D, 4 * D);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < 4 * D; ++j) a[r * 4 * D + j] = gelu_ref(a[r * 4 * D + j] + l.ffn_b1[j]);
  auto o = naive_matmul(a, values(l.ffn_w2), R, 4 * D, D);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < D; ++j) o[r * D + j] += l.ffn_b2[j];
  return o;
}

std::vector<double> rowwise_ln(const std::vector<double>& x, std::size_t D, double eps) {
  std::vector<double> out;
  for (std::size_t r = 0; r < x.size() / D; ++r) {
    auto row = ln_unit({x.begin() + r * D, x.begin() + (r + 1) * D}, eps);
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

}  // namespace

// ------------------------------------------------------------------ init

TEST(ModelInit, PadRowIsZeroAndEmbeddingsAreSmallNormals) {
  ModelConfig cfg = small_config();
  cfg.num_items = 2000;
  auto p = init_model<double>(cfg, 1);
  const std::size_t D = cfg.d_model();
  for (std::size_t d = 0; d < D; ++d) EXPECT_EQ(p.item_embedding[d], 0.0);
  double s = 0, s2 = 0;
  const std::size_t n = (cfg.vocab_size() - 1) * D;
  for (std::size_t i = D; i < p.item_embedding.size(); ++i) {
    s += p.item_embedding[i];
    s2 += p.item_embedding[i] * p.item_embedding[i];
  }
  const double mean = s / n, sd = std::sqrt(s2 / n - mean * mean);
  EXPECT_NEAR(mean, 0.0, 0.002);
  EXPECT_NEAR(sd, 0.02, 0.001);
  EXPECT_FALSE(p.pos_embedding.defined());
}

TEST(ModelInit, SameSeedSameParameters) {
  auto a = init_model<double>(small_config(2), 42), b = init_model<double>(small_config(2), 42);
  auto c = init_model<double>(small_config(2), 43);
  auto na = named_params(a), nb = named_params(b), nc = named_params(c);
  ASSERT_EQ(na.size(), nb.size());
  for (std::size_t i = 0; i < na.size(); ++i) {
    EXPECT_EQ(na[i].first, nb[i].first);
    EXPECT_EQ(values(na[i].second), values(nb[i].second));
  }
  EXPECT_NE(values(a.item_embedding), values(c.item_embedding));
}

TEST(ModelInit, RejectsBadConfig) {
  ModelConfig cfg = small_config();
  cfg.num_items = 0;
  EXPECT_THROW(init_model<double>(cfg, 1), ConfigError);
  cfg = small_config();
  cfg.num_layers = 0;
  EXPECT_THROW(init_model<double>(cfg, 1), ConfigError);
  cfg = small_config();
  cfg.dropout_hidden = 1.0;
  EXPECT_THROW(init_model<double>(cfg, 1), ConfigError);
}

TEST(ModelInit, ParameterNamesAreHierarchical) {
  auto p = init_model<double>(small_config(2), 1);
  std::vector<std::string> names;
  for (auto& [n, t] : named_params(p)) names.push_back(n);
  EXPECT_EQ(names.front(), "item_embedding");
  EXPECT_NE(std::find(names.begin(), names.end(), "layers.1.block.a_log"), names.end());
  EXPECT_NE(std::find(names.begin(), names.end(), "layers.0.ffn.w2"), names.end());
}

// ------------------------------------------------------------- embedding

TEST(Embed, AllPadRowIsZero) {
  auto cfg = small_config();
  auto p = init_model<double>(cfg, 2);
  Rng rng(0);
  auto e = embed_sequence(ItemBatch{{0, 0, 0, 4, 5, 6}, 2, 3}, p, cfg, rng, false);
  for (std::size_t i = 0; i < 3 * 8; ++i) EXPECT_EQ(e[i], 0.0);
}

TEST(Embed, SingleItemIsNormalizedRow) {
  auto cfg = small_config();
  auto p = init_model<double>(cfg, 2);
  Rng rng(0);
  auto e = embed_sequence(ItemBatch{{7}, 1, 1}, p, cfg, rng, false);
  const auto row = values(p.item_embedding);
  const auto want = ln_unit({row.begin() + 7 * 8, row.begin() + 8 * 8}, cfg.layer_norm_eps);
  EXPECT_LE(max_abs_diff(e.data(), want), 1e-12);
}

TEST(Embed, PositionalEmbeddingChangesOutput) {
  auto cfg = small_config();
  cfg.use_positional_embedding = true;
  auto p = init_model<double>(cfg, 2);
  ASSERT_TRUE(p.pos_embedding.defined());
  EXPECT_EQ(p.pos_embedding.shape(), (Shape{12, 8}));
  Rng rng(0);
  ItemBatch b{{3, 4, 5}, 1, 3};
  auto with = embed_sequence(b, p, cfg, rng, false);
  auto cfg2 = cfg;
  cfg2.use_positional_embedding = false;
  auto without = embed_sequence(b, p, cfg2, rng, false);
  EXPECT_GT(max_abs_diff(with.data(), without.data()), 1e-3);
}

TEST(Embed, OutOfVocabularyIndexIsRejected) {
  auto cfg = small_config();
  auto p = init_model<double>(cfg, 2);
  Rng rng(0);
  EXPECT_THROW(embed_sequence(ItemBatch{{31}, 1, 1}, p, cfg, rng, false), IndexError);
}

// ------------------------------------------------------------------ pffn

TEST(Pffn, ZeroFirstWeightsCollapseToBiasPath) {
  auto p = init_model<double>(small_config(), 3);
  auto& l = p.layers[0];
  for (auto& w : l.ffn_w1.data()) w = 0.0;
  Rng rng(1);
  auto h = random_tensor({2, 3, 8}, rng, -1, 1, false);
  auto y = pffn_forward(h, l);
  // every position yields GELU(b1) W2 + b2
  const auto want = pffn_ref(std::vector<double>(8, 0.0), 1, l);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(y[r * 8 + d], want[d], 1e-14);
}

TEST(Pffn, PositionPermutationCommutes) {
  auto p = init_model<double>(small_config(), 3);
  Rng rng(2);
  auto h = random_tensor({1, 5, 8}, rng, -1, 1, false);
  std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  auto hp = h.clone();
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t d = 0; d < 8; ++d) hp.data()[i * 8 + d] = h[perm[i] * 8 + d];
  auto y = pffn_forward(h, p.layers[0]), yp = pffn_forward(hp, p.layers[0]);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t d = 0; d < 8; ++d) EXPECT_EQ(yp[i * 8 + d], y[perm[i] * 8 + d]);
}

TEST(Pffn, MatchesOracle) {
  auto p = init_model<double>(small_config(), 3);
  Rng rng(4);
  auto h = random_tensor({2, 4, 8}, rng, -2, 2, false);
  auto y = pffn_forward(h, p.layers[0]);
  EXPECT_LE(max_rel_diff(y.data(), pffn_ref(values(h), 8, p.layers[0]), 1.0), 1e-12);
}

// ---------------------------------------------------------------- layers

TEST(MambaLayer, DisabledPffnIsBypassed) {
  auto cfg = small_config();
  cfg.use_pffn = false;
  auto p = init_model<double>(cfg, 5);
  Rng rng(6), d(0);
  auto h = random_tensor({1, 4, 8}, rng, -1, 1, false);
  ForwardProbe probe;
  auto y = mamba_layer_forward(h, 0, p, cfg, d, false, {}, &probe);
  EXPECT_EQ(probe.pffn_calls, 0u);
  EXPECT_EQ(probe.layer_norms, 1u);
  const auto blk = BlockRef::from(p.layers[0].block).forward(values(h), 1, 4);
  EXPECT_LE(max_abs_diff(y.data(), rowwise_ln(blk, 8, cfg.layer_norm_eps)), 1e-12);
}

TEST(MambaLayer, ZeroSublayersInStackLeaveNormalizedInput) {
  auto cfg = small_config(2);
  auto p = init_model<double>(cfg, 7);
  auto& l = p.layers[0];
  for (Tensor<double>* t : {&l.block.w_out, &l.ffn_w1, &l.ffn_b1, &l.ffn_w2, &l.ffn_b2})
    for (auto& v : t->data()) v = 0.0;
  Rng rng(8), d(0);
  auto h = random_tensor({2, 3, 8}, rng, -1, 1, false);
  auto y = mamba_layer_forward(h, 0, p, cfg, d, false);
  const auto once = rowwise_ln(values(h), 8, cfg.layer_norm_eps);
  EXPECT_LE(max_abs_diff(y.data(), rowwise_ln(once, 8, cfg.layer_norm_eps)), 1e-12);
}

TEST(MambaLayer, ResidualsOnlyInStacks) {
  ItemBatch b{{1, 2, 3, 4}, 1, 4};
  for (std::size_t layers : {1u, 2u, 3u}) {
    auto cfg = small_config(layers);
    auto p = init_model<double>(cfg, 9);
    ForwardProbe probe;
    eval_forward(b, p, cfg, &probe);
    EXPECT_EQ(probe.residual_adds, layers == 1 ? 0u : 2 * layers);
    EXPECT_EQ(probe.pffn_calls, layers);
    EXPECT_EQ(probe.layer_norms, 2 * layers);
  }
}

TEST(MambaLayer, SingleLayerDiffersFromStackOnlyByResidual) {
  auto c1 = small_config(1), c2 = small_config(2);
  auto p2 = init_model<double>(c2, 10);
  Rng rng(11), d(0);
  auto h = random_tensor({1, 4, 8}, rng, -1, 1, false);
  auto y1 = mamba_layer_forward(h, 0, p2, c1, d, false);
  auto y2 = mamba_layer_forward(h, 0, p2, c2, d, false);
  EXPECT_GT(max_abs_diff(y1.data(), y2.data()), 1e-3);
  // the residual path by hand: LN(h + block), then LN(x + pffn(x))
  const auto& l = p2.layers[0];
  auto blk = BlockRef::from(l.block).forward(values(h), 1, 4);
  for (std::size_t i = 0; i < blk.size(); ++i) blk[i] += h[i];
  auto x = rowwise_ln(blk, 8, c2.layer_norm_eps);
  auto f = pffn_ref(x, 4, l);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] += x[i];
  EXPECT_LE(max_abs_diff(y2.data(), rowwise_ln(f, 8, c2.layer_norm_eps)), 1e-12);
}

// ----------------------------------------------------------------- model

TEST(Model, MatchesCompositionOracle) {
  auto cfg = small_config();
  auto p = init_model<double>(cfg, 12);
  ItemBatch b{{5, 9, 2, 30, 1, 17}, 2, 3};
  auto y = eval_forward(b, p, cfg);
  const auto table = values(p.item_embedding);
  std::vector<double> e;
  for (auto i : b.items) {
    auto row = ln_unit({table.begin() + i * 8, table.begin() + (i + 1) * 8}, cfg.layer_norm_eps);
    e.insert(e.end(), row.begin(), row.end());
  }
  const auto& l = p.layers[0];
  auto x = rowwise_ln(BlockRef::from(l.block).forward(e, 2, 3), 8, cfg.layer_norm_eps);
  auto h = rowwise_ln(pffn_ref(x, 6, l), 8, cfg.layer_norm_eps);
  std::vector<double> last;
  for (std::size_t r : {2u, 5u}) last.insert(last.end(), h.begin() + r * 8, h.begin() + (r + 1) * 8);
  EXPECT_EQ(y.shape(), (Shape{2, 8}));
  EXPECT_LE(max_abs_diff(y.data(), last), 1e-12);
}

TEST(Model, RowResultDoesNotDependOnBatchMates) {
  auto cfg = small_config();
  auto p = init_model<float>(cfg, 13);
  Rng rng(14);
  ItemBatch big{{}, 32, 6};
  for (std::size_t i = 0; i < 32 * 6; ++i) big.items.push_back(1 + rng.below(30));
  const std::size_t row = 17;
  ItemBatch one{{big.items.begin() + row * 6, big.items.begin() + (row + 1) * 6}, 1, 6};
  auto yb = eval_forward(big, p, cfg), y1 = eval_forward(one, p, cfg);
  for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(yb[row * 8 + d], y1[d], 1e-6);
}

TEST(Model, EarlierHistoryAndOrderMatter) {
  auto cfg = small_config();
  auto p = init_model<double>(cfg, 15);
  auto base = eval_forward(ItemBatch{{3, 8, 11, 20}, 1, 4}, p, cfg);
  auto changed = eval_forward(ItemBatch{{4, 8, 11, 20}, 1, 4}, p, cfg);
  auto reordered = eval_forward(ItemBatch{{11, 8, 3, 20}, 1, 4}, p, cfg);
  EXPECT_GT(max_abs_diff(base.data(), changed.data()), 1e-6);
  EXPECT_GT(max_abs_diff(base.data(), reordered.data()), 1e-6);
}

TEST(Model, ExtraLeftPaddingDoesNotChangeResult) {
  auto cfg = small_config(2);
  auto p = init_model<float>(cfg, 16);
  auto a = eval_forward(ItemBatch{{0, 5, 6, 7}, 1, 4}, p, cfg);
  auto b = eval_forward(ItemBatch{{0, 0, 0, 0, 0, 5, 6, 7}, 1, 8}, p, cfg);
  auto c = eval_forward(ItemBatch{{5, 6, 7}, 1, 3}, p, cfg);
  for (std::size_t d = 0; d < 8; ++d) {
    EXPECT_NEAR(a[d], b[d], 1e-6);
    EXPECT_NEAR(a[d], c[d], 1e-6);
  }
}

TEST(Model, FinalPadPositionIsContractError) {
  auto cfg = small_config();
  auto p = init_model<double>(cfg, 17);
  EXPECT_THROW(eval_forward(ItemBatch{{5, 0}, 1, 2}, p, cfg), ContractError);
  EXPECT_THROW(eval_forward(ItemBatch{{5, 6, 7}, 1, 2}, p, cfg), DimensionError);
}

TEST(Model, TrainingModeDropoutIsSeeded) {
  auto cfg = small_config();
  auto p = init_model<double>(cfg, 18);
  ItemBatch b{{1, 2, 3}, 1, 3};
  Rng r1(5), r2(5), r3(6);
  auto a = model_forward(b, p, cfg, r1, true), c = model_forward(b, p, cfg, r2, true);
  auto d = model_forward(b, p, cfg, r3, true);
  EXPECT_EQ(values(a), values(c));
  EXPECT_NE(values(a), values(d));
}

// ------------------------------------------------------------ prediction

TEST(Predict, ArgmaxFindsMatchingEmbedding) {
  auto cfg = small_config();
  auto p = init_model<double>(cfg, 19);
  // rows are scaled basis vectors; item 6 best aligned with h
  auto e = p.item_embedding.data();
  std::fill(e.begin(), e.end(), 0.0);
  for (std::size_t i = 1; i <= 30; ++i) e[i * 8 + i % 8] = 1.0 + 0.01 * static_cast<double>(i);
  std::vector<double> hv(8, 0.0);
  hv[6] = 1.0;
  auto h = Tensor<double>::from({1, 8}, hv);
  auto s = ranking_scores(predict_logits(h, p));
  EXPECT_EQ(std::max_element(s.begin(), s.end()) - s.begin(), 30);
  hv[6] = 0.0;
  hv[2] = 1.0;
  s = ranking_scores(predict_logits(Tensor<double>::from({1, 8}, hv), p));
  EXPECT_EQ(std::max_element(s.begin(), s.end()) - s.begin(), 26);
}

TEST(Predict, ScoresAreDistributionOverRealItems) {
  auto cfg = small_config();
  auto p = init_model<double>(cfg, 20);
  Rng rng(21);
  auto h = random_tensor({3, 8}, rng, -3, 3, false);
  auto probs = predict_scores(h, p);
  auto logits = predict_logits(h, p);
  auto rank = ranking_scores(logits);
  for (std::size_t b = 0; b < 3; ++b) {
    double total = 0.0;
    for (std::size_t v = 0; v < 31; ++v) total += probs[b * 31 + v];
    EXPECT_NEAR(total, 1.0, 1e-12);
    EXPECT_EQ(probs[b * 31], 0.0);
    EXPECT_TRUE(std::isinf(rank[b * 31]) && rank[b * 31] < 0);
    // probabilities order items exactly as the logits do
    for (std::size_t v = 2; v < 31; ++v)
      EXPECT_EQ(probs[b * 31 + v] > probs[b * 31 + v - 1],
                logits[b * 31 + v] > logits[b * 31 + v - 1]);
  }
}

TEST(Predict, ProbabilitiesIgnoreLogitShift) {
  auto cfg = small_config();
  auto p = init_model<double>(cfg, 22);
  // a shared component in every real row adds the same constant to all logits
  std::vector<double> hv(8, 0.0);
  hv[0] = 1.0;
  auto h = Tensor<double>::from({1, 8}, hv);
  auto before = predict_scores(h, p);
  for (std::size_t i = 1; i <= 30; ++i) p.item_embedding.data()[i * 8] += 5.0;
  auto after = predict_scores(h, p);
  EXPECT_LE(max_abs_diff(before.data(), after.data()), 1e-12);
}

// ------------------------------------------------------------- gradients

TEST(ModelGradient, TinyModelsMatchCentralDifferences) {
  const auto cases = model_grad_cases();
  Rng rng(23);
  for (std::size_t k = 1; k < cases.size(); ++k) {
    for (std::size_t trial = 0; trial < cases[k].trials; ++trial) {
      const auto rep = cases[k].run(rng);
      ASSERT_LE(rep.max_rel_error, 1e-4) << cases[k].name << " trial " << trial << " at " << rep.worst;
    }
  }
}

// ------------------------------------------------------------ checkpoint

TEST(Checkpoint, RoundTripIsBitExact) {
  auto cfg = small_config(2);
  cfg.use_positional_embedding = true;
  auto p = init_model<float>(cfg, 24);
  const auto path = (std::filesystem::temp_directory_path() / "m4r_model_rt.m4r").string();
  save_checkpoint(path, p, "num_layers = 2\n");
  auto ck = read_checkpoint(path);
  EXPECT_EQ(ck.config_text, "num_layers = 2\n");
  auto q = init_model<float>(cfg, 99);
  load_params(q, ck.records);
  auto np = named_params(p), nq = named_params(q);
  for (std::size_t i = 0; i < np.size(); ++i) {
    auto a = np[i].second.data(), b = nq[i].second.data();
    EXPECT_EQ(0, std::memcmp(a.data(), b.data(), a.size_bytes())) << np[i].first;
  }
  ItemBatch b{{1, 2, 3}, 1, 3};
  EXPECT_EQ(values(eval_forward(b, p, cfg)), values(eval_forward(b, q, cfg)));
  std::filesystem::remove(path);
}

TEST(Checkpoint, ShapeMismatchIsReported) {
  auto cfg = small_config();
  auto p = init_model<float>(cfg, 25);
  const auto path = (std::filesystem::temp_directory_path() / "m4r_model_bad.m4r").string();
  save_checkpoint(path, p, "");
  auto other = cfg;
  other.block.state_dim = 5;
  auto q = init_model<float>(other, 25);
  EXPECT_THROW(load_params(q, read_checkpoint(path).records), DimensionError);
  auto deeper = init_model<float>(small_config(2), 25);
  EXPECT_THROW(load_params(deeper, read_checkpoint(path).records), IoError);
  std::filesystem::remove(path);
}
