#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mamba4rec/errors.hpp"
#include "mamba4rec/mamba_block.hpp"
#include "mamba4rec/ops.hpp"
#include "mamba4rec/rng.hpp"
#include "mamba4rec/tensor.hpp"

namespace m4r {

inline constexpr std::size_t kPadItem = 0;

struct ModelConfig {
  std::size_t num_items = 0;  // |V|; the vocabulary has num_items + 1 rows
  std::size_t num_layers = 1;
  std::size_t max_len = 200;
  bool use_positional_embedding = false;
  bool use_pffn = true;
  bool use_layernorm = true;
  double dropout_embed = 0.2;
  double dropout_hidden = 0.2;
  double layer_norm_eps = 1e-12;
  double embedding_init_std = 0.02;
  BlockConfig block;

  std::size_t vocab_size() const { return num_items + 1; }
  std::size_t d_model() const { return block.d_model; }

  void validate() const {
    block.validate();
    if (num_items < 1) throw ConfigError("model needs at least one item");
    if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
    if (max_len < 1) throw ConfigError("max_len must be >= 1");
    for (double p : {dropout_embed, dropout_hidden}) {
      if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probabilities must lie in [0, 1)");
    }
    if (!(layer_norm_eps > 0.0)) throw ConfigError("layer_norm_eps must be positive");
  }
};

template <class T>
struct LayerParams {
  MambaBlockParams<T> block;
  Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;  // [D,4D], [4D], [4D,D], [D]
  Tensor<T> ln1_gamma, ln1_beta;             // after the block
  Tensor<T> ln2_gamma, ln2_beta;             // after the PFFN
};

template <class T>
struct ModelParams {
  Tensor<T> item_embedding;  // [|V|+1, D]; row 0 (pad) stays zero
  Tensor<T> pos_embedding;   // [L, D]; undefined unless enabled
  Tensor<T> emb_ln_gamma, emb_ln_beta;
  std::vector<LayerParams<T>> layers;

  // Visits every parameter with a stable hierarchical name.
  template <class F>
  void for_each(F&& f) {
    f(std::string("item_embedding"), item_embedding);
    if (pos_embedding.defined()) f(std::string("pos_embedding"), pos_embedding);
    f(std::string("emb_ln.gamma"), emb_ln_gamma);
    f(std::string("emb_ln.beta"), emb_ln_beta);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string pre = "layers." + std::to_string(i) + ".";
      auto& l = layers[i];
      l.block.for_each([&](const char* name, Tensor<T>& t) { f(pre + "block." + name, t); });
      f(pre + "ffn.w1", l.ffn_w1);
      f(pre + "ffn.b1", l.ffn_b1);
      f(pre + "ffn.w2", l.ffn_w2);
      f(pre + "ffn.b2", l.ffn_b2);
      f(pre + "ln1.gamma", l.ln1_gamma);
      f(pre + "ln1.beta", l.ln1_beta);
      f(pre + "ln2.gamma", l.ln2_gamma);
      f(pre + "ln2.beta", l.ln2_beta);
    }
  }

  template <class F>
  void for_each(F&& f) const {
    const_cast<ModelParams*>(this)->for_each(
        [&](const std::string& name, Tensor<T>& t) { f(name, static_cast<const Tensor<T>&>(t)); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  ModelParams clone() const {
    ModelParams copy = *this;
    copy.for_each([](const std::string&, Tensor<T>& t) { t = t.clone(); });
    return copy;
  }
};

namespace detail {

template <class T>
Tensor<T> ones(std::size_t n) {
  return Tensor<T>::full({n}, T{1}, true);
}

template <class T>
Tensor<T> zeros_param(Shape shape) {
  return Tensor<T>::zeros(std::move(shape), true);
}

}  // namespace detail

template <class T>
ModelParams<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Rng root(seed);
  const std::size_t D = cfg.d_model(), V = cfg.vocab_size();
  ModelParams<T> p;
  {
    Rng r = root.fork("item_embedding");
    std::vector<T> v(V * D, T{0});
    for (std::size_t i = D; i < v.size(); ++i) {
      v[i] = static_cast<T>(r.normal(0.0, cfg.embedding_init_std));
    }
    p.item_embedding = Tensor<T>::from({V, D}, std::move(v), true);
  }
  if (cfg.use_positional_embedding) {
    Rng r = root.fork("pos_embedding");
    std::vector<T> v(cfg.max_len * D);
    for (auto& x : v) x = static_cast<T>(r.normal(0.0, cfg.embedding_init_std));
    p.pos_embedding = Tensor<T>::from({cfg.max_len, D}, std::move(v), true);
  }
  p.emb_ln_gamma = detail::ones<T>(D);
  p.emb_ln_beta = detail::zeros_param<T>({D});
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    const Rng lr = root.fork("layer" + std::to_string(i));
    LayerParams<T> l;
    l.block = init_block<T>(cfg.block, lr.fork("block"));
    l.ffn_w1 = detail::fan_in_uniform<T>({D, 4 * D}, D, lr, "ffn_w1");
    l.ffn_b1 = detail::fan_in_uniform<T>({4 * D}, D, lr, "ffn_b1");
    l.ffn_w2 = detail::fan_in_uniform<T>({4 * D, D}, 4 * D, lr, "ffn_w2");
    l.ffn_b2 = detail::fan_in_uniform<T>({D}, 4 * D, lr, "ffn_b2");
    l.ln1_gamma = detail::ones<T>(D);
    l.ln1_beta = detail::zeros_param<T>({D});
    l.ln2_gamma = detail::ones<T>(D);
    l.ln2_beta = detail::zeros_param<T>({D});
    p.layers.push_back(std::move(l));
  }
  return p;
}

// Row-major [B, L] item indices; 0 is padding, real items are 1..|V|.
struct ItemBatch {
  std::vector<std::size_t> items;
  std::size_t batch = 0;
  std::size_t length = 0;

  std::vector<std::uint8_t> keep_mask() const {
    std::vector<std::uint8_t> keep(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) keep[i] = items[i] != kPadItem;
    return keep;
  }
};

// Records which structural paths a forward pass took.
struct ForwardProbe {
  std::size_t residual_adds = 0;
  std::size_t pffn_calls = 0;
  std::size_t layer_norms = 0;
};

// Lookup -> (+ positional) -> dropout -> LayerNorm, pad rows zeroed.
template <class T>
Tensor<T> embed_sequence(const ItemBatch& batch, const ModelParams<T>& p, const ModelConfig& cfg,
                         Rng& rng, bool training) {
  const std::size_t V = p.item_embedding.dim(0);
  for (const auto idx : batch.items) {
    if (idx >= V) {
      throw IndexError("item index " + std::to_string(idx) + " outside vocabulary of " +
                       std::to_string(V));
    }
  }
  Tensor<T> e = embedding(p.item_embedding, batch.items, {batch.batch, batch.length});
  if (cfg.use_positional_embedding) {
    if (!p.pos_embedding.defined()) throw ContractError("positional embedding not initialized");
    e = add_positional(e, p.pos_embedding);
  }
  e = dropout(e, cfg.dropout_embed, rng, training);
  e = layer_norm(e, p.emb_ln_gamma, p.emb_ln_beta, static_cast<T>(cfg.layer_norm_eps));
  const auto keep = batch.keep_mask();
  return mask_positions(e, keep);
}

// GELU(h W1 + b1) W2 + b2 at every position independently.
template <class T>
Tensor<T> pffn_forward(const Tensor<T>& h, const LayerParams<T>& l) {
  return add_bias(matmul(gelu(add_bias(matmul(h, l.ffn_w1), l.ffn_b1)), l.ffn_w2), l.ffn_b2);
}

// One Mamba layer. A single layer uses no residual connections; stacks of
// two or more add the sublayer input back before each normalization.
template <class T>
Tensor<T> mamba_layer_forward(const Tensor<T>& h, std::size_t layer_index,
                              const ModelParams<T>& p, const ModelConfig& cfg, Rng& rng,
                              bool training, std::span<const std::uint8_t> keep = {},
                              ForwardProbe* probe = nullptr) {
  const auto& l = p.layers.at(layer_index);
  const bool residual = cfg.num_layers >= 2;
  const T eps = static_cast<T>(cfg.layer_norm_eps);

  auto sublayer = [&](const Tensor<T>& input, const Tensor<T>& transformed, const Tensor<T>& gamma,
                      const Tensor<T>& beta) {
    Tensor<T> out = dropout(transformed, cfg.dropout_hidden, rng, training);
    if (residual) {
      out = add(input, out);
      if (probe) ++probe->residual_adds;
    }
    if (cfg.use_layernorm) {
      out = layer_norm(out, gamma, beta, eps);
      if (probe) ++probe->layer_norms;
    }
    return out;
  };

  Tensor<T> out = sublayer(h, mamba_block_forward(h, l.block, keep, cfg.block.scan), l.ln1_gamma,
                           l.ln1_beta);
  if (cfg.use_pffn) {
    out = sublayer(out, pffn_forward(out, l), l.ln2_gamma, l.ln2_beta);
    if (probe) ++probe->pffn_calls;
  }
  return out;
}

// Hidden states [B, L, D] after every layer.
template <class T>
Tensor<T> encode_sequence(const ItemBatch& batch, const ModelParams<T>& p, const ModelConfig& cfg,
                          Rng& rng, bool training, ForwardProbe* probe = nullptr) {
  const auto keep = batch.keep_mask();
  Tensor<T> h = embed_sequence(batch, p, cfg, rng, training);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    h = mamba_layer_forward(h, i, p, cfg, rng, training, keep, probe);
  }
  return h;
}

// Hidden state at the final position, which holds the most recent item
// under left padding. [B, L] -> [B, D]
template <class T>
Tensor<T> model_forward(const ItemBatch& batch, const ModelParams<T>& p, const ModelConfig& cfg,
                        Rng& rng, bool training, ForwardProbe* probe = nullptr) {
  if (batch.batch == 0 || batch.length == 0 || batch.items.size() != batch.batch * batch.length) {
    throw DimensionError("model_forward: malformed item batch");
  }
  for (std::size_t b = 0; b < batch.batch; ++b) {
    if (batch.items[(b + 1) * batch.length - 1] == kPadItem) {
      throw ContractError("model_forward: row " + std::to_string(b) +
                          " has no real item at the final position");
    }
  }
  return take_last_position(encode_sequence(batch, p, cfg, rng, training, probe));
}

// Logits against the tied item embedding table: h E^T -> [B, |V|+1].
template <class T>
Tensor<T> predict_logits(const Tensor<T>& h, const ModelParams<T>& p) {
  return matmul_nt(h, p.item_embedding);
}

// Ranking scores: logits with the pad column set to -inf.
template <class T>
std::vector<T> ranking_scores(const Tensor<T>& logits) {
  std::vector<T> s(logits.data().begin(), logits.data().end());
  const std::size_t V = logits.dim(-1);
  for (std::size_t r = 0; r < s.size() / V; ++r) {
    s[r * V + kPadItem] = -std::numeric_limits<T>::infinity();
  }
  return s;
}

// Probabilities softmax(h E^T) over real items; the pad column gets 0.
template <class T>
Tensor<T> predict_scores(const Tensor<T>& h, const ModelParams<T>& p) {
  Tensor<T> logits = predict_logits(h, p);
  const std::size_t V = logits.dim(-1), B = logits.size() / V;
  std::vector<T> probs(logits.size(), T{0});
  for (std::size_t b = 0; b < B; ++b) {
    const T* in = logits.data().data() + b * V;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, in[v]);
    T z{0};
    for (std::size_t v = 1; v < V; ++v) z += (probs[b * V + v] = std::exp(in[v] - mx));
    for (std::size_t v = 1; v < V; ++v) probs[b * V + v] /= z;
  }
  return Tensor<T>::from(logits.shape(), std::move(probs));
}

}  // namespace m4r
