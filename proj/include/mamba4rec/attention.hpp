#pragma once

// Single-head causal self-attention, kept only as a quadratic-cost reference
// for scaling measurements.

#include <cmath>
#include <cstdint>

#include "mamba4rec/mamba_block.hpp"
#include "mamba4rec/ops.hpp"
#include "mamba4rec/rng.hpp"
#include "mamba4rec/tensor.hpp"

namespace m4r {

template <class T>
struct AttentionParams {
  Tensor<T> w_q, w_k, w_v;  // [D, D]
};

template <class T>
AttentionParams<T> init_attention(std::size_t d_model, std::uint64_t seed) {
  const Rng rng(seed);
  return {detail::fan_in_uniform<T>({d_model, d_model}, d_model, rng, "w_q"),
          detail::fan_in_uniform<T>({d_model, d_model}, d_model, rng, "w_k"),
          detail::fan_in_uniform<T>({d_model, d_model}, d_model, rng, "w_v")};
}

// softmax(Q K^T / sqrt(D) + causal mask) V for h[B, L, D].
template <class T>
Tensor<T> reference_attention_forward(const Tensor<T>& h, const AttentionParams<T>& p) {
  detail::require(h.rank() == 3 && h.dim(2) == p.w_q.dim(0),
                  "attention: expected [B, L, D], got " + to_string(h.shape()));
  const T inv_sqrt_d = T{1} / std::sqrt(static_cast<T>(h.dim(2)));
  Tensor<T> q = matmul(h, p.w_q);
  Tensor<T> k = matmul(h, p.w_k);
  Tensor<T> v = matmul(h, p.w_v);
  Tensor<T> scores = scale(batched_matmul_nt(q, k), inv_sqrt_d);
  return batched_matmul(causal_softmax(scores), v);
}

}  // namespace m4r
