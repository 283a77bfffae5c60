#pragma once

// Multi-modal self attention. Every word is concatenated to every frame,
// self-attention runs over time for each word, and the per-word results are
// averaged into the query-guided video representation (T x 2D).
//
// All words share one projection set (W_q, W_k, W_v, W_b), each 2D x 2D.
// Attention logits are plain dot products without a 1/sqrt(d) factor.

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "cbln/errors.hpp"
#include "cbln/params.hpp"
#include "cbln/tensor.hpp"

namespace cbln {

struct MmsaParams {
  Tensor W_q, W_k, W_v, W_b;

  static MmsaParams bind(ParamBinder& params) {
    return {params("mmsa.W_q"), params("mmsa.W_k"), params("mmsa.W_v"), params("mmsa.W_b")};
  }
};

inline void add_mmsa_params(ParameterStore& store, std::size_t d_model, std::mt19937_64& rng) {
  const std::size_t joint = 2 * d_model;
  for (const char* name : {"mmsa.W_q", "mmsa.W_k", "mmsa.W_v", "mmsa.W_b"}) {
    store.add_weight(name, joint, joint, rng);
  }
}

// Optional sink for the attention matrices (one T x T per word).
struct AttentionTrace {
  std::vector<Matrix> weights;
};

// f_nt = [v_t ; q_n] for every frame t.
inline Tensor concat_word_video(const Tensor& V, const Tensor& q) {
  if (q.rows() != 1) throw DimensionError("word feature must be a single row, got " + q.value().shape_str());
  if (V.cols() != q.cols()) {
    throw DimensionError("frame width " + std::to_string(V.cols()) + " differs from word width " +
                         std::to_string(q.cols()));
  }
  return concat({V, repeat_rows(q, V.rows())}, 1);
}

// Self-attention over the T rows of one word-video sequence with a residual
// output projection: softmax_t'(l^q_t . l^k_t') weighted l^v, then * W_b + F.
inline Tensor per_word_self_attention(const Tensor& F, const MmsaParams& p, AttentionTrace* trace = nullptr) {
  if (F.rows() == 0) throw DataError("self attention over an empty sequence");
  const Tensor lq = matmul(F, p.W_q);
  const Tensor lk = matmul(F, p.W_k);
  const Tensor lv = matmul(F, p.W_v);
  const Tensor alpha = softmax(matmul(lq, transpose(lk)), 1);
  if (trace != nullptr) trace->weights.push_back(alpha.value());
  return matmul(matmul(alpha, lv), p.W_b) + F;
}

// Literal form: build every F_n, attend, average. Kept as the reference for
// mmsa_forward.
inline Tensor mmsa_forward_reference(const Tensor& V, const Tensor& Q, const MmsaParams& p,
                                     AttentionTrace* trace = nullptr) {
  const std::size_t N = Q.rows();
  if (N == 0) throw DataError("query must contain at least one word");
  Tensor total;
  for (std::size_t n = 0; n < N; ++n) {
    const Tensor out = per_word_self_attention(concat_word_video(V, slice(Q, 0, n, n + 1)), p, trace);
    total = n == 0 ? out : total + out;
  }
  return scale(total, 1.0 / static_cast<double>(N));
}

// Same result as mmsa_forward_reference. Uses that [v_t ; q_n] W splits into
// v_t W_top + q_n W_bottom, so the frame projections are computed once, and
// that the residual and W_b are linear, so they apply after averaging.
inline Tensor mmsa_forward(const Tensor& V, const Tensor& Q, const MmsaParams& p, AttentionTrace* trace = nullptr) {
  const std::size_t N = Q.rows();
  const std::size_t T = V.rows();
  const std::size_t D = V.cols();
  if (N == 0) throw DataError("query must contain at least one word");
  if (T == 0) throw DataError("self attention over an empty sequence");
  if (Q.cols() != D) {
    throw DimensionError("frame width " + std::to_string(D) + " differs from word width " + std::to_string(Q.cols()));
  }
  if (p.W_q.rows() != 2 * D) {
    throw DimensionError("attention projections sized for width " + std::to_string(p.W_q.rows()) +
                         ", joint width is " + std::to_string(2 * D));
  }
  auto split = [&](const Tensor& W) {
    return std::pair{matmul(V, slice(W, 0, 0, D)), matmul(Q, slice(W, 0, D, 2 * D))};
  };
  const auto [vq, wq] = split(p.W_q);
  const auto [vk, wk] = split(p.W_k);
  const auto [vv, wv] = split(p.W_v);

  Tensor attended;
  for (std::size_t n = 0; n < N; ++n) {
    const Tensor lq = vq + slice(wq, 0, n, n + 1);
    const Tensor lk = vk + slice(wk, 0, n, n + 1);
    const Tensor lv = vv + slice(wv, 0, n, n + 1);
    const Tensor alpha = softmax(matmul(lq, transpose(lk)), 1);
    if (trace != nullptr) trace->weights.push_back(alpha.value());
    const Tensor out = matmul(alpha, lv);
    attended = n == 0 ? out : attended + out;
  }
  const double inv_n = 1.0 / static_cast<double>(N);
  const Tensor mean_word = reduce(Q, Reduce::Mean, 0);
  const Tensor residual = concat({V, repeat_rows(mean_word, T)}, 1);
  return matmul(scale(attended, inv_n), p.W_b) + residual;
}

}  // namespace cbln
