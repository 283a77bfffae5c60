#pragma once

// Multi-context biaffine localization.
//
// The query-guided sequence is aggregated by a BiLSTM into F~ (T x D). For
// every local window size k_l there is one biaffine head. A head builds, for
// each global span width K_g, the snippet bank R_g (max-pooled spans), refines
// it with a non-local block over itself, lets each frame's local window attend
// to the refined bank, and concatenates [mean of refined bank ; flattened
// refined window] across all K_g. A linear layer maps that to a D_c context
// vector which is appended to f~_t before the start/end projections.
//
// Head logits are averaged and passed through a single sigmoid; the
// per-head-sigmoid variant is a config switch.

#include <algorithm>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "cbln/encoders.hpp"
#include "cbln/errors.hpp"
#include "cbln/layers.hpp"
#include "cbln/params.hpp"
#include "cbln/tensor.hpp"

namespace cbln {

struct McblConfig {
  std::size_t d_model = 32;
  std::size_t rnn_hidden = 16;
  std::vector<std::size_t> local_scales{1, 3, 5};
  std::vector<std::size_t> global_scales{1, 2, 4};
  std::size_t d_boundary = 32;
  std::size_t d_context = 32;
  double dropout = 0.1;
  double ln_eps = 1e-5;
  // false gives the plain biaffine variant: one head on f~_t alone.
  bool use_contexts = true;
  bool sigmoid_per_head = false;

  void validate() const {
    if (d_model == 0 || rnn_hidden == 0) throw ConfigError("mcbl widths must be positive");
    if (d_boundary == 0 || d_context == 0) throw ConfigError("boundary and context widths must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout rate must lie in [0,1)");
    if (use_contexts) {
      if (local_scales.empty()) throw ConfigError("at least one local scale is required");
      if (global_scales.empty()) throw ConfigError("at least one global scale is required");
      for (std::size_t k : local_scales) {
        if (k == 0 || k % 2 == 0) throw ConfigError("local window sizes must be odd, got " + std::to_string(k));
      }
      for (std::size_t k : global_scales) {
        if (k == 0) throw ConfigError("global span widths must be >= 1");
      }
    }
  }

  [[nodiscard]] std::size_t heads() const { return use_contexts ? local_scales.size() : 1; }
};

// ---------------------------------------------------------------------------
// Parameter layout

namespace mcbl_layout {
inline BiRnn sequence_rnn(const McblConfig& c) {
  return BiRnn::make("mcbl.lstm", CellKind::Lstm, 2 * c.d_model, c.rnn_hidden);
}
inline std::string head(std::size_t h) { return "mcbl.head" + std::to_string(h); }
inline std::string global_block(std::size_t h, std::size_t j) { return head(h) + ".global" + std::to_string(j); }
inline std::string local_block(std::size_t h, std::size_t j) { return head(h) + ".local" + std::to_string(j); }
}  // namespace mcbl_layout

inline void add_nl_block_params(ParameterStore& store, const std::string& prefix, std::size_t D, std::mt19937_64& rng) {
  for (const char* p : {".P_q", ".P_k", ".P_v", ".P_o"}) store.add_weight(prefix + p, D, D, rng);
  store.add_constant(prefix + ".ln.gain", 1, D, 1.0);
  store.add_constant(prefix + ".ln.bias", 1, D, 0.0);
}

inline void add_mcbl_params(ParameterStore& store, const McblConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t D = cfg.d_model;
  mcbl_layout::sequence_rnn(cfg).add_params(store, D, rng);
  for (std::size_t h = 0; h < cfg.heads(); ++h) {
    const std::string head = mcbl_layout::head(h);
    std::size_t boundary_in = D;
    if (cfg.use_contexts) {
      const std::size_t k_l = cfg.local_scales[h];
      for (std::size_t j = 0; j < cfg.global_scales.size(); ++j) {
        add_nl_block_params(store, mcbl_layout::global_block(h, j), D, rng);
        add_nl_block_params(store, mcbl_layout::local_block(h, j), D, rng);
      }
      add_linear(store, head + ".ctx", cfg.global_scales.size() * (1 + k_l) * D, cfg.d_context, rng);
      boundary_in += cfg.d_context;
    }
    store.add_weight(head + ".W_s", boundary_in, cfg.d_boundary, rng);
    store.add_constant(head + ".b_s", 1, cfg.d_boundary, 0.0);
    store.add_weight(head + ".W_e", boundary_in, cfg.d_boundary, rng);
    store.add_constant(head + ".b_e", 1, cfg.d_boundary, 0.0);
    store.add_weight(head + ".U_m", cfg.d_boundary, cfg.d_boundary, rng);
    store.add_weight(head + ".W_m", cfg.d_boundary, 1, rng);
    store.add_constant(head + ".b_m", 1, 1, 0.0);
  }
}

// ---------------------------------------------------------------------------
// Sequence aggregation and context banks

// BiLSTM over the fused T x 2D sequence, projected to T x D.
inline Tensor aggregate_sequence(const Tensor& fused, ParamBinder& params, const McblConfig& cfg) {
  return mcbl_layout::sequence_rnn(cfg)(fused, params);
}

// Source rows of the window of size k_l centred on t; -1 marks zero padding.
inline std::vector<std::ptrdiff_t> window_rows(std::size_t T, std::size_t t, std::size_t k_l) {
  if (k_l == 0 || k_l % 2 == 0) throw ConfigError("local window size must be odd, got " + std::to_string(k_l));
  if (t >= T) throw DataError("frame " + std::to_string(t) + " outside sequence of length " + std::to_string(T));
  const auto half = static_cast<std::ptrdiff_t>(k_l / 2);
  std::vector<std::ptrdiff_t> rows;
  rows.reserve(k_l);
  for (std::ptrdiff_t d = -half; d <= half; ++d) {
    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + d;
    rows.push_back(src >= 0 && src < static_cast<std::ptrdiff_t>(T) ? src : -1);
  }
  return rows;
}

// R_l for frame t: k_l x D, zero rows outside [0, T).
inline Tensor local_context(const Tensor& aggregated, std::size_t t, std::size_t k_l) {
  return gather_rows(aggregated, window_rows(aggregated.rows(), t, k_l));
}

// Windows of every frame stacked frame-major: (T * k_l) x D.
inline Tensor local_windows(const Tensor& aggregated, std::size_t k_l) {
  const std::size_t T = aggregated.rows();
  std::vector<std::ptrdiff_t> rows;
  rows.reserve(T * k_l);
  for (std::size_t t = 0; t < T; ++t) {
    const auto w = window_rows(T, t, k_l);
    rows.insert(rows.end(), w.begin(), w.end());
  }
  return gather_rows(aggregated, std::move(rows));
}

// R_g: ceil(T / K_g) x D; snippet k is the columnwise max over frames
// [k K_g, min((k+1) K_g, T)). A short final snippet pools only real frames.
inline Tensor global_spans(const Tensor& aggregated, std::size_t span) {
  const std::size_t T = aggregated.rows();
  if (span == 0) throw ConfigError("global span width must be >= 1");
  if (span > T) {
    throw ConfigError("global span width " + std::to_string(span) + " exceeds sequence length " + std::to_string(T));
  }
  if (span == 1) return aggregated;
  std::vector<Tensor> snippets;
  for (std::size_t begin = 0; begin < T; begin += span) {
    snippets.push_back(reduce(slice(aggregated, 0, begin, std::min(begin + span, T)), Reduce::Max, 0));
  }
  return concat(std::span<const Tensor>(snippets), 0);
}

// Span widths actually used for a sequence of length T (capped at T).
inline std::vector<std::size_t> effective_global_scales(const McblConfig& cfg, std::size_t T) {
  std::vector<std::size_t> out;
  out.reserve(cfg.global_scales.size());
  for (std::size_t k : cfg.global_scales) out.push_back(std::min(k, T));
  return out;
}

// ---------------------------------------------------------------------------
// Non-local block

struct NlBlockParams {
  Tensor P_q, P_k, P_v, P_o, gain, bias;
  double dropout = 0.0;
  double eps = 1e-5;

  static NlBlockParams bind(ParamBinder& params, const std::string& prefix, double dropout, double eps) {
    return {params(prefix + ".P_q"),     params(prefix + ".P_k"),     params(prefix + ".P_v"), params(prefix + ".P_o"),
            params(prefix + ".ln.gain"), params(prefix + ".ln.bias"), dropout,                 eps};
  }
};

// LayerNorm(Q + Dropout(softmax((Q P_q)(K P_k)^T) (K P_v) P_o)); the softmax
// runs over the m key rows.
inline Tensor nl_block(const Tensor& keys, const Tensor& queries, const NlBlockParams& p, const ForwardMode& mode) {
  if (keys.rows() == 0) throw DataError("non-local block given an empty context");
  if (keys.cols() != queries.cols() || p.P_q.rows() != queries.cols()) {
    throw DimensionError("non-local block widths disagree: keys " + keys.value().shape_str() + ", queries " +
                         queries.value().shape_str() + ", projections " + p.P_q.value().shape_str());
  }
  const Tensor q = matmul(queries, p.P_q);
  const Tensor k = matmul(keys, p.P_k);
  const Tensor v = matmul(keys, p.P_v);
  const Tensor attended = matmul(matmul(softmax(matmul(q, transpose(k)), 1), v), p.P_o);
  Tensor update = attended;
  if (mode.training && p.dropout > 0.0) update = dropout(attended, p.dropout, true, mode.generator());
  return layer_norm(queries + update, p.gain, p.bias, p.eps);
}

// ---------------------------------------------------------------------------
// Heads

struct HeadParams {
  std::size_t local_scale = 1;
  std::vector<NlBlockParams> global_blocks;
  std::vector<NlBlockParams> local_blocks;
  std::string ctx_prefix;
  Tensor W_s, b_s, W_e, b_e, U_m, W_m, b_m;

  static HeadParams bind(ParamBinder& params, const McblConfig& cfg, std::size_t h) {
    const std::string head = mcbl_layout::head(h);
    HeadParams hp;
    hp.ctx_prefix = head + ".ctx";
    if (cfg.use_contexts) {
      hp.local_scale = cfg.local_scales[h];
      for (std::size_t j = 0; j < cfg.global_scales.size(); ++j) {
        hp.global_blocks.push_back(
            NlBlockParams::bind(params, mcbl_layout::global_block(h, j), cfg.dropout, cfg.ln_eps));
        hp.local_blocks.push_back(NlBlockParams::bind(params, mcbl_layout::local_block(h, j), cfg.dropout, cfg.ln_eps));
      }
    }
    hp.W_s = params(head + ".W_s");
    hp.b_s = params(head + ".b_s");
    hp.W_e = params(head + ".W_e");
    hp.b_e = params(head + ".b_e");
    hp.U_m = params(head + ".U_m");
    hp.W_m = params(head + ".W_m");
    hp.b_m = params(head + ".b_m");
    return hp;
  }
};

// Context vector (1 x D_c) for a single frame t.
inline Tensor aggregate_contexts(const Tensor& aggregated, std::size_t t, const HeadParams& head,
                                 const std::vector<std::size_t>& spans, ParamBinder& params, const ForwardMode& mode) {
  const std::size_t k_l = head.local_scale;
  const Tensor window = local_context(aggregated, t, k_l);
  std::vector<Tensor> parts;
  for (std::size_t j = 0; j < spans.size(); ++j) {
    const Tensor bank = global_spans(aggregated, spans[j]);
    const Tensor refined_bank = nl_block(bank, bank, head.global_blocks[j], mode);
    const Tensor refined_window = nl_block(refined_bank, window, head.local_blocks[j], mode);
    parts.push_back(reduce(refined_bank, Reduce::Mean, 0));
    parts.push_back(reshape(refined_window, 1, k_l * aggregated.cols()));
  }
  return linear(concat(std::span<const Tensor>(parts), 1), params, head.ctx_prefix);
}

// Context vectors of all frames at once (T x D_c). Row t equals
// aggregate_contexts(..., t, ...): attention is row-wise and the refined bank
// does not depend on t.
inline Tensor aggregate_contexts_all(const Tensor& aggregated, const HeadParams& head,
                                     const std::vector<std::size_t>& spans, ParamBinder& params,
                                     const ForwardMode& mode) {
  const std::size_t T = aggregated.rows();
  const std::size_t k_l = head.local_scale;
  const Tensor windows = local_windows(aggregated, k_l);
  std::vector<Tensor> parts;
  for (std::size_t j = 0; j < spans.size(); ++j) {
    const Tensor bank = global_spans(aggregated, spans[j]);
    const Tensor refined_bank = nl_block(bank, bank, head.global_blocks[j], mode);
    const Tensor refined_windows = nl_block(refined_bank, windows, head.local_blocks[j], mode);
    parts.push_back(repeat_rows(reduce(refined_bank, Reduce::Mean, 0), T));
    parts.push_back(reshape(refined_windows, T, k_l * aggregated.cols()));
  }
  return linear(concat(std::span<const Tensor>(parts), 1), params, head.ctx_prefix);
}

// h_s U_m h_e^T + (h_s + h_e) W_m + b_m for one start/end pair (1 x 1).
inline Tensor biaffine_score(const Tensor& h_s, const Tensor& h_e, const Tensor& U_m, const Tensor& W_m,
                             const Tensor& b_m) {
  if (h_s.cols() != U_m.rows() || h_e.cols() != U_m.cols()) {
    throw DimensionError("biaffine: start " + h_s.value().shape_str() + ", end " + h_e.value().shape_str() +
                         ", U_m " + U_m.value().shape_str());
  }
  return matmul(matmul(h_s, U_m), transpose(h_e)) + matmul(h_s + h_e, W_m) + b_m;
}

// All T x T pair logits: entry (s, e) scores start s with end e.
inline Tensor biaffine_logits(const Tensor& starts, const Tensor& ends, const Tensor& U_m, const Tensor& W_m,
                              const Tensor& b_m) {
  if (starts.cols() != U_m.rows() || ends.cols() != U_m.cols()) {
    throw DimensionError("biaffine: starts " + starts.value().shape_str() + ", ends " + ends.value().shape_str() +
                         ", U_m " + U_m.value().shape_str());
  }
  const Tensor bilinear = matmul(matmul(starts, U_m), transpose(ends));
  return bilinear + matmul(starts, W_m) + transpose(matmul(ends, W_m)) + b_m;
}

// Boundary features of one head: [f~_t ; context_t] or f~_t alone.
inline Tensor head_features(const Tensor& aggregated, const HeadParams& head, const McblConfig& cfg,
                            ParamBinder& params, const ForwardMode& mode) {
  if (!cfg.use_contexts) return aggregated;
  const auto spans = effective_global_scales(cfg, aggregated.rows());
  return concat({aggregated, aggregate_contexts_all(aggregated, head, spans, params, mode)}, 1);
}

// Pre-sigmoid T x T logits of every head.
inline std::vector<Tensor> mcbl_head_logits(const Tensor& aggregated, ParamBinder& params, const McblConfig& cfg,
                                            const ForwardMode& mode) {
  if (aggregated.rows() < 2) {
    throw DataError("localization needs at least 2 frames, got " + std::to_string(aggregated.rows()));
  }
  std::vector<Tensor> logits;
  for (std::size_t h = 0; h < cfg.heads(); ++h) {
    const HeadParams head = HeadParams::bind(params, cfg, h);
    const Tensor features = head_features(aggregated, head, cfg, params, mode);
    const Tensor starts = matmul(features, head.W_s) + head.b_s;
    const Tensor ends = matmul(features, head.W_e) + head.b_e;
    logits.push_back(biaffine_logits(starts, ends, head.U_m, head.W_m, head.b_m));
  }
  return logits;
}

// sigmoid(mean of logits), or mean of per-head sigmoids.
inline Tensor combine_heads(const std::vector<Tensor>& logits, bool sigmoid_per_head) {
  if (logits.empty()) throw ContractError("no biaffine heads to combine");
  const double inv = 1.0 / static_cast<double>(logits.size());
  Tensor total;
  for (std::size_t h = 0; h < logits.size(); ++h) {
    const Tensor term = sigmoid_per_head ? sigmoid(logits[h]) : logits[h];
    total = h == 0 ? term : total + term;
  }
  const Tensor mean = logits.size() == 1 ? total : scale(total, inv);
  return sigmoid_per_head ? mean : sigmoid(mean);
}

// Score map M (T x T, entries in (0,1)) from the aggregated sequence F~.
inline Tensor score_map_from_aggregated(const Tensor& aggregated, ParamBinder& params, const McblConfig& cfg,
                                        const ForwardMode& mode) {
  return combine_heads(mcbl_head_logits(aggregated, params, cfg, mode), cfg.sigmoid_per_head);
}

// Score map from the query-guided fused sequence F^ (T x 2D).
inline Tensor mcbl_forward(const Tensor& fused, ParamBinder& params, const McblConfig& cfg, const ForwardMode& mode) {
  if (fused.rows() < 2) throw DataError("localization needs at least 2 frames, got " + std::to_string(fused.rows()));
  return score_map_from_aggregated(aggregate_sequence(fused, params, cfg), params, cfg, mode);
}

}  // namespace cbln
