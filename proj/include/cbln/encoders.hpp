#pragma once

// Video and query encoders: linear input projection or embedding lookup,
// sinusoidal positions, then a bidirectional recurrent layer projected back
// to the model width.

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cbln/errors.hpp"
#include "cbln/layers.hpp"
#include "cbln/params.hpp"
#include "cbln/tensor.hpp"

namespace cbln {

struct EncoderConfig {
  std::size_t d_model = 32;
  std::size_t d_video_in = 16;
  std::size_t vocab_size = 64;
  std::size_t max_T = 64;
  std::size_t max_N = 16;
  std::size_t rnn_hidden = 16;

  void validate() const {
    if (d_model == 0 || d_model % 2 != 0) throw ConfigError("d_model must be a positive even number");
    if (d_video_in == 0) throw ConfigError("d_video_in must be positive");
    if (vocab_size == 0) throw ConfigError("vocab_size must be at least 1");
    if (max_T < 2) throw ConfigError("max_T must be at least 2");
    if (max_N < 1) throw ConfigError("max_N must be at least 1");
    if (rnn_hidden == 0) throw ConfigError("rnn_hidden must be positive");
  }
};

// PE(t, 2i) = sin(t / 10000^(2i/D)), PE(t, 2i+1) = cos(same angle).
inline Matrix positional_encoding(std::size_t T, std::size_t D) {
  if (D % 2 != 0) throw ConfigError("positional encoding width must be even, got " + std::to_string(D));
  Matrix pe(T, D);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < D; i += 2) {
      const double angle = static_cast<double>(t) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(D));
      pe(t, i) = std::sin(angle);
      pe(t, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

enum class CellKind { Gru, Lstm };

// Names the weights of one recurrent direction inside a ParameterStore:
// <prefix>.W_x (input x gates*H), <prefix>.W_h (H x gates*H), <prefix>.b.
// Gate order: GRU [reset, update, candidate]; LSTM [input, forget, cell, output].
struct RecurrentCell {
  CellKind kind = CellKind::Gru;
  std::size_t input = 0;
  std::size_t hidden = 0;
  std::string prefix;

  [[nodiscard]] std::size_t gates() const { return kind == CellKind::Gru ? 3 : 4; }
};

inline void add_cell_params(ParameterStore& store, const RecurrentCell& cell, std::mt19937_64& rng) {
  const std::size_t width = cell.gates() * cell.hidden;
  store.add_weight(cell.prefix + ".W_x", cell.input, width, rng);
  store.add_weight(cell.prefix + ".W_h", cell.hidden, width, rng);
  store.add_constant(cell.prefix + ".b", 1, width, 0.0);
}

// Scans X (T x input) and returns the T x H hidden states aligned with the
// input rows. With `reverse` the scan runs from the last row to the first.
// Initial hidden and cell states are zero.
inline Tensor run_cell(const Tensor& X, const RecurrentCell& cell, ParamBinder& params, bool reverse) {
  const std::size_t T = X.rows();
  const std::size_t H = cell.hidden;
  if (T == 0) throw DataError("recurrent layer given an empty sequence");
  if (X.cols() != cell.input) {
    throw DimensionError("recurrent cell '" + cell.prefix + "' expects width " + std::to_string(cell.input) +
                         ", got " + X.value().shape_str());
  }
  Tape& tape = X.tape();
  const Tensor W_h = params(cell.prefix + ".W_h");
  const Tensor projected = matmul(X, params(cell.prefix + ".W_x")) + params(cell.prefix + ".b");

  std::vector<Tensor> states(T);
  Tensor h = tape.constant(Matrix(1, H));
  Tensor c = tape.constant(Matrix(1, H));
  for (std::size_t step = 0; step < T; ++step) {
    const std::size_t t = reverse ? T - 1 - step : step;
    const Tensor xt = slice(projected, 0, t, t + 1);
    const Tensor ht = matmul(h, W_h);
    if (cell.kind == CellKind::Gru) {
      const Tensor gates = sigmoid(slice(xt, 1, 0, 2 * H) + slice(ht, 1, 0, 2 * H));
      const Tensor r = slice(gates, 1, 0, H);
      const Tensor z = slice(gates, 1, H, 2 * H);
      const Tensor n = tanh(slice(xt, 1, 2 * H, 3 * H) + r * slice(ht, 1, 2 * H, 3 * H));
      // (1 - z) * n + z * h
      h = n + z * (h - n);
    } else {
      const Tensor pre = xt + ht;
      const Tensor s = sigmoid(pre);
      const Tensor i = slice(s, 1, 0, H);
      const Tensor f = slice(s, 1, H, 2 * H);
      const Tensor o = slice(s, 1, 3 * H, 4 * H);
      const Tensor g = tanh(slice(pre, 1, 2 * H, 3 * H));
      c = f * c + i * g;
      h = o * tanh(c);
    }
    states[t] = h;
  }
  return concat(std::span<const Tensor>(states), 0);
}

// Forward and backward scans concatenated per step: T x 2H.
inline Tensor birnn_forward(const Tensor& X, const RecurrentCell& fwd, const RecurrentCell& bwd, ParamBinder& params) {
  if (X.rows() == 0) throw DataError("bidirectional recurrent layer given an empty sequence");
  const Tensor forward_states = run_cell(X, fwd, params, false);
  const Tensor backward_states = run_cell(X, bwd, params, true);
  return concat({forward_states, backward_states}, 1);
}

// A bidirectional layer with its output projection (2H -> out) under one prefix.
struct BiRnn {
  RecurrentCell fwd;
  RecurrentCell bwd;
  std::string out_prefix;

  static BiRnn make(const std::string& prefix, CellKind kind, std::size_t input, std::size_t hidden) {
    return BiRnn{RecurrentCell{kind, input, hidden, prefix + ".fwd"}, RecurrentCell{kind, input, hidden, prefix + ".bwd"},
                 prefix + ".out"};
  }

  void add_params(ParameterStore& store, std::size_t out_width, std::mt19937_64& rng) const {
    add_cell_params(store, fwd, rng);
    add_cell_params(store, bwd, rng);
    add_linear(store, out_prefix, 2 * fwd.hidden, out_width, rng);
  }

  [[nodiscard]] Tensor operator()(const Tensor& X, ParamBinder& params) const {
    return linear(birnn_forward(X, fwd, bwd, params), params, out_prefix);
  }
};

namespace encoder_layout {
inline BiRnn video_rnn(const EncoderConfig& c) {
  return BiRnn::make("enc.video.gru", CellKind::Gru, c.d_model, c.rnn_hidden);
}
inline BiRnn query_rnn(const EncoderConfig& c) {
  return BiRnn::make("enc.query.gru", CellKind::Gru, c.d_model, c.rnn_hidden);
}
}  // namespace encoder_layout

inline void add_encoder_params(ParameterStore& store, const EncoderConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  add_linear(store, "enc.video.in", cfg.d_video_in, cfg.d_model, rng);
  encoder_layout::video_rnn(cfg).add_params(store, cfg.d_model, rng);
  // Trainable lookup table, unit-scale like pre-trained word vectors.
  std::normal_distribution<double> unit(0.0, 1.0);
  Matrix embed(cfg.vocab_size, cfg.d_model);
  for (double& v : embed.data) v = unit(rng);
  store.add("enc.query.embed", std::move(embed));
  encoder_layout::query_rnn(cfg).add_params(store, cfg.d_model, rng);
}

// raw: T x d_video_in frame features -> V: T x d_model.
inline Tensor encode_video(const Tensor& raw, ParamBinder& params, const EncoderConfig& cfg) {
  const std::size_t T = raw.rows();
  if (T == 0) throw DataError("video has no frames");
  if (T > cfg.max_T) {
    throw DataError("video has " + std::to_string(T) + " frames, more than max_T=" + std::to_string(cfg.max_T) +
                    "; subsample or truncate to max_T before encoding");
  }
  if (raw.cols() != cfg.d_video_in) {
    throw DimensionError("video features have width " + std::to_string(raw.cols()) + ", expected " +
                         std::to_string(cfg.d_video_in));
  }
  Tape& tape = raw.tape();
  const Tensor x = linear(raw, params, "enc.video.in") + tape.constant(positional_encoding(T, cfg.d_model));
  return encoder_layout::video_rnn(cfg)(x, params);
}

inline Tensor encode_video(const Matrix& raw, ParamBinder& params, const EncoderConfig& cfg) {
  return encode_video(params.tape().constant(raw), params, cfg);
}

// tokens: N ids -> Q: N x d_model.
inline Tensor encode_query(std::span<const int> tokens, ParamBinder& params, const EncoderConfig& cfg) {
  const std::size_t N = tokens.size();
  if (N == 0) throw DataError("query has no tokens");
  if (N > cfg.max_N) {
    throw DataError("query has " + std::to_string(N) + " tokens, more than max_N=" + std::to_string(cfg.max_N));
  }
  std::vector<std::ptrdiff_t> rows(N);
  for (std::size_t n = 0; n < N; ++n) {
    if (tokens[n] < 0 || static_cast<std::size_t>(tokens[n]) >= cfg.vocab_size) {
      throw VocabularyError("token id " + std::to_string(tokens[n]) + " outside vocabulary of size " +
                            std::to_string(cfg.vocab_size));
    }
    rows[n] = tokens[n];
  }
  Tape& tape = params.tape();
  const Tensor x = gather_rows(params("enc.query.embed"), std::move(rows)) +
                   tape.constant(positional_encoding(N, cfg.d_model));
  return encoder_layout::query_rnn(cfg)(x, params);
}

}  // namespace cbln
