#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cbln/diagnostics.hpp"
#include "cbln/encoders.hpp"

using namespace cbln;

namespace {

EncoderConfig toy() {
  EncoderConfig c;
  c.d_model = 8;
  c.d_video_in = 5;
  c.vocab_size = 12;
  c.max_T = 10;
  c.max_N = 4;
  c.rnn_hidden = 4;
  return c;
}

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  Matrix m(r, c);
  for (double& v : m.data) v = d(rng);
  return m;
}

ParameterStore encoder_store(const EncoderConfig& cfg, std::uint64_t seed) {
  ParameterStore store;
  std::mt19937_64 rng = derive_rng(seed);
  add_encoder_params(store, cfg, rng);
  return store;
}

}  // namespace

TEST(PositionalEncoding, FirstRowAlternatesZeroOne) {
  const Matrix pe = positional_encoding(3, 6);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(pe(0, i), i % 2 == 0 ? 0.0 : 1.0);
}

TEST(PositionalEncoding, HandValues) {
  const Matrix pe = positional_encoding(4, 8);
  EXPECT_NEAR(pe(1, 0), 0.841471, 1e-6);
  EXPECT_DOUBLE_EQ(pe(1, 0), std::sin(1.0));
  // i = 2 -> angle t / 10000^(2/8) = t / 10
  EXPECT_DOUBLE_EQ(pe(3, 2), std::sin(0.3));
  EXPECT_DOUBLE_EQ(pe(3, 3), std::cos(0.3));
}

TEST(PositionalEncoding, BoundedAndOddWidthRejected) {
  const Matrix pe = positional_encoding(200, 32);
  for (double v : pe.data) {
    EXPECT_LE(v, 1.0);
    EXPECT_GE(v, -1.0);
  }
  EXPECT_THROW(positional_encoding(4, 7), ConfigError);
}

TEST(BiRnn, ZeroWeightGruIsZeroMap) {
  ParameterStore store;
  std::mt19937_64 rng(1);
  const RecurrentCell fwd{CellKind::Gru, 3, 4, "g.fwd"}, bwd{CellKind::Gru, 3, 4, "g.bwd"};
  add_cell_params(store, fwd, rng);
  add_cell_params(store, bwd, rng);
  for (Parameter& p : store) std::fill(p.value.data.begin(), p.value.data.end(), 0.0);
  for (const Matrix& x : {Matrix(5, 3), random_matrix(5, 3, 2)}) {
    Tape tape;
    ParamBinder params(tape, store, false);
    EXPECT_EQ(birnn_forward(tape.constant(x), fwd, bwd, params).value(), Matrix(5, 8));
  }
}

TEST(BiRnn, ZeroWeightLstmIsZeroMap) {
  ParameterStore store;
  std::mt19937_64 rng(1);
  const RecurrentCell fwd{CellKind::Lstm, 3, 2, "l.fwd"}, bwd{CellKind::Lstm, 3, 2, "l.bwd"};
  add_cell_params(store, fwd, rng);
  add_cell_params(store, bwd, rng);
  for (Parameter& p : store) std::fill(p.value.data.begin(), p.value.data.end(), 0.0);
  Tape tape;
  ParamBinder params(tape, store, false);
  EXPECT_EQ(birnn_forward(tape.constant(random_matrix(4, 3, 3)), fwd, bwd, params).value(), Matrix(4, 4));
}

TEST(BiRnn, OutputShape) {
  ParameterStore store;
  std::mt19937_64 rng(1);
  const RecurrentCell fwd{CellKind::Gru, 5, 8, "g.fwd"}, bwd{CellKind::Gru, 5, 8, "g.bwd"};
  add_cell_params(store, fwd, rng);
  add_cell_params(store, bwd, rng);
  Tape tape;
  ParamBinder params(tape, store, false);
  const Tensor y = birnn_forward(tape.constant(random_matrix(7, 5, 4)), fwd, bwd, params);
  EXPECT_EQ(y.rows(), 7u);
  EXPECT_EQ(y.cols(), 16u);
  EXPECT_THROW(birnn_forward(tape.constant(Matrix(0, 5)), fwd, bwd, params), DataError);
}

TEST(BiRnn, ReversalSwapsDirections) {
  for (CellKind kind : {CellKind::Gru, CellKind::Lstm}) {
    ParameterStore store;
    std::mt19937_64 rng(5);
    const std::size_t T = 6, H = 3;
    const RecurrentCell fwd{kind, 4, H, "c.fwd"}, bwd{kind, 4, H, "c.bwd"};
    add_cell_params(store, fwd, rng);
    add_cell_params(store, bwd, rng);
    // Same weights in both directions.
    for (const char* s : {".W_x", ".W_h", ".b"}) store.at(std::string("c.bwd") + s).value = store.at(std::string("c.fwd") + s).value;

    const Matrix x = random_matrix(T, 4, 6);
    Matrix rev(T, 4);
    for (std::size_t t = 0; t < T; ++t) std::copy(x.row(T - 1 - t).begin(), x.row(T - 1 - t).end(), rev.row(t).begin());

    Tape tape;
    ParamBinder params(tape, store, false);
    const Matrix a = birnn_forward(tape.constant(x), fwd, bwd, params).value();
    const Matrix b = birnn_forward(tape.constant(rev), fwd, bwd, params).value();
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < H; ++j) {
        EXPECT_DOUBLE_EQ(b(t, j), a(T - 1 - t, H + j));
        EXPECT_DOUBLE_EQ(b(t, H + j), a(T - 1 - t, j));
      }
    }
  }
}

TEST(EncodeVideo, ShapeAndLengthLimit) {
  const EncoderConfig cfg = toy();
  const ParameterStore store = encoder_store(cfg, 1);
  Tape tape;
  ParamBinder params(tape, store, false);
  const Tensor V = encode_video(random_matrix(7, cfg.d_video_in, 1), params, cfg);
  EXPECT_EQ(V.rows(), 7u);
  EXPECT_EQ(V.cols(), cfg.d_model);
  try {
    (void)encode_video(random_matrix(cfg.max_T + 1, cfg.d_video_in, 1), params, cfg);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("max_T"), std::string::npos);
  }
  EXPECT_THROW((void)encode_video(random_matrix(4, cfg.d_video_in + 1, 1), params, cfg), DimensionError);
}

TEST(EncodeVideo, FullScaleLength) {
  EncoderConfig cfg;
  cfg.max_T = 200;
  const ParameterStore store = encoder_store(cfg, 2);
  Tape tape;
  ParamBinder params(tape, store, false);
  const Tensor V = encode_video(random_matrix(200, cfg.d_video_in, 2), params, cfg);
  EXPECT_EQ(V.rows(), 200u);
  EXPECT_EQ(V.cols(), cfg.d_model);
}

TEST(EncodeVideo, FrameOrderMatters) {
  const EncoderConfig cfg = toy();
  const ParameterStore store = encoder_store(cfg, 3);
  const Matrix x = random_matrix(5, cfg.d_video_in, 3);
  Matrix swapped = x;
  for (std::size_t c = 0; c < x.cols; ++c) std::swap(swapped(0, c), swapped(4, c));
  Tape tape;
  ParamBinder params(tape, store, false);
  EXPECT_NE(encode_video(x, params, cfg).value(), encode_video(swapped, params, cfg).value());
}

TEST(EncodeVideo, DeterministicGivenSeed) {
  const EncoderConfig cfg = toy();
  const Matrix x = random_matrix(6, cfg.d_video_in, 4);
  auto run = [&](std::uint64_t seed) {
    const ParameterStore store = encoder_store(cfg, seed);
    Tape tape;
    ParamBinder params(tape, store, false);
    return encode_video(x, params, cfg).value();
  };
  EXPECT_EQ(run(9), run(9));
  EXPECT_NE(run(9), run(10));
}

TEST(EncodeQuery, ShapesOrderAndVocabulary) {
  const EncoderConfig cfg = toy();
  const ParameterStore store = encoder_store(cfg, 4);
  Tape tape;
  ParamBinder params(tape, store, false);
  const std::vector<int> one{3};
  const Tensor q1 = encode_query(one, params, cfg);
  EXPECT_EQ(q1.rows(), 1u);
  EXPECT_EQ(q1.cols(), cfg.d_model);

  const std::vector<int> a{1, 2, 3}, b{3, 2, 1};
  EXPECT_EQ(encode_query(a, params, cfg).value(), encode_query(a, params, cfg).value());
  EXPECT_NE(encode_query(a, params, cfg).value(), encode_query(b, params, cfg).value());

  const std::vector<int> bad{1, 12}, negative{-1}, empty{};
  EXPECT_THROW((void)encode_query(bad, params, cfg), VocabularyError);
  EXPECT_THROW((void)encode_query(negative, params, cfg), VocabularyError);
  EXPECT_THROW((void)encode_query(empty, params, cfg), DataError);
}

TEST(Encoders, FiniteForEveryLength) {
  const EncoderConfig cfg = toy();
  const ParameterStore store = encoder_store(cfg, 5);
  for (std::size_t T = 1; T <= cfg.max_T; ++T) {
    Tape tape;
    ParamBinder params(tape, store, false);
    const Tensor V = encode_video(random_matrix(T, cfg.d_video_in, T), params, cfg);
    EXPECT_EQ(V.rows(), T);
    EXPECT_TRUE(all_finite(V.value()));
  }
  for (std::size_t N = 1; N <= cfg.max_N; ++N) {
    Tape tape;
    ParamBinder params(tape, store, false);
    std::vector<int> tokens(N);
    for (std::size_t n = 0; n < N; ++n) tokens[n] = static_cast<int>((3 * n + 1) % cfg.vocab_size);
    const Tensor Q = encode_query(tokens, params, cfg);
    EXPECT_EQ(Q.rows(), N);
    EXPECT_TRUE(all_finite(Q.value()));
  }
}

TEST(Encoders, GradientCheck) {
  const DiagnosticSuite suite = run_gradient_diagnostics({}, {"encoders"});
  ASSERT_FALSE(suite.results.empty());
  for (const auto& r : suite.results) EXPECT_TRUE(r.report.passed) << r.name << " " << r.report.max_rel_error;
}
