#pragma once

// Gradient-check suite at toy sizes (T <= 5, N <= 3, D <= 8). Shared by the
// `gradcheck` command and the test suite.

#include <chrono>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cbln/data.hpp"
#include "cbln/gradcheck.hpp"
#include "cbln/mcbl.hpp"
#include "cbln/mmsa.hpp"
#include "cbln/model.hpp"
#include "cbln/tensor.hpp"
#include "cbln/training.hpp"

namespace cbln {

struct DiagnosticResult {
  std::string group;  // "tensor", "encoders", "mmsa", "mcbl", "loss"
  std::string name;
  GradCheckReport report;
};

struct DiagnosticSuite {
  std::vector<DiagnosticResult> results;
  double seconds = 0.0;

  [[nodiscard]] bool passed() const {
    for (const auto& r : results) {
      if (!r.report.passed) return false;
    }
    return !results.empty();
  }

  // Worst relative error within one group (or overall for an empty group).
  [[nodiscard]] double worst(const std::string& group = {}) const {
    double w = 0.0;
    for (const auto& r : results) {
      if (group.empty() || r.group == group) w = std::max(w, r.report.max_rel_error);
    }
    return w;
  }
};

inline ModelConfig toy_model_config() {
  ModelConfig c;
  c.encoder.d_model = 8;
  c.encoder.d_video_in = 4;
  c.encoder.vocab_size = 10;
  c.encoder.max_T = 8;
  c.encoder.max_N = 4;
  c.encoder.rnn_hidden = 4;
  c.mcbl.local_scales = {1, 3, 5};
  c.mcbl.global_scales = {1, 2, 4};
  c.mcbl.d_boundary = 8;
  c.mcbl.d_context = 8;
  return c;
}

namespace detail {

inline Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Matrix m(r, c);
  for (double& v : m.data) v = dist(rng);
  return m;
}

// Scalar probe sum(y .* R) with a fixed random R, so that outputs whose plain
// sum is constant (softmax rows, layer-norm rows) still get a useful gradient.
inline Tensor probe(const Tensor& y, std::uint64_t salt) {
  std::mt19937_64 rng = derive_rng(0xc0ffee, salt, y.rows(), y.cols());
  const Tensor w = y.tape().constant(random_matrix(y.rows(), y.cols(), rng));
  return sum_all(y * w);
}

// Inputs bounded away from 0 so relu / max / clamp kinks stay further than h.
inline Matrix kink_free(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  Matrix m = random_matrix(r, c, rng, 0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (double& v : m.data) {
    if (sign(rng)) v = -v;
  }
  // Spread values so no two entries tie for a max.
  for (std::size_t i = 0; i < m.size(); ++i) m.data[i] += 1e-3 * static_cast<double>(i);
  return m;
}

struct OpCase {
  std::string name;
  std::function<Tensor(Tape&, std::span<const Tensor>)> fn;
  // Input shapes for shape variant k.
  std::function<std::vector<Matrix>(std::size_t k, std::mt19937_64&)> inputs;
};

inline std::vector<OpCase> op_cases() {
  using Shapes = std::vector<std::pair<std::size_t, std::size_t>>;
  static const Shapes shapes{{1, 1}, {2, 3}, {4, 2}};
  auto one = [](auto op) {
    return [op](Tape&, std::span<const Tensor> x) { return probe(op(x[0]), 1); };
  };
  auto unary_inputs = [](double lo, double hi) {
    return [lo, hi](std::size_t k, std::mt19937_64& rng) {
      const auto [r, c] = shapes[k];
      return std::vector<Matrix>{lo > 0.0 ? random_matrix(r, c, rng, lo, hi) : kink_free(r, c, rng)};
    };
  };
  auto pair_inputs = [](std::size_t k, std::mt19937_64& rng) {
    const auto [r, c] = shapes[k];
    return std::vector<Matrix>{kink_free(r, c, rng), kink_free(r, c, rng)};
  };

  std::vector<OpCase> cases;
  cases.push_back({"matmul",
                   [](Tape&, std::span<const Tensor> x) { return probe(matmul(x[0], x[1]), 2); },
                   [](std::size_t k, std::mt19937_64& rng) {
                     const std::size_t m = k + 1, n = 3 - k, p = 2 + k;
                     return std::vector<Matrix>{random_matrix(m, n, rng), random_matrix(n, p, rng)};
                   }});
  cases.push_back({"transpose", one([](const Tensor& t) { return transpose(t); }), unary_inputs(0, 0)});
  cases.push_back({"sigmoid", one([](const Tensor& t) { return sigmoid(t); }), unary_inputs(0, 0)});
  cases.push_back({"tanh", one([](const Tensor& t) { return tanh(t); }), unary_inputs(0, 0)});
  cases.push_back({"relu", one([](const Tensor& t) { return relu(t); }), unary_inputs(0, 0)});
  cases.push_back({"exp", one([](const Tensor& t) { return exp(t); }), unary_inputs(0, 0)});
  cases.push_back({"log", one([](const Tensor& t) { return log(t); }), unary_inputs(0.2, 2.0)});
  cases.push_back({"add", [](Tape&, std::span<const Tensor> x) { return probe(x[0] + x[1], 3); }, pair_inputs});
  cases.push_back({"sub", [](Tape&, std::span<const Tensor> x) { return probe(x[0] - x[1], 3); }, pair_inputs});
  cases.push_back({"mul", [](Tape&, std::span<const Tensor> x) { return probe(x[0] * x[1], 3); }, pair_inputs});
  cases.push_back({"mul_broadcast",
                   [](Tape&, std::span<const Tensor> x) { return probe(x[0] * x[1] + x[2], 4); },
                   [](std::size_t k, std::mt19937_64& rng) {
                     const auto [r, c] = shapes[k];
                     return std::vector<Matrix>{random_matrix(r, c, rng), random_matrix(1, c, rng),
                                                random_matrix(r, 1, rng)};
                   }});
  cases.push_back({"affine", one([](const Tensor& t) { return affine(t, -1.5, 0.25); }), unary_inputs(0, 0)});
  cases.push_back({"clamp", one([](const Tensor& t) { return clamp(t, -0.5, 0.5); }), unary_inputs(0, 0)});
  cases.push_back({"softmax_rows", one([](const Tensor& t) { return softmax(t, 1); }), unary_inputs(0, 0)});
  cases.push_back({"softmax_cols", one([](const Tensor& t) { return softmax(t, 0); }), unary_inputs(0, 0)});
  for (int axis : {0, 1}) {
    const std::string suffix = axis == 0 ? "_cols" : "_rows";
    cases.push_back({"reduce_max" + suffix, one([axis](const Tensor& t) { return reduce(t, Reduce::Max, axis); }),
                     unary_inputs(0, 0)});
    cases.push_back({"reduce_mean" + suffix, one([axis](const Tensor& t) { return reduce(t, Reduce::Mean, axis); }),
                     unary_inputs(0, 0)});
    cases.push_back({"reduce_sum" + suffix, one([axis](const Tensor& t) { return reduce(t, Reduce::Sum, axis); }),
                     unary_inputs(0, 0)});
  }
  cases.push_back({"concat",
                   [](Tape&, std::span<const Tensor> x) {
                     return probe(concat({x[0], x[1]}, 1), 5) + probe(concat({x[0], x[0]}, 0), 6);
                   },
                   pair_inputs});
  cases.push_back({"slice",
                   [](Tape&, std::span<const Tensor> x) {
                     const Tensor& t = x[0];
                     return probe(slice(t, 1, t.cols() / 2, t.cols()), 7) + probe(slice(t, 0, 0, 1), 8);
                   },
                   unary_inputs(0, 0)});
  cases.push_back({"gather_rows",
                   [](Tape&, std::span<const Tensor> x) {
                     const auto last = static_cast<std::ptrdiff_t>(x[0].rows()) - 1;
                     return probe(gather_rows(x[0], {last, -1, 0, last}), 9);
                   },
                   unary_inputs(0, 0)});
  cases.push_back({"reshape_repeat",
                   [](Tape&, std::span<const Tensor> x) {
                     const Tensor flat = reshape(x[0], 1, x[0].value().size());
                     return probe(repeat_rows(flat, 3), 10);
                   },
                   unary_inputs(0, 0)});
  cases.push_back({"layer_norm",
                   [](Tape&, std::span<const Tensor> x) { return probe(layer_norm(x[0], x[1], x[2]), 11); },
                   [](std::size_t k, std::mt19937_64& rng) {
                     const std::size_t r = k + 1, c = 2 + k;
                     return std::vector<Matrix>{random_matrix(r, c, rng), random_matrix(1, c, rng),
                                                random_matrix(1, c, rng)};
                   }});
  cases.push_back({"dropout",
                   [](Tape&, std::span<const Tensor> x) {
                     std::mt19937_64 rng = derive_rng(42);
                     return probe(dropout(x[0], 0.3, true, rng), 12);
                   },
                   unary_inputs(0, 0)});
  return cases;
}

inline void put_random(ParameterStore& store, const std::string& name, std::size_t r, std::size_t c,
                       std::mt19937_64& rng) {
  store.add(name, random_matrix(r, c, rng));
}

}  // namespace detail

// Runs every check. `groups` filters by group name; empty runs all.
inline DiagnosticSuite run_gradient_diagnostics(const GradCheckOptions& opt = {},
                                                const std::vector<std::string>& groups = {}) {
  const auto start = std::chrono::steady_clock::now();
  auto wanted = [&](const std::string& g) {
    return groups.empty() || std::find(groups.begin(), groups.end(), g) != groups.end();
  };
  DiagnosticSuite suite;
  std::mt19937_64 rng = derive_rng(0x9c4ec6);

  if (wanted("tensor")) {
    for (const auto& c : detail::op_cases()) {
      for (std::size_t k = 0; k < 3; ++k) {
        const auto inputs = c.inputs(k, rng);
        suite.results.push_back({"tensor", c.name + "/" + inputs[0].shape_str(), finite_diff_check(c.fn, inputs, opt)});
      }
    }
  }

  const ModelConfig cfg = toy_model_config();
  const std::size_t T = 5, N = 3, D = cfg.encoder.d_model;
  const std::vector<int> tokens{1, 4, 7};
  const Matrix features = detail::random_matrix(T, cfg.encoder.d_video_in, rng);

  if (wanted("encoders")) {
    ParameterStore store;
    add_encoder_params(store, cfg.encoder, rng);
    store.add("input.video", features);
    auto f = [&](ParamBinder& p) {
      const Tensor V = encode_video(p("input.video"), p, cfg.encoder);
      const Tensor Q = encode_query(tokens, p, cfg.encoder);
      return detail::probe(V, 20) + detail::probe(Q, 21);
    };
    suite.results.push_back({"encoders", "encode_video+encode_query", finite_diff_check(f, store, opt)});
  }

  if (wanted("mmsa")) {
    ParameterStore store;
    add_mmsa_params(store, D, rng);
    detail::put_random(store, "input.V", T, D, rng);
    detail::put_random(store, "input.Q", N, D, rng);
    auto f = [&](ParamBinder& p) {
      return detail::probe(mmsa_forward(p("input.V"), p("input.Q"), MmsaParams::bind(p)), 30);
    };
    suite.results.push_back({"mmsa", "mmsa_forward", finite_diff_check(f, store, opt)});
    auto g = [&](ParamBinder& p) {
      return detail::probe(mmsa_forward_reference(p("input.V"), p("input.Q"), MmsaParams::bind(p)), 30);
    };
    suite.results.push_back({"mmsa", "mmsa_forward_reference", finite_diff_check(g, store, opt)});
  }

  if (wanted("mcbl")) {
    for (const bool contexts : {true, false}) {
      McblConfig mc = cfg.localization();
      mc.use_contexts = contexts;
      ParameterStore store;
      add_mcbl_params(store, mc, rng);
      detail::put_random(store, "input.fused", T, 2 * D, rng);
      auto f = [&](ParamBinder& p) {
        std::mt19937_64 drop = derive_rng(0xd0);
        return detail::probe(mcbl_forward(p("input.fused"), p, mc, ForwardMode{true, &drop}), 40);
      };
      suite.results.push_back(
          {"mcbl", contexts ? "mcbl_forward" : "mcbl_forward/biaffine_only", finite_diff_check(f, store, opt)});
    }
  }

  if (wanted("loss")) {
    CblnModel model(cfg, 3);
    GroundingExample ex{features, tokens, Segment{1, 3}, 5.0};
    auto f = [&](ParamBinder& p) {
      std::mt19937_64 drop = derive_rng(0xd1);
      return example_loss(model, p, ex, ForwardMode{true, &drop}, BceOptions{});
    };
    suite.results.push_back({"loss", "full_loss", finite_diff_check(f, model.params(), opt)});
    auto g = [&](Tape&, std::span<const Tensor> x) {
      return bce_loss(sigmoid(x[0]), build_supervision(Segment{1, 2}, 4));
    };
    suite.results.push_back({"loss", "bce_loss", finite_diff_check(g, {detail::random_matrix(4, 4, rng)}, opt)});
  }

  suite.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return suite;
}

}  // namespace cbln
