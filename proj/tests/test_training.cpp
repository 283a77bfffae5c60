#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "cbln/diagnostics.hpp"
#include "cbln/training.hpp"

using namespace cbln;

namespace {

// Independent brute force: walk the frames and count membership.
double iou_by_counting(std::size_t s, std::size_t e, const Segment& gt) {
  if (s > e) return 0.0;
  std::size_t inter = 0, uni = 0;
  for (std::size_t f = 0; f <= std::max(e, gt.end); ++f) {
    const bool in_p = f >= s && f <= e;
    const bool in_g = f >= gt.start && f <= gt.end;
    inter += in_p && in_g;
    uni += in_p || in_g;
  }
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "cbln_test_training";
  std::filesystem::create_directories(dir);
  return dir / name;
}

GroundingExample toy_example(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.T = 6;
  spec.D_v = 4;
  spec.vocab_size = 10;
  spec.N_min = 2;
  spec.N_max = 3;
  spec.seg_min = 2;
  spec.seg_max = 3;
  spec.seed = seed;
  return generate_dataset(spec, 1, Split::Train).front();
}

}  // namespace

TEST(ComputeIou, PointValues) {
  EXPECT_DOUBLE_EQ(compute_iou({2, 5}, {2, 5}), 1.0);
  EXPECT_DOUBLE_EQ(compute_iou({0, 1}, {4, 7}), 0.0);
  // inter {1,2}, union {0..3}
  EXPECT_DOUBLE_EQ(compute_iou({0, 2}, {1, 3}), 0.5);
  EXPECT_DOUBLE_EQ(compute_iou({3, 1}, {1, 3}), 0.0);
  EXPECT_THROW(compute_iou({0, 1}, {3, 2}), DataError);
}

TEST(Supervision, FourFrameHandTable) {
  const Matrix O = build_supervision({1, 2}, 4);
  const Matrix expected = Matrix::from_rows({{0, 1.0 / 3, 2.0 / 3, 0.5},
                                             {0, 0.5, 1, 2.0 / 3},
                                             {0, 0, 0.5, 1.0 / 3},
                                             {0, 0, 0, 0}});
  for (std::size_t i = 0; i < 16; ++i) EXPECT_DOUBLE_EQ(O.data[i], expected.data[i]) << i;
}

TEST(Supervision, ExhaustiveAgainstBruteForce) {
  for (std::size_t T = 1; T <= 8; ++T) {
    for (std::size_t gs = 0; gs < T; ++gs) {
      for (std::size_t ge = gs; ge < T; ++ge) {
        const Segment gt{gs, ge};
        const Matrix O = build_supervision(gt, T);
        double peak = 0.0;
        for (std::size_t s = 0; s < T; ++s) {
          for (std::size_t e = 0; e < T; ++e) peak = std::max(peak, iou_by_counting(s, e, gt));
        }
        for (std::size_t s = 0; s < T; ++s) {
          for (std::size_t e = 0; e < T; ++e) {
            EXPECT_EQ(O(s, e), iou_by_counting(s, e, gt) / peak);
            if (s > e) EXPECT_EQ(O(s, e), 0.0);
          }
        }
        EXPECT_EQ(*std::max_element(O.data.begin(), O.data.end()), 1.0);
        EXPECT_EQ(O(gs, ge), 1.0);
      }
    }
  }
}

TEST(Supervision, GroundTruthOutsideVideo) {
  EXPECT_THROW(build_supervision({2, 4}, 4), DataError);
  EXPECT_THROW(build_supervision({3, 2}, 4), DataError);
}

TEST(Bce, ConstantHalfIsLogTwo) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t T : {1u, 3u, 8u}) {
    Tape tape;
    Matrix targets(T, T);
    for (double& v : targets.data) v = u(rng);
    EXPECT_NEAR(bce_loss(tape.constant(Matrix(T, T, 0.5)), targets).item(), std::log(2.0), 1e-12);
  }
}

TEST(Bce, SingleCellHandValue) {
  Tape tape;
  const double loss = bce_loss(tape.constant(Matrix(1, 1, 0.8)), Matrix(1, 1, 0.5)).item();
  EXPECT_NEAR(loss, -(0.5 * std::log(0.8) + 0.5 * std::log(0.2)), 1e-15);
  EXPECT_NEAR(loss, 0.9163, 1e-4);
}

TEST(Bce, PerfectPredictionApproachesZero) {
  Tape tape;
  Matrix targets(3, 3);
  targets(1, 2) = 1.0;
  Matrix scores(3, 3, 1e-12);
  scores(1, 2) = 1.0 - 1e-12;
  const double loss = bce_loss(tape.constant(scores), targets).item();
  EXPECT_GE(loss, 0.0);
  // Clamping at 1e-7 bounds the loss from below by -log(1 - 1e-7).
  EXPECT_LT(loss, 2e-7);
}

TEST(Bce, NonNegativeAndShapeChecked) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 50; ++i) {
    Tape tape;
    Matrix m(4, 4), o(4, 4);
    for (double& v : m.data) v = u(rng);
    for (double& v : o.data) v = u(rng);
    EXPECT_GE(bce_loss(tape.constant(m), o).item(), 0.0);
  }
  Tape tape;
  EXPECT_THROW(bce_loss(tape.constant(Matrix(3, 3, 0.5)), Matrix(3, 2)), DimensionError);
}

TEST(Bce, MaskInvalidAveragesUpperTriangle) {
  Tape tape;
  Matrix scores(2, 2, 0.5);
  scores(1, 0) = 0.9;  // ignored when masked
  const BceOptions masked{1e-7, true};
  EXPECT_NEAR(bce_loss(tape.constant(scores), Matrix(2, 2), masked).item(), std::log(2.0), 1e-15);
  EXPECT_GT(bce_loss(tape.constant(scores), Matrix(2, 2)).item(), std::log(2.0));
}

TEST(Bce, GradientCheckThroughSigmoid) {
  const auto f = [](Tape&, const Tensor& z) { return bce_loss(sigmoid(z), build_supervision({0, 1}, 3)); };
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix z(3, 3);
  for (double& v : z.data) v = n(rng);
  const auto rep = finite_diff_check(f, z);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(Adam, ZeroGradientIsIdentity) {
  ParameterStore store;
  std::mt19937_64 rng(4);
  store.add_weight("w", 3, 2, rng);
  const Matrix before = store[0].value;
  for (int i = 0; i < 3; ++i) adam_step(store, store.zero_grads(), AdamConfig{});
  EXPECT_EQ(store[0].value, before);
  EXPECT_EQ(store.step(), 3);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParameterStore store;
  store.add("w", Matrix::row_vector({1.0, 1.0, 1.0}));
  std::vector<Matrix> g{Matrix::row_vector({3.0, -0.01, 250.0})};
  AdamConfig cfg;
  cfg.lr = 0.01;
  adam_step(store, g, cfg);
  EXPECT_NEAR(store[0].value.data[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(store[0].value.data[1], 1.0 + 0.01, 1e-8);
  EXPECT_NEAR(store[0].value.data[2], 1.0 - 0.01, 1e-9);
}

TEST(Adam, TwoStepHandOracle) {
  ParameterStore store;
  store.add("w", Matrix(1, 1, 0.0));
  AdamConfig cfg;
  cfg.lr = 0.1;
  std::vector<Matrix> g{Matrix(1, 1, 1.0)};
  adam_step(store, g, cfg);
  // m = 0.1, v = 0.001 -> bias-corrected 1 and 1
  EXPECT_NEAR(store[0].value.data[0], -0.1 / (1.0 + 1e-8), 1e-15);
  adam_step(store, g, cfg);
  // m = 0.19, v = 0.001999 -> corrected by 0.19 and 0.001999 -> 1 and 1 again
  EXPECT_NEAR(store[0].value.data[0], -0.2 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(store[0].first_moment.data[0], 0.19, 1e-15);
  EXPECT_NEAR(store[0].second_moment.data[0], 0.001999, 1e-15);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  ParameterStore store;
  store.add("enc.a", Matrix(1, 1));
  store.add("mcbl.b", Matrix(1, 2));
  std::vector<Matrix> g = store.zero_grads();
  g[1].data[1] = std::numeric_limits<double>::quiet_NaN();
  try {
    adam_step(store, g, AdamConfig{});
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("mcbl.b"), std::string::npos);
  }
  EXPECT_EQ(store.step(), 0);
}

TEST(Adam, InvalidConfig) {
  TrainConfig cfg;
  cfg.adam.lr = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Train, SingleExampleBeatsConstantPredictor) {
  CblnModel model(toy_model_config(), 1);
  const std::vector<GroundingExample> data{toy_example(1)};
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.batch_size = 1;
  cfg.adam.lr = 3e-3;
  const TrainResult r = train(model, data, cfg);
  ASSERT_EQ(r.epoch_losses.size(), 40u);
  EXPECT_LT(r.epoch_losses.back(), std::log(2.0));
  EXPECT_LT(r.epoch_losses.back(), r.epoch_losses.front());
}

TEST(Train, FixedSeedGivesIdenticalTrace) {
  std::vector<GroundingExample> data;
  for (std::uint64_t s = 0; s < 5; ++s) data.push_back(toy_example(s));
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.seed = 4;
  auto run = [&] {
    CblnModel model(toy_model_config(), 4);
    return std::pair{train(model, data, cfg).step_losses, model.params()[3].value};
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first.size(), 6u);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Train, EmptyDatasetRejected) {
  CblnModel model(toy_model_config(), 1);
  EXPECT_THROW(train(model, {}, TrainConfig{}), DataError);
}

TEST(Checkpoint, RoundTripAndCorruption) {
  CblnModel a(toy_model_config(), 5);
  a.params().set_step(17);
  const auto path = temp_path("ck.bin");
  save_checkpoint(path, a.params(), {{"note", "x"}});
  CblnModel b(toy_model_config(), 6);
  const nlohmann::json header = load_checkpoint(path, b.params());
  EXPECT_EQ(header.at("note"), "x");
  EXPECT_EQ(b.params().step(), 17);
  for (std::size_t k = 0; k < a.params().size(); ++k) EXPECT_EQ(a.params()[k].value, b.params()[k].value);

  std::string bytes = detail::read_file(path);
  detail::write_file(path, bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_checkpoint(path, b.params()), FormatError);
  detail::write_file(path, "NOTACKPT" + bytes.substr(8));
  EXPECT_THROW(load_checkpoint(path, b.params()), FormatError);

  ModelConfig other = toy_model_config();
  other.mcbl.d_context = 6;
  CblnModel c(other, 5);
  save_checkpoint(path, a.params(), {});
  EXPECT_THROW(load_checkpoint(path, c.params()), FormatError);
}

TEST(LossTrace, CsvFormat) {
  const auto path = temp_path("loss.csv");
  const std::vector<double> losses{0.5, 0.25};
  write_loss_trace(path, losses);
  EXPECT_EQ(detail::read_file(path), "step,loss\n1,0.5\n2,0.25\n");
}

TEST(FullLoss, GradientCheck) {
  const DiagnosticSuite suite = run_gradient_diagnostics({}, {"loss"});
  ASSERT_EQ(suite.results.size(), 2u);
  for (const auto& r : suite.results) {
    EXPECT_TRUE(r.report.passed) << r.name << " " << r.report.worst_input << " " << r.report.max_rel_error;
  }
}
