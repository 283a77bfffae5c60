#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include "cbln/data.hpp"
#include "cbln/diagnostics.hpp"
#include "cbln/evaluation.hpp"

using namespace cbln;

namespace {

Prediction ranked(std::initializer_list<Segment> segs) {
  Prediction p;
  double score = 1.0;
  for (const Segment& s : segs) {
    p.push_back({s, score});
    score -= 0.1;
  }
  return p;
}

Matrix random_map(std::size_t T, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix m(T, T);
  for (double& v : m.data) v = u(rng);
  return m;
}

}  // namespace

TEST(TopN, UniqueMax) {
  Matrix m(8, 8, 0.1);
  m(2, 6) = 0.95;
  const Prediction p = top_n_segments(m, 1);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p[0].segment, (Segment{2, 6}));
  EXPECT_DOUBLE_EQ(p[0].score, 0.95);
}

TEST(TopN, NmsSkipsNearDuplicate) {
  Matrix m(10, 10, 0.1);
  m(0, 5) = 0.9;
  m(0, 4) = 0.85;  // IoU with (0,5) is 5/6
  m(7, 9) = 0.6;
  ASSERT_GT(compute_iou({0, 4}, {0, 5}), 0.5);
  const Prediction p = top_n_segments(m, 2, 0.5);
  ASSERT_EQ(p.size(), 2u);
  EXPECT_EQ(p[0].segment, (Segment{0, 5}));
  EXPECT_EQ(p[1].segment, (Segment{7, 9}));
}

TEST(TopN, ReturnsAllSurvivors) {
  Matrix m(2, 2, 0.2);
  m(0, 1) = 0.9;
  // (0,0) and (1,1) each overlap (0,1) with IoU 0.5.
  EXPECT_EQ(top_n_segments(m, 10, 0.3).size(), 1u);
  EXPECT_EQ(top_n_segments(m, 10, 0.5).size(), 3u);
}

TEST(TopN, NmsDisabledIsPlainRanking) {
  std::mt19937_64 rng(1);
  const Matrix m = random_map(6, rng);
  std::vector<double> upper;
  for (std::size_t s = 0; s < 6; ++s) {
    for (std::size_t e = s; e < 6; ++e) upper.push_back(m(s, e));
  }
  std::sort(upper.rbegin(), upper.rend());
  const Prediction p = top_n_segments(m, 5, 1.0);
  ASSERT_EQ(p.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(p[i].score, upper[i]);
}

TEST(TopN, InvariantsOnRandomMaps) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t T = 2 + trial % 12;
    const Matrix m = random_map(T, rng);
    const double nms = 0.3 + 0.1 * (trial % 5);
    const Prediction p = top_n_segments(m, 5, nms);
    ASSERT_FALSE(p.empty());
    for (std::size_t i = 0; i < p.size(); ++i) {
      EXPECT_LE(p[i].segment.start, p[i].segment.end);
      EXPECT_LT(p[i].segment.end, T);
      if (i > 0) EXPECT_LE(p[i].score, p[i - 1].score);
      for (std::size_t j = 0; j < i; ++j) EXPECT_LE(compute_iou(p[i].segment, p[j].segment), nms);
    }
  }
}

TEST(TopN, TiesBreakByStartThenEnd) {
  const Matrix m(3, 3, 0.5);
  const Prediction p = top_n_segments(m, 3, 1.0);
  EXPECT_EQ(p[0].segment, (Segment{0, 0}));
  EXPECT_EQ(p[1].segment, (Segment{0, 1}));
  EXPECT_EQ(p[2].segment, (Segment{0, 2}));
}

TEST(TopN, Errors) {
  EXPECT_THROW(top_n_segments(Matrix(3, 3), 0), ConfigError);
  EXPECT_THROW(top_n_segments(Matrix(0, 0), 1), DataError);
  EXPECT_THROW(top_n_segments(Matrix(2, 3), 1), DataError);
}

TEST(Recall, FourSampleFixture) {
  // Hand-counted IoUs of the top-1 / any prediction:
  //   sample 0: 1.0
  //   sample 1: 0.25 at rank 1, 1.0 at rank 2
  //   sample 2: 0.5 exactly
  //   sample 3: 0
  const std::vector<Prediction> preds{ranked({{0, 3}}), ranked({{4, 9}, {2, 5}}), ranked({{0, 4}}),
                                      ranked({{0, 1}, {13, 15}})};
  const std::vector<Segment> gts{{0, 3}, {2, 5}, {0, 9}, {10, 12}};
  EXPECT_DOUBLE_EQ(recall_at(preds, gts, 1, 0.5), 50.0);
  EXPECT_DOUBLE_EQ(recall_at(preds, gts, 5, 0.5), 75.0);
  EXPECT_DOUBLE_EQ(recall_at(preds, gts, 1, 0.3), 50.0);
  EXPECT_DOUBLE_EQ(recall_at(preds, gts, 1, 0.7), 25.0);
  EXPECT_DOUBLE_EQ(recall_at(preds, gts, 1, 0.2), 75.0);
  EXPECT_DOUBLE_EQ(recall_at(preds, gts, 1, 0.5, true), 25.0);
}

TEST(Recall, SingleHitAndReportedPrecision) {
  EXPECT_DOUBLE_EQ(recall_at(std::vector<Prediction>{ranked({{1, 2}})}, std::vector<Segment>{{1, 2}}, 1, 0.7), 100.0);
  // 2760 hits out of 10000 samples reads as 27.60
  std::vector<Prediction> preds;
  std::vector<Segment> gts;
  for (int i = 0; i < 10000; ++i) {
    preds.push_back(ranked({i < 2760 ? Segment{0, 3} : Segment{5, 6}}));
    gts.push_back({0, 3});
  }
  EXPECT_NEAR(recall_at(preds, gts, 1, 0.7), 27.60, 1e-12);
}

TEST(Recall, MonotoneInNAndM) {
  std::mt19937_64 rng(3);
  for (int fixture = 0; fixture < 100; ++fixture) {
    std::vector<Prediction> preds;
    std::vector<Segment> gts;
    std::uniform_int_distribution<std::size_t> f(0, 15);
    for (int i = 0; i < 20; ++i) {
      Prediction p;
      for (int k = 0; k < 5; ++k) {
        std::size_t a = f(rng), b = f(rng);
        p.push_back({{std::min(a, b), std::max(a, b)}, 1.0 - 0.1 * k});
      }
      preds.push_back(p);
      std::size_t a = f(rng), b = f(rng);
      gts.push_back({std::min(a, b), std::max(a, b)});
    }
    for (double m : {0.1, 0.3, 0.5, 0.7, 0.9}) {
      for (std::size_t n = 1; n < 5; ++n) EXPECT_LE(recall_at(preds, gts, n, m), recall_at(preds, gts, n + 1, m));
    }
    for (std::size_t n : {1u, 5u}) {
      EXPECT_GE(recall_at(preds, gts, n, 0.3), recall_at(preds, gts, n, 0.5));
      EXPECT_GE(recall_at(preds, gts, n, 0.5), recall_at(preds, gts, n, 0.7));
    }
  }
}

TEST(Recall, Errors) {
  EXPECT_THROW(recall_at(std::vector<Prediction>{}, std::vector<Segment>{}, 1, 0.5), DataError);
  EXPECT_THROW(recall_at(std::vector<Prediction>{ranked({{0, 1}})}, std::vector<Segment>{}, 1, 0.5), DimensionError);
}

TEST(Report, NamesTextAndJson) {
  EXPECT_EQ(metric_name(1, 0.7), "R@1,IoU=0.7");
  EXPECT_EQ(metric_name(5, 0.3), "R@5,IoU=0.3");
  const std::vector<MetricValue> v{{"R@1,IoU=0.5", 62.5}, {"R@5,IoU=0.7", 100.0}};
  EXPECT_EQ(format_report(v), "R@1,IoU=0.5: 62.50\nR@5,IoU=0.7: 100.00\n");
  const nlohmann::json j = report_json(v);
  ASSERT_EQ(j.size(), 2u);
  EXPECT_EQ(j[0].at("metric"), "R@1,IoU=0.5");
  EXPECT_DOUBLE_EQ(j[0].at("value").get<double>(), 62.5);
  EXPECT_DOUBLE_EQ(metric_value(v, 5, 0.7), 100.0);
  EXPECT_THROW(metric_value(v, 1, 0.3), ContractError);
}

TEST(MetricSpec, Validation) {
  MetricSpec s;
  s.n = {0};
  EXPECT_THROW(s.validate(), ConfigError);
  s = MetricSpec{};
  s.iou = {0.0};
  EXPECT_THROW(s.validate(), ConfigError);
  s.iou = {1.5};
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Timestamps, Mapping) {
  const auto [a, b] = segment_to_timestamps({3, 6}, 10, 20.0);
  EXPECT_DOUBLE_EQ(a, 6.0);
  EXPECT_DOUBLE_EQ(b, 14.0);
  EXPECT_DOUBLE_EQ(segment_to_timestamps({0, 2}, 10, 20.0).first, 0.0);
  const auto full = segment_to_timestamps({0, 9}, 10, 37.5);
  EXPECT_DOUBLE_EQ(full.first, 0.0);
  EXPECT_DOUBLE_EQ(full.second, 37.5);
  for (std::size_t s = 0; s + 1 < 10; ++s) {
    EXPECT_LT(segment_to_timestamps({s, 9}, 10, 7.0).first, segment_to_timestamps({s + 1, 9}, 10, 7.0).first);
  }
  EXPECT_THROW(segment_to_timestamps({3, 10}, 10, 20.0), DataError);
  EXPECT_THROW(segment_to_timestamps({3, 4}, 10, 0.0), DataError);
}

TEST(EvaluateModel, UntrainedModelProducesValidReport) {
  SyntheticSpec spec;
  spec.T = 8;
  spec.D_v = 4;
  spec.vocab_size = 10;
  spec.N_max = 4;
  spec.seg_min = 2;
  spec.seg_max = 4;
  const auto data = generate_dataset(spec, 6, Split::Test);
  const CblnModel model(toy_model_config(), 2);
  const auto values = evaluate_model(model, data, MetricSpec{});
  ASSERT_EQ(values.size(), 6u);
  EXPECT_EQ(values[0].metric, "R@1,IoU=0.3");
  for (const auto& v : values) {
    EXPECT_GE(v.value, 0.0);
    EXPECT_LE(v.value, 100.0);
  }
  EXPECT_LE(metric_value(values, 1, 0.7), metric_value(values, 5, 0.7));
}
