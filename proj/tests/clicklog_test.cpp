#include "ultr/clicklog.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace ultr;

namespace {

ClickSession session(std::string q, std::vector<std::string> docs, std::vector<std::uint8_t> clicks) {
  return {std::move(q), std::move(docs), std::move(clicks)};
}

std::vector<std::string> ids(const std::string& prefix, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

Qrels uniform_qrels(const std::string& q, std::size_t n, int grade) {
  Qrels r;
  for (const auto& d : ids(q + "_d", n)) r[{q, d}] = grade;
  return r;
}

}  // namespace

TEST(FilterSessionsTest, Rules) {
  EXPECT_TRUE(filter_sessions({}).empty());
  const auto ten = ids("d", 10);
  const auto nine = ids("e", 9);
  std::vector<std::uint8_t> none(10, 0), one(10, 0), one9(9, 0);
  one[2] = 1;
  one9[0] = 1;
  const auto out = filter_sessions({session("a", ten, none), session("a", ten, one), session("b", nine, one9)});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].query_id, "a");
  EXPECT_EQ(out[0].clicks, one);
}

TEST(FilterSessionsTest, PoolCountsDistinctDocumentsAcrossSessions) {
  std::vector<std::uint8_t> c(6, 0);
  c[0] = 1;
  const auto a = session("q", ids("d", 6), c);
  auto b = a;
  for (auto& d : b.ranked_doc_ids) d += "x";
  EXPECT_EQ(filter_sessions({a, b}).size(), 2u);
  EXPECT_TRUE(filter_sessions({a}).empty());
}

TEST(SimulateClicksTest, Extremes) {
  ClickSimConfig cfg;
  cfg.eta = 0;
  const auto top = uniform_qrels("q", 10, 4);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    cfg.seed = seed;
    const auto s = simulate_clicks(top, "q", ids("q_d", 10), cfg);
    EXPECT_EQ(s.num_clicks(), 10u);
  }
  cfg.eta = 1;
  const auto zero = uniform_qrels("q", 10, 0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    cfg.seed = seed;
    EXPECT_EQ(simulate_clicks(zero, "q", ids("q_d", 10), cfg).num_clicks(), 0u);
  }
}

TEST(SimulateClicksTest, DeterministicGivenSeed) {
  ClickSimConfig cfg;
  cfg.seed = 5;
  cfg.shuffle_top10 = true;
  const auto r = uniform_qrels("q", 10, 3);
  const auto a = simulate_clicks(r, "q", ids("q_d", 10), cfg);
  const auto b = simulate_clicks(r, "q", ids("q_d", 10), cfg);
  EXPECT_EQ(a.ranked_doc_ids, b.ranked_doc_ids);
  EXPECT_EQ(a.clicks, b.clicks);
}

TEST(SimulateClicksTest, RejectsLongRankingAndBadConfig) {
  ClickSimConfig cfg;
  EXPECT_THROW(simulate_clicks({}, "q", ids("d", 11), cfg), data_error);
  cfg.epsilon_noise = 1.0;
  EXPECT_THROW(simulate_clicks({}, "q", ids("d", 3), cfg), data_error);
}

TEST(SimulateClicksTest, PositionTwoHalvesClickRate) {
  // Shuffled equal-relevance rankings: the position-2 click rate is half the position-1 rate.
  const auto r = uniform_qrels("q", 10, 4);
  const std::size_t n = 100000;
  ClickSimConfig cfg;
  cfg.eta = 1;
  cfg.shuffle_top10 = true;
  double c1 = 0, c2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    cfg.seed = derive_seed(77, i);
    const auto s = simulate_clicks(r, "q", ids("q_d", 10), cfg);
    c1 += s.clicks[0];
    c2 += s.clicks[1];
  }
  const double ratio = c2 / c1;
  // Delta-method standard error of the ratio of two binomial rates.
  const double p1 = c1 / n, p2 = c2 / n;
  const double se = ratio * std::sqrt((1 - p1) / (n * p1) + (1 - p2) / (n * p2));
  EXPECT_NEAR(ratio, 0.5, 3 * se);
}

TEST(ClickRatioTest, Examples) {
  const auto ten = ids("d", 10);
  std::vector<std::uint8_t> all(10, 1);
  for (double cr : estimate_click_ratios({session("q", ten, all)})) EXPECT_EQ(cr, 1.0);

  std::vector<std::uint8_t> a(10, 0), b(10, 0);
  a[0] = b[0] = 1;
  a[2] = 1;
  const auto cr = estimate_click_ratios({session("q", ten, a), session("q", ten, b)});
  EXPECT_EQ(cr[0], 1.0);
  EXPECT_EQ(cr[2], 0.5);
  EXPECT_EQ(cr[5], 0.0);
  EXPECT_THROW(click_ratio_propensity(cr, 0.25), numeric_error);
}

TEST(ClickRatioTest, DegenerateLogs) {
  std::vector<std::uint8_t> no_top(10, 0);
  no_top[4] = 1;
  EXPECT_THROW(estimate_click_ratios({session("q", ids("d", 10), no_top)}), numeric_error);
  std::vector<std::uint8_t> short_click(5, 1);
  EXPECT_THROW(estimate_click_ratios({session("q", ids("d", 5), short_click)}), data_error);
}

TEST(ClickRatioTest, ImpressionCountsWeightSessions) {
  const auto ten = ids("d", 10);
  std::vector<std::uint8_t> a(10, 1), b(10, 1);
  b[1] = 0;
  auto heavy = session("q", ten, b);
  heavy.impression_count = 3;
  EXPECT_DOUBLE_EQ(estimate_click_ratios({session("q", ten, a), heavy})[1], 0.25);
}

TEST(PropensityTest, Examples) {
  PositionArray uniform;
  uniform.fill(0.3);
  for (std::size_t i = 1; i <= kLoggedPositions; ++i) EXPECT_EQ(click_ratio_propensity(uniform, 0.25).weight(i), 1.0);

  PositionArray cr;
  cr.fill(0.2);
  cr[0] = 0.4;
  const auto pm = click_ratio_propensity(cr, 0.25);
  EXPECT_EQ(pm.weight(1), 1.0);
  EXPECT_NEAR(pm.weight(2), 1.18921, 1e-5);
  EXPECT_NEAR(pm.weight(2), std::pow(2.0, 0.25), 1e-15);
}

TEST(PropensityTest, MonotoneAndAlphaZero) {
  PositionArray cr;
  for (std::size_t i = 0; i < kLoggedPositions; ++i) cr[i] = 0.5 / static_cast<double>(i + 1);
  const auto pm = click_ratio_propensity(cr, 0.25);
  EXPECT_EQ(pm.weight(1), 1.0);
  for (std::size_t i = 2; i <= kLoggedPositions; ++i) EXPECT_GT(pm.weight(i), pm.weight(i - 1));
  for (std::size_t i = 1; i <= kLoggedPositions; ++i) EXPECT_EQ(click_ratio_propensity(cr, 0.0).weight(i), 1.0);
  EXPECT_THROW(pm.weight(0), data_error);
  EXPECT_THROW(pm.weight(11), data_error);
}

TEST(PropensityTest, PublishedWeightsOverPositionsTwoToTen) {
  const auto pm = published_click_ratio_propensity();
  EXPECT_EQ(pm.weight(1), 1.0);
  EXPECT_EQ(pm.weight(2), 1.0);
  EXPECT_EQ(pm.weight(3), 1.19);
  EXPECT_EQ(pm.weight(10), 2.51);
  for (std::size_t i = 2; i <= kLoggedPositions; ++i) EXPECT_GE(pm.weight(i), pm.weight(i - 1));
}

TEST(PropensityTest, ShuffledLogRecoversExaminationRatios) {
  SynthConfig sc;
  sc.num_queries = 100;
  sc.docs_per_query = 12;
  const auto data = generate_synthetic_corpus(sc, 3);
  ClickSimConfig cfg;
  cfg.seed = 3;
  const auto log = simulate_log(data.true_relevance, {}, 100000, LoggingPolicy{LoggingPolicy::Kind::Shuffled}, cfg);
  const auto cr = estimate_click_ratios(log);
  for (std::size_t i = 1; i <= kLoggedPositions; ++i)
    EXPECT_NEAR((cr[0] / cr[i - 1]) / static_cast<double>(i), 1.0, 0.1) << "position " << i;
}

TEST(SimulateLogTest, FeatureSortedPolicyNeedsFeatures) {
  const auto r = uniform_qrels("q", 12, 2);
  ClickSimConfig cfg;
  EXPECT_THROW(simulate_log(r, {}, 5, LoggingPolicy{}, cfg), data_error);
  EXPECT_THROW(simulate_log({}, {}, 5, LoggingPolicy{LoggingPolicy::Kind::Shuffled}, cfg), data_error);
}

TEST(SimulateLogTest, TopTenOfPoolAndDeterministic) {
  const auto r = uniform_qrels("q", 12, 2);
  ClickSimConfig cfg;
  cfg.seed = 9;
  const LoggingPolicy shuffled{LoggingPolicy::Kind::Shuffled};
  const auto a = simulate_log(r, {}, 50, shuffled, cfg);
  const auto b = simulate_log(r, {}, 50, shuffled, cfg);
  ASSERT_EQ(a.size(), 50u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].ranked_doc_ids.size(), 10u);
    EXPECT_EQ(a[i].ranked_doc_ids, b[i].ranked_doc_ids);
    EXPECT_EQ(a[i].clicks, b[i].clicks);
  }
}

TEST(ClickLogFileTest, RoundTripAndValidation) {
  const auto path = (std::filesystem::temp_directory_path() / "ultr_clicklog_test.tsv").string();
  std::vector<std::uint8_t> c(10, 0);
  c[1] = 1;
  const std::vector<ClickSession> log{session("q1", ids("d", 10), c), session("q2", ids("e", 3), {0, 0, 1})};
  write_click_log(path, log);
  const auto back = read_click_log(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].ranked_doc_ids, log[1].ranked_doc_ids);
  EXPECT_EQ(back[0].clicks, log[0].clicks);

  io::open_out(path) << "# ultr clicklog v1\nq1\td1,d2\t1\n";
  EXPECT_THROW(read_click_log(path), data_error);
  io::open_out(path) << "# ultr clicklog v1\nq1\td1,d2\t1,2\n";
  EXPECT_THROW(read_click_log(path), data_error);
}
