#include "ultr/neural.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace ultr;

namespace {

ScorerConfig tiny_config() {
  ScorerConfig c;
  c.vocab_size = 20;
  c.embed_dim = 8;
  c.num_layers = 2;
  c.num_heads = 2;
  c.ff_dim = 12;
  c.max_seq_len = 12;
  c.feature_proj_dim = 4;
  c.mlp_dims = {6, 1};
  return c;
}

ScoringInput make_input(std::vector<int> body, std::size_t max_len, std::array<double, kNumFeatures> f = {}) {
  ScoringInput in;
  in.ids = {kClsId};
  in.ids.insert(in.ids.end(), body.begin(), body.end());
  in.ids.resize(max_len, kPadId);
  in.features = f;
  return in;
}

std::vector<ScoringInput> random_batch(std::size_t n, const ScorerConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ScoringInput> batch;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> body;
    const std::size_t len = 2 + uniform_index(rng, c.max_seq_len - 3);
    for (std::size_t k = 0; k < len; ++k)
      body.push_back(k == 1 ? kSepId : static_cast<int>(kNumReservedIds + uniform_index(rng, c.vocab_size - kNumReservedIds)));
    std::array<double, kNumFeatures> f{};
    for (auto& v : f) v = 4.0 * uniform01(rng) - 1.0;
    batch.push_back(make_input(body, c.max_seq_len, f));
  }
  return batch;
}

LossValue sum_of_squares(std::span<const double> s) {
  LossValue lv;
  for (double x : s) {
    lv.loss += 0.5 * x * x + x;
    lv.dscores.push_back(x + 1.0);
  }
  return lv;
}

}  // namespace

TEST(EncodePairTest, EmptyQueryAndDocument) {
  Vocabulary vocab({"a", "b"});
  auto ids = encode_pair(vocab, {}, {}, 6);
  EXPECT_EQ(ids, (std::vector<int>{kClsId, kSepId, kPadId, kPadId, kPadId, kPadId}));
}

TEST(EncodePairTest, ExactLengthHasNoPadding) {
  Vocabulary vocab({"a", "b"});
  auto ids = encode_pair(vocab, {"a"}, {"b", "a"}, 5);
  EXPECT_EQ(ids, (std::vector<int>{kClsId, vocab.id("a"), kSepId, vocab.id("b"), vocab.id("a")}));
}

TEST(EncodePairTest, DocumentTruncatedFirst) {
  Vocabulary vocab({"a", "b", "c"});
  auto ids = encode_pair(vocab, {"a", "b"}, {"c", "c", "c", "c"}, 6);
  // 1 + 2 + 1 leaves room for two document tokens.
  EXPECT_EQ(ids, (std::vector<int>{kClsId, vocab.id("a"), vocab.id("b"), kSepId, vocab.id("c"), vocab.id("c")}));
}

TEST(EncodePairTest, UnknownAndSeparatorTokens) {
  Vocabulary vocab({"a"});
  EXPECT_EQ(vocab.id("zzz"), kUnkId);
  EXPECT_EQ(vocab.id(std::string(kSepToken)), kSepId);
  Document d{"d", {"a"}, {"a"}};
  EXPECT_EQ(encoder_doc_tokens(d), (Tokens{"a", "[SEP]", "a"}));
  Document untitled{"d", {}, {"a"}};
  EXPECT_EQ(encoder_doc_tokens(untitled), (Tokens{"a"}));
}

TEST(ScorerTest, ParameterCountMatchesFormula) {
  for (std::size_t layers : {0u, 1u, 3u}) {
    auto c = tiny_config();
    c.num_layers = layers;
    c.mlp_dims = {5, 3, 1};
    WideDeepScorer s(c, 1);
    EXPECT_EQ(s.parameter_count(), WideDeepScorer::expected_parameter_count(c));
  }
}

TEST(ScorerTest, ConfigValidation) {
  auto c = tiny_config();
  c.num_heads = 3;
  EXPECT_THROW(WideDeepScorer{c}, data_error);
  c = tiny_config();
  c.mlp_dims = {4, 2};
  EXPECT_THROW(WideDeepScorer{c}, data_error);
}

TEST(ScorerTest, ZeroParametersScoreFinalBias) {
  auto c = tiny_config();
  WideDeepScorer s(c);
  auto params = s.parameters();
  const auto& b = s.block("mlp1.bias");
  params[b.offset] = 0.75;
  auto in = make_input({5, kSepId, 6}, c.max_seq_len, {1, 2, 3, 4, 5, 6, 7, 8});
  EXPECT_DOUBLE_EQ(score(s, in), 0.75);
}

TEST(ScorerTest, DeterministicScore) {
  auto c = tiny_config();
  WideDeepScorer s(c, 3);
  auto batch = random_batch(4, c, 11);
  for (const auto& in : batch) EXPECT_EQ(score(s, in), score(s, in));
  WideDeepScorer again(c, 3);
  EXPECT_EQ(score(s, batch[0]), score(again, batch[0]));
}

TEST(ScorerTest, PaddingContentIsIgnored) {
  auto c = tiny_config();
  WideDeepScorer s(c, 5);
  auto in = make_input({7, kSepId, 9}, c.max_seq_len, {0.5, 1, 1, 2, -3, -4, 1, 3});
  const double base = score(s, in);
  // Perturb the embedding row and position rows that only PAD positions would use.
  auto params = s.parameters();
  const auto& tok = s.block("embed.token");
  for (std::size_t j = 0; j < tok.cols; ++j) params[tok.offset + kPadId * tok.cols + j] += 3.0;
  const auto& pos = s.block("embed.position");
  for (std::size_t p = 4; p < c.max_seq_len; ++p)
    for (std::size_t j = 0; j < pos.cols; ++j) params[pos.offset + p * pos.cols + j] -= 2.0;
  EXPECT_EQ(score(s, in), base);
}

TEST(ScorerTest, NonFiniteParametersRejected) {
  auto c = tiny_config();
  WideDeepScorer s(c, 1);
  s.parameters()[10] = std::nan("");
  EXPECT_THROW(score(s, make_input({5}, c.max_seq_len)), numeric_error);
}

TEST(ScorerTest, InputMustStartWithCls) {
  auto c = tiny_config();
  WideDeepScorer s(c, 1);
  ScoringInput in;
  in.ids.assign(c.max_seq_len, kPadId);
  in.ids[0] = 5;
  EXPECT_THROW(score(s, in), data_error);
}

TEST(ForwardBackwardTest, ScoreGradientMatchesFiniteDifferences) {
  auto c = tiny_config();
  WideDeepScorer s(c, 7);
  auto batch = random_batch(1, c, 3);
  LossFn identity = [](std::span<const double> x) { return LossValue{x[0], {1.0}}; };
  EXPECT_LT(grad_check(s, batch, identity, 1e-5, 400), 1e-4);
}

TEST(ForwardBackwardTest, RandomScorerGradientCheck) {
  auto c = tiny_config();
  WideDeepScorer s(c, 7);
  auto batch = random_batch(3, c, 17);
  EXPECT_LT(grad_check(s, batch, sum_of_squares, 1e-5, 600), 1e-4);
}

TEST(ForwardBackwardTest, ZeroInputBatchGradientCheck) {
  auto c = tiny_config();
  WideDeepScorer s(c, 9);
  std::vector<ScoringInput> batch{make_input({kSepId}, c.max_seq_len)};
  EXPECT_LT(grad_check(s, batch, sum_of_squares, 1e-5, 400), 1e-4);
}

TEST(ForwardBackwardTest, ZeroFinalLayerBlocksUpstreamGradients) {
  auto c = tiny_config();
  WideDeepScorer s(c, 2);
  const auto& w = s.block("mlp1.weight");
  for (std::size_t i = 0; i < w.size(); ++i) s.parameters()[w.offset + i] = 0.0;
  auto r = forward_backward(s, random_batch(2, c, 1), sum_of_squares);
  for (std::size_t i = 0; i < w.offset; ++i) ASSERT_EQ(r.gradients[i], 0.0) << "coordinate " << i;
}

TEST(ForwardBackwardTest, NonFiniteLossRejected) {
  auto c = tiny_config();
  WideDeepScorer s(c, 2);
  LossFn bad = [](std::span<const double> x) { return LossValue{std::nan(""), std::vector<double>(x.size())}; };
  EXPECT_THROW(forward_backward(s, random_batch(1, c, 1), bad), numeric_error);
}

TEST(GradCheckTest, RejectsNonPositiveEps) {
  auto c = tiny_config();
  WideDeepScorer s(c, 2);
  EXPECT_THROW(grad_check(s, random_batch(1, c, 1), sum_of_squares, 0.0), data_error);
}

TEST(AdamWTest, ZeroGradientNoDecayLeavesParameters) {
  std::vector<double> p{1.0, -2.0, 0.5};
  std::vector<double> g(3, 0.0);
  auto st = OptimizerState::for_size(3, 0.1, 0.0);
  adamw_step(p, g, st);
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(AdamWTest, ZeroGradientDecayShrinks) {
  std::vector<double> p{1.0, -2.0};
  std::vector<double> g(2, 0.0);
  auto st = OptimizerState::for_size(2, 0.1, 0.5);
  adamw_step(p, g, st);
  EXPECT_DOUBLE_EQ(p[0], 1.0 * (1 - 0.05));
  EXPECT_DOUBLE_EQ(p[1], -2.0 * (1 - 0.05));
}

TEST(AdamWTest, FirstStepOnScalar) {
  // m_hat = g and v_hat = g^2 on step one, so the step is lr * g / (|g| + eps).
  std::vector<double> p{1.0};
  std::vector<double> g{1.0};
  auto st = OptimizerState::for_size(1, 1e-3, 0.01);
  adamw_step(p, g, st);
  const double expected = 1.0 * (1 - 1e-3 * 0.01) - 1e-3 * 1.0 / (1.0 + 1e-8);
  EXPECT_NEAR(p[0], expected, 1e-15);
  EXPECT_LT(p[0], 1.0);
}

TEST(AdamWTest, ShapeMismatch) {
  std::vector<double> p{1.0};
  std::vector<double> g{1.0, 2.0};
  auto st = OptimizerState::for_size(1, 1e-3);
  EXPECT_THROW(adamw_step(p, g, st), data_error);
}

TEST(ScoreBatchTest, IndependentOfThreadCount) {
  auto c = tiny_config();
  WideDeepScorer s(c, 4);
  auto batch = random_batch(9, c, 5);
  EXPECT_EQ(score_batch(s, batch, 1), score_batch(s, batch, 3));
}
