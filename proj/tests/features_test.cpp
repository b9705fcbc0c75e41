#include "ultr/features.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace ultr;

namespace {

Document doc(std::string id, Tokens title, Tokens content = {}) { return {std::move(id), std::move(title), std::move(content)}; }
Query query(Tokens t) { return {"q", std::move(t)}; }

}  // namespace

TEST(IdfTest, Examples) {
  EXPECT_NEAR(idf(1, 1), 0.28768, 1e-5);
  EXPECT_NEAR(idf(1, 1), std::log(4.0 / 3.0), 1e-15);
  EXPECT_NEAR(idf(0, 2), 1.79176, 1e-5);
  for (std::size_t n : {1, 2, 7, 100}) EXPECT_LT(idf(n, n), idf(0, n));
}

TEST(IdfTest, PositiveAndStrictlyDecreasing) {
  for (std::size_t n : {1, 5, 40}) {
    for (std::size_t df = 0; df <= n; ++df) {
      EXPECT_GT(idf(df, n), 0.0);
      if (df > 0) EXPECT_LT(idf(df, n), idf(df - 1, n));
    }
  }
}

TEST(Bm25Test, Examples) {
  const std::vector<Document> docs{doc("d1", {"a", "b"})};
  const auto stats = build_corpus_stats(docs);
  EXPECT_EQ(bm25(query({"z"}), docs[0], stats), 0.0);
  EXPECT_NEAR(bm25(query({"a"}), docs[0], stats), 0.28768, 1e-5);
}

TEST(Bm25Test, SaturatesInTf) {
  const std::vector<Document> docs{doc("d1", {"a", "b", "c", "d"}), doc("d2", {"a", "a", "c", "d"}), doc("d3", {"x"})};
  const auto stats = build_corpus_stats(docs);
  const double one = bm25(query({"a"}), docs[0], stats);
  const double two = bm25(query({"a"}), docs[1], stats);
  EXPECT_GT(two, one);
  EXPECT_LT(two, 2 * one);
}

TEST(Bm25Test, ZeroAverageLengthUsesUnitNormalization) {
  const std::vector<Document> docs{doc("d1", {})};
  const auto stats = build_corpus_stats(docs);
  EXPECT_EQ(bm25(query({"a"}), docs[0], stats), 0.0);
}

TEST(Bm25Test, NonNegativeAndZeroIffNoOverlap) {
  const auto data = generate_synthetic_corpus(SynthConfig{.num_queries = 20}, 5);
  const Corpus corpus(data.documents, data.queries);
  const auto stats = build_corpus_stats(corpus.documents());
  for (const auto& [key, g] : data.true_relevance) {
    const auto& q = corpus.query(key.first);
    const auto& d = corpus.document(key.second);
    const auto terms = concatenated_terms(d);
    bool overlap = false;
    for (const auto& t : q.tokens) overlap = overlap || std::find(terms.begin(), terms.end(), t) != terms.end();
    const double s = bm25(q, d, stats);
    EXPECT_GE(s, 0.0);
    EXPECT_EQ(s > 0.0, overlap);
  }
}

TEST(QueryLikelihoodTest, DirichletExample) {
  const std::vector<Document> docs{doc("d1", {"a", "b"})};
  const auto stats = build_corpus_stats(docs);
  FeatureParams p;
  p.mu = 2;
  EXPECT_NEAR(ql_dirichlet(query({"a"}), docs[0], stats, p), std::log(0.5), 1e-12);
  EXPECT_NEAR(ql_dirichlet(query({"a"}), docs[0], stats, p), -0.69315, 1e-5);
}

TEST(QueryLikelihoodTest, SmoothingKeepsScoresFinite) {
  const std::vector<Document> docs{doc("d1", {"a", "b"}), doc("d2", {"c"})};
  const auto stats = build_corpus_stats(docs);
  FeatureParams p;
  p.mu = 5;
  const double s = ql_dirichlet(query({"a", "b"}), docs[1], stats, p);
  EXPECT_NEAR(s, 2 * std::log(5.0 * (1.0 / 3.0) / 6.0), 1e-12);
  // Term absent from the collection: half-occurrence floor.
  EXPECT_NEAR(ql_dirichlet(query({"zz"}), docs[0], stats, p), std::log(5.0 * (0.5 / 3.0) / 7.0), 1e-12);
  EXPECT_TRUE(std::isfinite(ql_jm(query({"zz"}), docs[0], stats, p)));
}

TEST(QueryLikelihoodTest, StrictlyIncreasingInTf) {
  const std::vector<Document> base{doc("d1", {"a", "b", "c"}), doc("d2", {"a", "a", "b", "c"})};
  const auto stats = build_corpus_stats(base);
  const Document more = doc("d3", {"a", "a", "a", "b", "c"});
  const auto q = query({"a"});
  EXPECT_LT(ql_dirichlet(q, base[0], stats), ql_dirichlet(q, base[1], stats));
  EXPECT_LT(ql_dirichlet(q, base[1], stats), ql_dirichlet(q, more, stats));
}

TEST(QueryLikelihoodTest, EmptyCollectionIsAnError) {
  const std::vector<Document> docs{doc("d1", {})};
  const auto stats = build_corpus_stats(docs);
  EXPECT_THROW(ql_dirichlet(query({"a"}), docs[0], stats), numeric_error);
}

TEST(ExtractFeaturesTest, EmptyQuery) {
  const std::vector<Document> docs{doc("d1", {"a", "b"})};
  const auto stats = build_corpus_stats(docs);
  const auto fv = extract_features(query({}), docs[0], stats);
  EXPECT_EQ(fv.tf_sum, 0.0);
  EXPECT_EQ(fv.idf_sum, 0.0);
  EXPECT_EQ(fv.tfidf_sum, 0.0);
  EXPECT_EQ(fv.bm25, 0.0);
  EXPECT_EQ(fv.ql_dirichlet, 0.0);
  EXPECT_EQ(fv.ql_jm, 0.0);
  EXPECT_EQ(fv.query_len, 0.0);
  EXPECT_EQ(fv.doc_len, 2.0);
}

TEST(ExtractFeaturesTest, TwoDocumentHandOracle) {
  // d1 = [a a b], d2 = [b c]; N = 2, avgdl = 2.5, total_terms = 5.
  const std::vector<Document> docs{doc("d1", {"a"}, {"a", "b"}), doc("d2", {"b", "c"})};
  const auto stats = build_corpus_stats(docs);
  FeatureParams p;
  p.mu = 10;
  p.lambda_jm = 0.2;
  const auto fv = extract_features(query({"a", "b", "z"}), docs[0], stats, p);

  const double idf_a = std::log((2 - 1 + 0.5) / 1.5 + 1);  // ln 2
  const double idf_b = std::log((2 - 2 + 0.5) / 2.5 + 1);  // ln 1.2
  EXPECT_NEAR(fv.tf_sum, 3.0, 1e-15);
  EXPECT_NEAR(fv.idf_sum, idf_a + idf_b, 1e-15);
  EXPECT_NEAR(fv.tfidf_sum, 2 * idf_a + idf_b, 1e-15);
  const double norm = 1 - 0.75 + 0.75 * 3 / 2.5;
  EXPECT_NEAR(fv.bm25, idf_a * 2 * 2.2 / (2 + 1.2 * norm) + idf_b * 1 * 2.2 / (1 + 1.2 * norm), 1e-12);
  const double pa = 2.0 / 5, pb = 2.0 / 5, pz = 0.5 / 5;
  EXPECT_NEAR(fv.ql_dirichlet,
              std::log((2 + 10 * pa) / 13) + std::log((1 + 10 * pb) / 13) + std::log((0 + 10 * pz) / 13), 1e-12);
  EXPECT_NEAR(fv.ql_jm,
              std::log(0.8 * 2 / 3 + 0.2 * pa) + std::log(0.8 * 1 / 3 + 0.2 * pb) + std::log(0.2 * pz), 1e-12);
  EXPECT_EQ(fv.query_len, 3.0);
  EXPECT_EQ(fv.doc_len, 3.0);
}

TEST(ExtractFeaturesTest, PureAndThreadIndependent) {
  const auto data = generate_synthetic_corpus(SynthConfig{.num_queries = 15}, 2);
  const Corpus corpus(data.documents, data.queries);
  const auto stats = build_corpus_stats(corpus.documents());
  const auto a = extract_feature_table(corpus, data.true_relevance, stats, {}, 1);
  const auto b = extract_feature_table(corpus, data.true_relevance, stats, {}, 4);
  EXPECT_EQ(a, b);
  for (const auto& [key, fv] : a)
    for (double v : fv.as_array()) EXPECT_TRUE(std::isfinite(v));
}

TEST(FeatureNamesTest, FixedOrder) {
  EXPECT_EQ(feature_index("tf_sum"), 0u);
  EXPECT_EQ(feature_index("bm25"), 3u);
  EXPECT_EQ(feature_index("doc_len"), 7u);
  EXPECT_THROW(feature_index("pagerank"), data_error);
}

TEST(FeatureParamsTest, Ranges) {
  FeatureParams p;
  EXPECT_NO_THROW(p.validate());
  p.b = 1.5;
  EXPECT_THROW(p.validate(), data_error);
  p = {};
  p.lambda_jm = 1.0;
  EXPECT_THROW(p.validate(), data_error);
}

TEST(FeatureDumpTest, RoundTripIsExact) {
  const auto data = generate_synthetic_corpus(SynthConfig{.num_queries = 4}, 8);
  const Corpus corpus(data.documents, data.queries);
  const auto table = extract_feature_table(corpus, data.true_relevance, build_corpus_stats(corpus.documents()));
  const auto path = (std::filesystem::temp_directory_path() / "ultr_features_test.tsv").string();
  write_feature_dump(path, table);
  EXPECT_EQ(read_feature_dump(path), table);
}
