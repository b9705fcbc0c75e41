#include "ultr/corpus.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <filesystem>

using namespace ultr;

namespace {

Document doc(std::string id, Tokens title, Tokens content = {}) { return {std::move(id), std::move(title), std::move(content)}; }

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("ultr_corpus_test_" + name)).string();
}

}  // namespace

TEST(TokenizeTest, Examples) {
  EXPECT_TRUE(tokenize("").empty());
  EXPECT_EQ(tokenize("Hello World"), (Tokens{"hello", "world"}));
  EXPECT_EQ(tokenize("BM25-ranking, now!"), (Tokens{"bm25", "ranking", "now"}));
}

TEST(TokenizeTest, NonLatinCharactersAreSingleTokens) {
  EXPECT_EQ(tokenize("ab\xe4\xb8\xad\xe6\x96\x87" "cd"), (Tokens{"ab", "\xe4\xb8\xad", "\xe6\x96\x87", "cd"}));
}

TEST(TokenizeTest, IdempotentOnJoinedOutput) {
  for (const char* text : {"Mixed CASE, punctuation; and\ttabs", "a1b2 -- c3", "\xe4\xb8\xad\xe6\x96\x87 text!", "  "}) {
    const auto once = tokenize(text);
    EXPECT_EQ(tokenize(detokenize(once)), once) << text;
  }
}

TEST(CorpusStatsTest, Examples) {
  const auto s = build_corpus_stats({doc("d1", {"a", "b"}), doc("d2", {"a"})});
  EXPECT_EQ(s.num_docs, 2u);
  EXPECT_EQ(s.df("a"), 2u);
  EXPECT_EQ(s.df("b"), 1u);
  EXPECT_DOUBLE_EQ(s.avg_doc_len, 1.5);

  const auto empty_doc = build_corpus_stats({doc("d1", {})});
  EXPECT_EQ(empty_doc.num_docs, 1u);
  EXPECT_EQ(empty_doc.avg_doc_len, 0.0);
  EXPECT_TRUE(empty_doc.doc_freq.empty());

  const auto repeated = build_corpus_stats({doc("d1", {"a", "a"})});
  EXPECT_EQ(repeated.df("a"), 1u);
  EXPECT_EQ(repeated.ctf("a"), 2u);
}

TEST(CorpusStatsTest, TitleAndContentCombined) {
  const auto s = build_corpus_stats({doc("d1", {"a"}, {"a", "c"}), doc("d2", {}, {"c"})});
  EXPECT_EQ(s.df("a"), 1u);
  EXPECT_EQ(s.ctf("a"), 2u);
  EXPECT_EQ(s.df("c"), 2u);
  EXPECT_EQ(s.total_terms, 4u);
  EXPECT_DOUBLE_EQ(s.avg_doc_len, 2.0);
}

TEST(CorpusStatsTest, EmptyCorpusRejected) { EXPECT_THROW(build_corpus_stats({}), data_error); }

TEST(CorpusStatsTest, LengthSumMatchesMeanOnSyntheticData) {
  const auto data = generate_synthetic_corpus(SynthConfig{}, 3);
  const auto s = build_corpus_stats(data.documents);
  std::size_t total = 0;
  for (const auto& d : data.documents) total += d.length();
  EXPECT_EQ(total, s.total_terms);
  EXPECT_NEAR(s.avg_doc_len * static_cast<double>(s.num_docs), static_cast<double>(total), 1e-9 * total);
  for (const auto& [t, df] : s.doc_freq) EXPECT_LE(df, s.num_docs);
}

TEST(CorpusTest, DuplicateIdsRejected) {
  EXPECT_THROW(Corpus({doc("d", {"a"}), doc("d", {"b"})}, {}), data_error);
  EXPECT_THROW(Corpus({}, {Query{"q", {"a"}}, Query{"q", {"b"}}}), data_error);
  const Corpus c({doc("d", {"a"})}, {Query{"q", {"a"}}});
  EXPECT_THROW(c.document("x"), data_error);
  EXPECT_EQ(c.query("q").tokens, Tokens{"a"});
}

TEST(SyntheticCorpusTest, DeterministicAndSeedSensitive) {
  SynthConfig cfg;
  cfg.num_queries = 30;
  const auto a = generate_synthetic_corpus(cfg, 1);
  const auto b = generate_synthetic_corpus(cfg, 1);
  const auto c = generate_synthetic_corpus(cfg, 2);
  const auto pa = temp_path("a"), pb = temp_path("b"), pc = temp_path("c");
  write_corpus(pa, a.documents);
  write_corpus(pb, b.documents);
  write_corpus(pc, c.documents);
  EXPECT_EQ(io::read_file(pa), io::read_file(pb));
  EXPECT_NE(io::read_file(pa), io::read_file(pc));
  EXPECT_EQ(a.true_relevance, b.true_relevance);
}

TEST(SyntheticCorpusTest, ZeroDocsPerQueryRejected) {
  SynthConfig cfg;
  cfg.docs_per_query = 0;
  EXPECT_THROW(generate_synthetic_corpus(cfg, 1), data_error);
}

TEST(SyntheticCorpusTest, GradeProportionsFollowAnnotationSkew) {
  SynthConfig cfg;
  cfg.num_queries = 3000;
  cfg.docs_per_query = 20;
  const auto data = generate_synthetic_corpus(cfg, 9);
  std::map<std::string, FreqBucket> bucket;
  for (const auto& q : data.queries) bucket[q.query_id] = q.freq_bucket;
  std::array<std::array<double, 5>, 3> counts{};
  std::array<double, 3> totals{};
  for (const auto& [key, g] : data.true_relevance) {
    const auto b = static_cast<std::size_t>(bucket[key.first]);
    counts[b][static_cast<std::size_t>(g)] += 1;
    totals[b] += 1;
  }
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t g = 0; g < 5; ++g)
      EXPECT_NEAR(counts[b][g] / totals[b], kAnnotationGradeDistribution[b][g] / 100.0, 0.02) << "bucket " << b << " grade " << g;
  EXPECT_NEAR(counts[static_cast<std::size_t>(FreqBucket::High)][4] / totals[0], 0.0049, 0.003);
  EXPECT_NEAR(counts[static_cast<std::size_t>(FreqBucket::Low)][0] / totals[2], 0.7078, 0.02);
}

TEST(SyntheticCorpusTest, OverlapGrowsWithGrade) {
  SynthConfig cfg;
  cfg.num_queries = 400;
  const auto data = generate_synthetic_corpus(cfg, 4);
  const Corpus corpus(data.documents, data.queries);
  std::array<double, 5> overlap{}, n{};
  for (const auto& [key, g] : data.true_relevance) {
    const auto& q = corpus.query(key.first);
    const auto terms = concatenated_terms(corpus.document(key.second));
    double hits = 0;
    for (const auto& t : terms) hits += std::find(q.tokens.begin(), q.tokens.end(), t) != q.tokens.end();
    overlap[static_cast<std::size_t>(g)] += hits / std::max<std::size_t>(1, terms.size());
    n[static_cast<std::size_t>(g)] += 1;
  }
  for (std::size_t g = 1; g < 5; ++g)
    if (n[g] > 20 && n[g - 1] > 20) EXPECT_GT(overlap[g] / n[g], overlap[g - 1] / n[g - 1]) << "grade " << g;
}

TEST(CorpusFilesTest, RoundTrip) {
  SynthConfig cfg;
  cfg.num_queries = 5;
  const auto data = generate_synthetic_corpus(cfg, 1);
  const auto pc = temp_path("corpus"), pq = temp_path("queries"), pr = temp_path("qrels");
  write_corpus(pc, data.documents);
  write_queries(pq, data.queries);
  write_qrels(pr, data.true_relevance);
  const auto docs = read_corpus(pc);
  ASSERT_EQ(docs.size(), data.documents.size());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    EXPECT_EQ(docs[i].doc_id, data.documents[i].doc_id);
    EXPECT_EQ(docs[i].title_tokens, data.documents[i].title_tokens);
    EXPECT_EQ(docs[i].content_tokens, data.documents[i].content_tokens);
  }
  const auto queries = read_queries(pq);
  ASSERT_EQ(queries.size(), data.queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    EXPECT_EQ(queries[i].tokens, data.queries[i].tokens);
    EXPECT_EQ(queries[i].freq_bucket, data.queries[i].freq_bucket);
  }
  EXPECT_EQ(read_qrels(pr), data.true_relevance);
}

TEST(CorpusFilesTest, MalformedInputRejected) {
  const auto p = temp_path("bad");
  io::open_out(p) << "# ultr qrels v1\nq1\td1\n";
  EXPECT_THROW(read_qrels(p), data_error);
  io::open_out(p) << "# ultr qrels v1\nq1\td1\t7\n";
  EXPECT_THROW(read_qrels(p), data_error);
  io::open_out(p) << "# ultr corpus v1\nd1\ttitle\tbody\n";
  EXPECT_THROW(read_qrels(p), data_error);
}
