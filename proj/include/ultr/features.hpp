#pragma once

#include <array>
#include <cmath>
#include <string>
#include <string_view>
#include <unordered_map>

#include "ultr/corpus.hpp"

namespace ultr {

/// Column order of FeatureVector::as_array(); stable across the whole pipeline.
inline constexpr std::array<std::string_view, 8> kFeatureNames{
    "tf_sum", "idf_sum", "tfidf_sum", "bm25", "ql_dirichlet", "ql_jm", "query_len", "doc_len"};
inline constexpr std::size_t kNumFeatures = kFeatureNames.size();

struct FeatureVector {
  double tf_sum = 0;
  double idf_sum = 0;
  double tfidf_sum = 0;
  double bm25 = 0;
  double ql_dirichlet = 0;
  double ql_jm = 0;
  double query_len = 0;
  double doc_len = 0;

  std::array<double, kNumFeatures> as_array() const {
    return {tf_sum, idf_sum, tfidf_sum, bm25, ql_dirichlet, ql_jm, query_len, doc_len};
  }
  static FeatureVector from_array(const std::array<double, kNumFeatures>& a) {
    return {a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7]};
  }
  bool operator==(const FeatureVector&) const = default;
};

inline std::size_t feature_index(std::string_view name) {
  for (std::size_t i = 0; i < kNumFeatures; ++i)
    if (kFeatureNames[i] == name) return i;
  throw data_error("unknown feature '" + std::string(name) + "'");
}

struct FeatureParams {
  double k1 = 1.2;
  double b = 0.75;
  double mu = 2000.0;
  double lambda_jm = 0.1;

  void validate() const {
    if (!(k1 > 0)) throw data_error("k1 must be > 0");
    if (!(b >= 0 && b <= 1)) throw data_error("b must be in [0,1]");
    if (!(mu > 0)) throw data_error("mu must be > 0");
    if (!(lambda_jm > 0 && lambda_jm < 1)) throw data_error("lambda_jm must be in (0,1)");
  }
};

/// BM25 idf with +1 inside the log; positive for every df in [0, N].
inline double idf(std::size_t df, std::size_t num_docs) {
  const double n = static_cast<double>(num_docs);
  const double d = static_cast<double>(df);
  return std::log((n - d + 0.5) / (d + 0.5) + 1.0);
}

inline double idf(const std::string& term, const CorpusStats& stats) { return idf(stats.df(term), stats.num_docs); }

namespace detail {

using TermCounts = std::unordered_map<std::string, std::size_t>;

inline TermCounts term_counts(const Document& d) {
  TermCounts tf;
  for (const auto& t : d.title_tokens) ++tf[t];
  for (const auto& t : d.content_tokens) ++tf[t];
  return tf;
}

inline std::size_t count(const TermCounts& tf, const std::string& t) {
  auto it = tf.find(t);
  return it == tf.end() ? 0 : it->second;
}

/// p(t|C), with a half-occurrence floor for terms absent from the collection.
inline double collection_prob(const std::string& t, const CorpusStats& stats) {
  if (stats.total_terms == 0) throw numeric_error("empty collection");
  const auto ctf = stats.ctf(t);
  const double total = static_cast<double>(stats.total_terms);
  return ctf == 0 ? 0.5 / total : static_cast<double>(ctf) / total;
}

inline double bm25(const Tokens& q, const TermCounts& tf, std::size_t doc_len, const CorpusStats& stats,
                   const FeatureParams& p) {
  const double norm =
      stats.avg_doc_len > 0 ? (1.0 - p.b + p.b * static_cast<double>(doc_len) / stats.avg_doc_len) : 1.0;
  double score = 0;
  for (const auto& t : q) {
    const auto f = count(tf, t);
    if (f == 0) continue;
    const double fd = static_cast<double>(f);
    score += idf(t, stats) * fd * (p.k1 + 1.0) / (fd + p.k1 * norm);
  }
  return score;
}

inline double ql_dirichlet(const Tokens& q, const TermCounts& tf, std::size_t doc_len, const CorpusStats& stats,
                           const FeatureParams& p) {
  if (stats.total_terms == 0) throw numeric_error("empty collection");
  double score = 0;
  for (const auto& t : q) {
    const double f = static_cast<double>(count(tf, t));
    score += std::log((f + p.mu * collection_prob(t, stats)) / (static_cast<double>(doc_len) + p.mu));
  }
  return score;
}

inline double ql_jm(const Tokens& q, const TermCounts& tf, std::size_t doc_len, const CorpusStats& stats,
                    const FeatureParams& p) {
  if (stats.total_terms == 0) throw numeric_error("empty collection");
  double score = 0;
  for (const auto& t : q) {
    const double f = static_cast<double>(count(tf, t));
    const double ml = doc_len == 0 ? 0.0 : f / static_cast<double>(doc_len);
    score += std::log((1.0 - p.lambda_jm) * ml + p.lambda_jm * collection_prob(t, stats));
  }
  return score;
}

}  // namespace detail

/// Okapi BM25 over the concatenated title and content.
inline double bm25(const Query& q, const Document& d, const CorpusStats& stats, const FeatureParams& p = {}) {
  return detail::bm25(q.tokens, detail::term_counts(d), d.length(), stats, p);
}

/// Query likelihood with Dirichlet prior smoothing (log scale).
inline double ql_dirichlet(const Query& q, const Document& d, const CorpusStats& stats, const FeatureParams& p = {}) {
  return detail::ql_dirichlet(q.tokens, detail::term_counts(d), d.length(), stats, p);
}

/// Query likelihood with Jelinek-Mercer smoothing (log scale).
inline double ql_jm(const Query& q, const Document& d, const CorpusStats& stats, const FeatureParams& p = {}) {
  return detail::ql_jm(q.tokens, detail::term_counts(d), d.length(), stats, p);
}

inline FeatureVector extract_features(const Query& q, const Document& d, const CorpusStats& stats,
                                      const FeatureParams& p = {}) {
  const auto tf = detail::term_counts(d);
  const auto len = d.length();
  FeatureVector fv;
  for (const auto& t : q.tokens) {
    const auto f = detail::count(tf, t);
    if (f == 0) continue;
    const double w = idf(t, stats);
    fv.tf_sum += static_cast<double>(f);
    fv.idf_sum += w;
    fv.tfidf_sum += static_cast<double>(f) * w;
  }
  fv.bm25 = detail::bm25(q.tokens, tf, len, stats, p);
  fv.ql_dirichlet = detail::ql_dirichlet(q.tokens, tf, len, stats, p);
  fv.ql_jm = detail::ql_jm(q.tokens, tf, len, stats, p);
  fv.query_len = static_cast<double>(q.tokens.size());
  fv.doc_len = static_cast<double>(len);
  return fv;
}

// ---------------------------------------------------------------------------
// Feature dump: query_id, doc_id, then the eight named columns.
// ---------------------------------------------------------------------------

using FeatureTable = std::map<std::pair<std::string, std::string>, FeatureVector>;

inline void write_feature_dump(const std::string& path, const FeatureTable& table) {
  auto os = io::open_artifact(path, "features");
  os << "query_id\tdoc_id";
  for (auto n : kFeatureNames) os << '\t' << n;
  os << '\n';
  for (const auto& [key, fv] : table) {
    os << key.first << '\t' << key.second;
    for (double v : fv.as_array()) os << '\t' << io::format_double(v);
    os << '\n';
  }
}

inline FeatureTable read_feature_dump(const std::string& path) {
  FeatureTable table;
  bool saw_columns = false;
  for (auto& row : io::read_rows(path, "features", 2 + kNumFeatures)) {
    if (!saw_columns && row.fields[0] == "query_id") {
      for (std::size_t i = 0; i < kNumFeatures; ++i)
        if (row.fields[2 + i] != kFeatureNames[i])
          throw data_error(path + ": unexpected feature column '" + row.fields[2 + i] + "'");
      saw_columns = true;
      continue;
    }
    std::array<double, kNumFeatures> a{};
    for (std::size_t i = 0; i < kNumFeatures; ++i) a[i] = io::parse_double(row.fields[2 + i], kFeatureNames[i]);
    table[{row.fields[0], row.fields[1]}] = FeatureVector::from_array(a);
  }
  return table;
}

/// Extracts features for every (query_id, doc_id) key in `pairs`.
inline FeatureTable extract_feature_table(const Corpus& corpus, const Qrels& pairs, const CorpusStats& stats,
                                          const FeatureParams& p = {}, std::size_t threads = 1) {
  std::vector<std::pair<std::string, std::string>> keys;
  keys.reserve(pairs.size());
  for (const auto& [key, g] : pairs) keys.push_back(key);
  std::vector<FeatureVector> values(keys.size());
  parallel_for(keys.size(), threads, [&](std::size_t i) {
    values[i] = extract_features(corpus.query(keys[i].first), corpus.document(keys[i].second), stats, p);
  });
  FeatureTable table;
  for (std::size_t i = 0; i < keys.size(); ++i) table.emplace(keys[i], values[i]);
  return table;
}

}  // namespace ultr
