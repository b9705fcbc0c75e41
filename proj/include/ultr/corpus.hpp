#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ultr/common.hpp"
#include "ultr/io.hpp"

namespace ultr {

using Tokens = std::vector<std::string>;

/// Lowercases and splits on ASCII whitespace/punctuation. ASCII letters and digits form
/// runs; every non-ASCII code point (UTF-8) becomes a single-character token.
inline Tokens tokenize(std::string_view text) {
  Tokens out;
  std::string run;
  auto flush = [&] {
    if (!run.empty()) out.push_back(std::move(run));
    run.clear();
  };
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (c < 0x80) {
      if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')) {
        run += static_cast<char>(c);
      } else if (c >= 'A' && c <= 'Z') {
        run += static_cast<char>(c - 'A' + 'a');
      } else {
        flush();
      }
      ++i;
      continue;
    }
    flush();
    std::size_t len = 1;
    if ((c & 0xE0) == 0xC0) len = 2;
    else if ((c & 0xF0) == 0xE0) len = 3;
    else if ((c & 0xF8) == 0xF0) len = 4;
    // Truncated or malformed sequences fall back to one byte per token.
    if (i + len > text.size()) len = 1;
    for (std::size_t k = 1; k < len; ++k)
      if ((static_cast<unsigned char>(text[i + k]) & 0xC0) != 0x80) len = 1;
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  flush();
  return out;
}

inline std::string detokenize(const Tokens& tokens) { return io::join(tokens, ' '); }

enum class FreqBucket { High, Mid, Low };

inline std::string_view to_string(FreqBucket b) {
  switch (b) {
    case FreqBucket::High: return "high";
    case FreqBucket::Mid: return "mid";
    case FreqBucket::Low: return "low";
  }
  return "?";
}

inline FreqBucket parse_bucket(std::string_view s) {
  if (s == "high") return FreqBucket::High;
  if (s == "mid") return FreqBucket::Mid;
  if (s == "low") return FreqBucket::Low;
  throw data_error("unknown frequency bucket '" + std::string(s) + "'");
}

struct Document {
  std::string doc_id;
  Tokens title_tokens;
  Tokens content_tokens;

  std::size_t length() const { return title_tokens.size() + content_tokens.size(); }
};

struct Query {
  std::string query_id;
  Tokens tokens;
  FreqBucket freq_bucket = FreqBucket::Mid;
};

/// Title and content joined; the boundary is not a term and does not count toward length.
inline Tokens concatenated_terms(const Document& d) {
  Tokens all = d.title_tokens;
  all.insert(all.end(), d.content_tokens.begin(), d.content_tokens.end());
  return all;
}

/// Owns documents and queries with id lookup. Immutable once built.
class Corpus {
 public:
  Corpus() = default;
  Corpus(std::vector<Document> docs, std::vector<Query> queries) : docs_(std::move(docs)), queries_(std::move(queries)) {
    for (std::size_t i = 0; i < docs_.size(); ++i) {
      if (docs_[i].doc_id.empty()) throw data_error("document with empty doc_id");
      if (!doc_index_.emplace(docs_[i].doc_id, i).second)
        throw data_error("duplicate doc_id '" + docs_[i].doc_id + "'");
    }
    for (std::size_t i = 0; i < queries_.size(); ++i) {
      if (queries_[i].query_id.empty()) throw data_error("query with empty query_id");
      if (!query_index_.emplace(queries_[i].query_id, i).second)
        throw data_error("duplicate query_id '" + queries_[i].query_id + "'");
    }
  }

  const std::vector<Document>& documents() const { return docs_; }
  const std::vector<Query>& queries() const { return queries_; }

  const Document& document(const std::string& id) const {
    auto it = doc_index_.find(id);
    if (it == doc_index_.end()) throw data_error("unknown doc_id '" + id + "'");
    return docs_[it->second];
  }
  const Query& query(const std::string& id) const {
    auto it = query_index_.find(id);
    if (it == query_index_.end()) throw data_error("unknown query_id '" + id + "'");
    return queries_[it->second];
  }
  bool has_document(const std::string& id) const { return doc_index_.count(id) != 0; }
  bool has_query(const std::string& id) const { return query_index_.count(id) != 0; }

 private:
  std::vector<Document> docs_;
  std::vector<Query> queries_;
  std::unordered_map<std::string, std::size_t> doc_index_;
  std::unordered_map<std::string, std::size_t> query_index_;
};

struct CorpusStats {
  std::size_t num_docs = 0;
  double avg_doc_len = 0.0;
  std::unordered_map<std::string, std::size_t> doc_freq;
  std::size_t total_terms = 0;
  std::unordered_map<std::string, std::size_t> collection_tf;

  std::size_t df(const std::string& t) const {
    auto it = doc_freq.find(t);
    return it == doc_freq.end() ? 0 : it->second;
  }
  std::size_t ctf(const std::string& t) const {
    auto it = collection_tf.find(t);
    return it == collection_tf.end() ? 0 : it->second;
  }
};

inline CorpusStats build_corpus_stats(const std::vector<Document>& docs) {
  if (docs.empty()) throw data_error("empty corpus");
  CorpusStats s;
  s.num_docs = docs.size();
  for (const auto& d : docs) {
    std::unordered_map<std::string, std::size_t> seen;
    for (const auto* part : {&d.title_tokens, &d.content_tokens})
      for (const auto& t : *part) ++seen[t];
    for (const auto& [t, n] : seen) {
      ++s.doc_freq[t];
      s.collection_tf[t] += n;
    }
    s.total_terms += d.length();
  }
  s.avg_doc_len = static_cast<double>(s.total_terms) / static_cast<double>(s.num_docs);
  return s;
}

/// Graded relevance keyed by (query_id, doc_id), ordered for deterministic iteration.
using Qrels = std::map<std::pair<std::string, std::string>, int>;

/// query_id -> doc_ids in qrels order.
inline std::map<std::string, std::vector<std::string>> docs_by_query(const Qrels& qrels) {
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& [key, grade] : qrels) out[key.first].push_back(key.second);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// Label proportions per grade 0..4 (rows) for High/Mid/Low buckets, in percent.
inline constexpr std::array<std::array<double, 5>, 3> kAnnotationGradeDistribution{{
    {35.50, 15.96, 35.06, 12.99, 0.49},  // High
    {51.13, 9.40, 31.32, 8.00, 0.15},    // Mid
    {70.78, 5.16, 21.33, 2.71, 0.02},    // Low
}};

/// Query counts per bucket in the annotation set (High, Mid, Low).
inline constexpr std::array<double, 3> kAnnotationBucketCounts{1092, 1820, 1789};

struct SynthConfig {
  std::size_t vocab_size = 2000;
  std::size_t num_queries = 600;
  std::size_t docs_per_query = 20;
  std::size_t query_len_min = 2, query_len_max = 4;
  std::size_t title_len_min = 2, title_len_max = 6;
  std::size_t content_len_min = 8, content_len_max = 24;
  /// Probability a content token is a query term: match_base + match_per_grade * grade.
  double match_base = 0.03;
  double match_per_grade = 0.07;
  /// Background terms follow a Zipf law with this exponent.
  double zipf_exponent = 1.0;
  std::array<double, 3> bucket_weights = kAnnotationBucketCounts;
  std::array<std::array<double, 5>, 3> grade_distribution = kAnnotationGradeDistribution;
};

struct SyntheticData {
  std::vector<Document> documents;
  std::vector<Query> queries;
  Qrels true_relevance;
};

namespace detail {

/// Inverse-CDF sampler over a fixed discrete distribution.
class Categorical {
 public:
  template <class Range>
  explicit Categorical(const Range& weights) {
    double acc = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw data_error("negative categorical weight");
      acc += w;
      cdf_.push_back(acc);
    }
    if (!(acc > 0.0)) throw data_error("categorical weights sum to zero");
    for (auto& c : cdf_) c /= acc;
  }
  std::size_t operator()(Rng& rng) const {
    const double u = uniform01(rng);
    auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    return std::min<std::size_t>(it - cdf_.begin(), cdf_.size() - 1);
  }

 private:
  std::vector<double> cdf_;
};

inline std::string term_name(std::size_t i) { return "w" + std::to_string(i); }

}  // namespace detail

inline SyntheticData generate_synthetic_corpus(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.docs_per_query == 0) throw data_error("synthetic corpus needs docs_per_query > 0");
  if (cfg.vocab_size < cfg.query_len_max + 1) throw data_error("synthetic vocabulary too small");
  if (cfg.query_len_min == 0 || cfg.query_len_min > cfg.query_len_max || cfg.title_len_min > cfg.title_len_max ||
      cfg.content_len_min > cfg.content_len_max)
    throw data_error("inconsistent synthetic length ranges");

  Rng rng(derive_seed(seed, "synth"));
  std::vector<double> zipf(cfg.vocab_size);
  for (std::size_t i = 0; i < cfg.vocab_size; ++i) zipf[i] = 1.0 / std::pow(static_cast<double>(i + 1), cfg.zipf_exponent);
  const detail::Categorical background(zipf);
  const detail::Categorical bucket_dist(cfg.bucket_weights);
  std::array<detail::Categorical, 3> grade_dist{detail::Categorical(cfg.grade_distribution[0]),
                                                detail::Categorical(cfg.grade_distribution[1]),
                                                detail::Categorical(cfg.grade_distribution[2])};
  auto in_range = [&](std::size_t lo, std::size_t hi) { return lo + uniform_index(rng, hi - lo + 1); };

  SyntheticData out;
  out.queries.reserve(cfg.num_queries);
  out.documents.reserve(cfg.num_queries * cfg.docs_per_query);
  for (std::size_t q = 0; q < cfg.num_queries; ++q) {
    Query query;
    query.query_id = "q" + std::to_string(q);
    query.freq_bucket = static_cast<FreqBucket>(bucket_dist(rng));
    const std::size_t qlen = in_range(cfg.query_len_min, cfg.query_len_max);
    while (query.tokens.size() < qlen) {
      auto t = detail::term_name(uniform_index(rng, cfg.vocab_size));
      if (std::find(query.tokens.begin(), query.tokens.end(), t) == query.tokens.end()) query.tokens.push_back(t);
    }
    const auto& grades = grade_dist[static_cast<std::size_t>(query.freq_bucket)];
    for (std::size_t j = 0; j < cfg.docs_per_query; ++j) {
      Document doc;
      doc.doc_id = "d" + std::to_string(q) + "_" + std::to_string(j);
      const int grade = static_cast<int>(grades(rng));
      const double p_content = std::min(1.0, cfg.match_base + cfg.match_per_grade * grade);
      const double p_title = std::min(1.0, 2.0 * p_content);
      auto fill = [&](Tokens& dst, std::size_t len, double p_match) {
        for (std::size_t k = 0; k < len; ++k) {
          if (uniform01(rng) < p_match)
            dst.push_back(query.tokens[uniform_index(rng, query.tokens.size())]);
          else
            dst.push_back(detail::term_name(background(rng)));
        }
      };
      fill(doc.title_tokens, in_range(cfg.title_len_min, cfg.title_len_max), p_title);
      fill(doc.content_tokens, in_range(cfg.content_len_min, cfg.content_len_max), p_content);
      out.true_relevance[{query.query_id, doc.doc_id}] = grade;
      out.documents.push_back(std::move(doc));
    }
    out.queries.push_back(std::move(query));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline void write_corpus(const std::string& path, const std::vector<Document>& docs) {
  auto os = io::open_artifact(path, "corpus");
  for (const auto& d : docs)
    os << d.doc_id << '\t' << detokenize(d.title_tokens) << '\t' << detokenize(d.content_tokens) << '\n';
}

inline std::vector<Document> read_corpus(const std::string& path) {
  std::vector<Document> docs;
  for (auto& row : io::read_rows(path, "corpus", 3))
    docs.push_back({row.fields[0], tokenize(row.fields[1]), tokenize(row.fields[2])});
  return docs;
}

inline void write_queries(const std::string& path, const std::vector<Query>& queries) {
  auto os = io::open_artifact(path, "queries");
  for (const auto& q : queries) os << q.query_id << '\t' << detokenize(q.tokens) << '\t' << to_string(q.freq_bucket) << '\n';
}

inline std::vector<Query> read_queries(const std::string& path) {
  std::vector<Query> queries;
  for (auto& row : io::read_rows(path, "queries", 3))
    queries.push_back({row.fields[0], tokenize(row.fields[1]), parse_bucket(row.fields[2])});
  return queries;
}

inline void write_qrels(const std::string& path, const Qrels& qrels) {
  auto os = io::open_artifact(path, "qrels");
  for (const auto& [key, grade] : qrels) os << key.first << '\t' << key.second << '\t' << grade << '\n';
}

inline Qrels read_qrels(const std::string& path) {
  Qrels qrels;
  for (auto& row : io::read_rows(path, "qrels", 3)) {
    const auto g = io::parse_int(row.fields[2], "grade");
    if (g < 0 || g > 4) throw data_error(path + ":" + std::to_string(row.line_number) + ": grade out of range");
    if (!qrels.emplace(std::make_pair(row.fields[0], row.fields[1]), static_cast<int>(g)).second)
      throw data_error(path + ":" + std::to_string(row.line_number) + ": duplicate (query_id, doc_id)");
  }
  return qrels;
}

}  // namespace ultr
