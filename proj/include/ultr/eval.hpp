#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "ultr/corpus.hpp"
#include "ultr/io.hpp"

namespace ultr {

enum class GainKind { Exponential, Linear };

inline double gain(int grade, GainKind kind = GainKind::Exponential) {
  return kind == GainKind::Exponential ? std::exp2(static_cast<double>(grade)) - 1.0 : static_cast<double>(grade);
}

inline double discount(std::size_t rank_zero_based) { return 1.0 / std::log2(static_cast<double>(rank_zero_based) + 2.0); }

/// DCG over grades given in ranked order: sum of gain / log2(rank + 1), 1-based ranks.
inline double dcg_at_k(const std::vector<int>& ranked_grades, std::size_t k, GainKind kind = GainKind::Exponential) {
  if (k == 0) throw data_error("dcg cutoff k must be >= 1");
  double s = 0.0;
  const std::size_t n = std::min(k, ranked_grades.size());
  for (std::size_t i = 0; i < n; ++i) s += gain(ranked_grades[i], kind) * discount(i);
  return s;
}

inline double ideal_dcg_at_k(std::vector<int> grades, std::size_t k, GainKind kind = GainKind::Exponential) {
  std::sort(grades.begin(), grades.end(), std::greater<>());
  return dcg_at_k(grades, k, kind);
}

/// Queries without any positive grade score NDCG 1 (every order is ideal).
inline double ndcg_at_k(const std::vector<int>& ranked_grades, std::size_t k, GainKind kind = GainKind::Exponential) {
  const double ideal = ideal_dcg_at_k(ranked_grades, k, kind);
  if (ideal <= 0.0) return 1.0;
  return dcg_at_k(ranked_grades, k, kind) / ideal;
}

/// Scores keyed like Qrels.
using ScoreTable = std::map<std::pair<std::string, std::string>, double>;

struct QueryMetrics {
  std::string query_id;
  double dcg = 0;
  double ndcg = 0;
};

struct MetricsReport {
  std::string run_id;
  std::size_t k = 10;
  std::vector<QueryMetrics> per_query;
  double mean_dcg = 0;
  double mean_ndcg = 0;
  std::size_t skipped_queries = 0;

  std::size_t query_count() const { return per_query.size(); }
};

/// Orders a query's documents by score descending, ties broken by doc_id ascending.
inline void sort_by_score(std::vector<std::pair<std::string, double>>& docs) {
  std::sort(docs.begin(), docs.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
}

/// Ranks every annotated query by `scores` and aggregates DCG@k / NDCG@k.
/// Scored queries absent from the annotations are skipped and counted.
inline MetricsReport evaluate_run(const ScoreTable& scores, const Qrels& annotations, std::size_t k = 10,
                                  std::string run_id = "run", GainKind kind = GainKind::Exponential) {
  MetricsReport report;
  report.run_id = std::move(run_id);
  report.k = k;
  std::map<std::string, std::vector<std::pair<std::string, double>>> ranked;
  std::map<std::string, bool> scored_queries;
  for (const auto& [key, s] : scores) scored_queries[key.first] = true;
  for (const auto& [key, grade] : annotations) {
    auto it = scores.find(key);
    if (it == scores.end()) throw data_error("no score for annotated pair (" + key.first + ", " + key.second + ")");
    ranked[key.first].emplace_back(key.second, it->second);
  }
  for (const auto& [qid, unused] : scored_queries)
    if (!ranked.count(qid)) ++report.skipped_queries;

  for (auto& [qid, docs] : ranked) {
    sort_by_score(docs);
    std::vector<int> grades;
    grades.reserve(docs.size());
    for (const auto& [doc, s] : docs) grades.push_back(annotations.at({qid, doc}));
    report.per_query.push_back({qid, dcg_at_k(grades, k, kind), ndcg_at_k(grades, k, kind)});
  }
  if (!report.per_query.empty()) {
    for (const auto& m : report.per_query) {
      report.mean_dcg += m.dcg;
      report.mean_ndcg += m.ndcg;
    }
    report.mean_dcg /= static_cast<double>(report.per_query.size());
    report.mean_ndcg /= static_cast<double>(report.per_query.size());
  }
  return report;
}

inline void write_per_query_report(const std::string& path, const MetricsReport& r) {
  auto os = io::open_artifact(path, "metrics");
  os << "query_id\tdcg@" << r.k << "\tndcg@" << r.k << '\n';
  for (const auto& m : r.per_query) os << m.query_id << '\t' << io::format_double(m.dcg) << '\t' << io::format_double(m.ndcg) << '\n';
}

/// Fixed-width comparison table, one line per run.
inline std::string format_report_table(const std::vector<MetricsReport>& reports) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-32s %8s %10s %10s\n", "run", "queries", "DCG@10", "NDCG@10");
  out += line;
  for (const auto& r : reports) {
    std::snprintf(line, sizeof(line), "%-32s %8zu %10.5f %10.5f\n", r.run_id.c_str(), r.query_count(), r.mean_dcg,
                  r.mean_ndcg);
    out += line;
  }
  return out;
}

// Score files: query_id, doc_id, score.

inline void write_scores(const std::string& path, const ScoreTable& scores) {
  auto os = io::open_artifact(path, "scores");
  for (const auto& [key, s] : scores) os << key.first << '\t' << key.second << '\t' << io::format_double(s) << '\n';
}

inline ScoreTable read_scores(const std::string& path) {
  ScoreTable scores;
  for (auto& row : io::read_rows(path, "scores", 3)) scores[{row.fields[0], row.fields[1]}] = io::parse_double(row.fields[2], "score");
  return scores;
}

}  // namespace ultr
