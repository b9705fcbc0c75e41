#pragma once

// Gradient-boosted regression trees trained with a LambdaRank objective over the
// heuristic features plus the scores of trained runs.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ultr/eval.hpp"
#include "ultr/features.hpp"
#include "ultr/finetune.hpp"
#include "ultr/io.hpp"

namespace ultr {

/// Rows in (query_id, doc_id) order. Columns: the eight heuristic features in their
/// fixed order, then one column per registered run in registration order.
struct EnsembleTable {
  std::vector<std::string> columns;
  std::vector<std::string> query_ids;
  std::vector<std::string> doc_ids;
  std::vector<std::vector<double>> x;
  std::vector<int> labels;
  /// Query q owns rows [query_offsets[q], query_offsets[q + 1]).
  std::vector<std::size_t> query_offsets;

  std::size_t num_rows() const { return x.size(); }
  std::size_t num_queries() const { return query_offsets.empty() ? 0 : query_offsets.size() - 1; }
};

using NamedRun = std::pair<std::string, ScoreTable>;

/// Joins labels, features and run scores on (query_id, doc_id). `labels` supplies the
/// keys; every key must be present in every input.
inline EnsembleTable assemble_rows(const Qrels& labels, const FeatureTable& features, const std::vector<NamedRun>& runs) {
  EnsembleTable t;
  for (auto n : kFeatureNames) t.columns.emplace_back(n);
  for (const auto& [name, unused] : runs) {
    if (std::find(t.columns.begin(), t.columns.end(), name) != t.columns.end())
      throw data_error("duplicate ensemble column '" + name + "'");
    t.columns.push_back(name);
  }
  for (const auto& [key, grade] : labels) {
    auto name_of = [&] { return "(" + key.first + ", " + key.second + ")"; };
    auto fit = features.find(key);
    if (fit == features.end()) throw data_error("ensemble: no features for " + name_of());
    const auto f = fit->second.as_array();
    std::vector<double> row(f.begin(), f.end());
    for (const auto& [name, scores] : runs) {
      auto sit = scores.find(key);
      if (sit == scores.end()) throw data_error("ensemble: run '" + name + "' has no score for " + name_of());
      row.push_back(sit->second);
    }
    if (t.query_ids.empty() || t.query_ids.back() != key.first) t.query_offsets.push_back(t.x.size());
    t.query_ids.push_back(key.first);
    t.doc_ids.push_back(key.second);
    t.x.push_back(std::move(row));
    t.labels.push_back(grade);
  }
  t.query_offsets.push_back(t.x.size());
  if (t.x.empty()) t.query_offsets.clear();
  return t;
}

/// Rows of the queries selected by `keep` (indices into the table's query list).
inline EnsembleTable subset_queries(const EnsembleTable& t, const std::vector<std::size_t>& keep) {
  EnsembleTable out;
  out.columns = t.columns;
  for (auto q : keep) {
    out.query_offsets.push_back(out.x.size());
    for (std::size_t r = t.query_offsets[q]; r < t.query_offsets[q + 1]; ++r) {
      out.query_ids.push_back(t.query_ids[r]);
      out.doc_ids.push_back(t.doc_ids[r]);
      out.x.push_back(t.x[r]);
      out.labels.push_back(t.labels[r]);
    }
  }
  if (!out.x.empty()) out.query_offsets.push_back(out.x.size());
  else out.query_offsets.clear();
  return out;
}

// ---------------------------------------------------------------------------
// LambdaRank
// ---------------------------------------------------------------------------

inline double logistic(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

/// Rank (0-based) of each document when sorted by score descending, ties by index.
inline std::vector<std::size_t> score_ranks(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> rank(scores.size());
  for (std::size_t r = 0; r < order.size(); ++r) rank[order[r]] = r;
  return rank;
}

struct LambdaPair {
  double lambda = 0;
  double hessian = 0;
  double delta_dcg = 0;
};

/// Term of the pair (i, j) with grade_i > grade_j given their current ranks:
/// lambda = -sigmoid(s_j - s_i) * |delta DCG@10| (added to i, subtracted from j).
inline LambdaPair lambda_pair(double s_i, double s_j, int g_i, int g_j, std::size_t rank_i, std::size_t rank_j,
                              std::size_t k = 10) {
  auto disc = [&](std::size_t r) { return r < k ? discount(r) : 0.0; };
  LambdaPair p;
  p.delta_dcg = std::abs((gain(g_i) - gain(g_j)) * (disc(rank_i) - disc(rank_j)));
  const double rho = logistic(s_j - s_i);
  p.lambda = -rho * p.delta_dcg;
  p.hessian = rho * (1.0 - rho) * p.delta_dcg;
  return p;
}

struct GradHess {
  std::vector<double> grad;
  std::vector<double> hess;
};

/// First and second order LambdaRank statistics for the documents of one query.
inline GradHess lambdarank_gradients(std::span<const double> scores, std::span<const int> grades, std::size_t k = 10) {
  if (scores.size() != grades.size()) throw data_error("lambdarank_gradients: length mismatch");
  GradHess gh{std::vector<double>(scores.size(), 0.0), std::vector<double>(scores.size(), 0.0)};
  const auto rank = score_ranks(scores);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (grades[i] <= grades[j]) continue;
      const auto p = lambda_pair(scores[i], scores[j], grades[i], grades[j], rank[i], rank[j], k);
      gh.grad[i] += p.lambda;
      gh.grad[j] -= p.lambda;
      gh.hess[i] += p.hessian;
      gh.hess[j] += p.hessian;
    }
  }
  return gh;
}

// ---------------------------------------------------------------------------
// Trees
// ---------------------------------------------------------------------------

struct GBDTHyperparams {
  std::size_t num_leaves = 15;
  std::size_t max_depth = 5;
  double learning_rate = 0.1;
  std::size_t num_iterations = 100;
  std::size_t min_samples_leaf = 5;

  void validate() const {
    if (num_leaves < 2) throw data_error("num_leaves must be >= 2");
    if (max_depth < 1) throw data_error("max_depth must be >= 1");
    if (!(learning_rate >= 0)) throw data_error("learning_rate must be >= 0");
    if (min_samples_leaf < 1) throw data_error("min_samples_leaf must be >= 1");
  }
};

inline constexpr double kLeafHessianEps = 1e-6;

struct TreeNode {
  /// -1 for leaves.
  int feature = -1;
  double threshold = 0;
  int left = -1;
  int right = -1;
  double value = 0;
};

struct RegressionTree {
  std::vector<TreeNode> nodes;

  double predict(std::span<const double> x) const {
    std::size_t n = 0;
    while (nodes[n].feature >= 0) n = static_cast<std::size_t>(x[static_cast<std::size_t>(nodes[n].feature)] <= nodes[n].threshold ? nodes[n].left : nodes[n].right);
    return nodes[n].value;
  }
  std::size_t num_leaves() const {
    return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& t) { return t.feature < 0; }));
  }
};

struct GBDTModel {
  std::vector<std::string> columns;
  std::vector<RegressionTree> trees;
  double learning_rate = 0.1;
  double base_score = 0;

  double predict(std::span<const double> row) const {
    if (row.size() != columns.size())
      throw data_error("ensemble row has " + std::to_string(row.size()) + " columns, model expects " +
                       std::to_string(columns.size()));
    double sum = 0;
    for (const auto& t : trees) sum += t.predict(row);
    return base_score + learning_rate * sum;
  }

  std::vector<double> predict(const EnsembleTable& t) const {
    if (t.columns != columns) throw data_error("ensemble table columns do not match the model");
    std::vector<double> out;
    out.reserve(t.num_rows());
    for (const auto& row : t.x) out.push_back(predict(row));
    return out;
  }
};

namespace detail {

struct SplitCandidate {
  double gain = 0;
  int feature = -1;
  double threshold = 0;
};

inline double leaf_objective(double g, double h) { return g * g / (h + kLeafHessianEps); }

/// Best exact split of `rows` on one feature: thresholds halfway between consecutive
/// distinct values, both sides holding at least `min_leaf` rows.
inline SplitCandidate best_split_on(const EnsembleTable& t, const std::vector<std::size_t>& rows, std::size_t f,
                                    const std::vector<double>& g, const std::vector<double>& h, std::size_t min_leaf) {
  std::vector<std::size_t> order(rows);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return t.x[a][f] < t.x[b][f]; });
  double G = 0, H = 0;
  for (auto r : order) {
    G += g[r];
    H += h[r];
  }
  const double parent = leaf_objective(G, H);
  SplitCandidate best;
  double gl = 0, hl = 0;
  for (std::size_t i = 0; i + 1 < order.size(); ++i) {
    gl += g[order[i]];
    hl += h[order[i]];
    const double a = t.x[order[i]][f], b = t.x[order[i + 1]][f];
    if (!(a < b)) continue;
    const std::size_t n_left = i + 1;
    if (n_left < min_leaf || order.size() - n_left < min_leaf) continue;
    const double gain = leaf_objective(gl, hl) + leaf_objective(G - gl, H - hl) - parent;
    if (gain > best.gain) best = {gain, static_cast<int>(f), a + (b - a) / 2};
  }
  return best;
}

inline SplitCandidate best_split(const EnsembleTable& t, const std::vector<std::size_t>& rows, const std::vector<double>& g,
                                 const std::vector<double>& h, std::size_t min_leaf, std::size_t threads) {
  const std::size_t nf = t.columns.size();
  std::vector<SplitCandidate> per(nf);
  parallel_for(nf, threads, [&](std::size_t f) { per[f] = best_split_on(t, rows, f, g, h, min_leaf); });
  SplitCandidate best;
  for (const auto& c : per)
    if (c.feature >= 0 && c.gain > best.gain) best = c;
  return best;
}

inline double leaf_value(const std::vector<std::size_t>& rows, const std::vector<double>& g, const std::vector<double>& h) {
  double G = 0, H = 0;
  for (auto r : rows) {
    G += g[r];
    H += h[r];
  }
  return -G / (H + kLeafHessianEps);
}

}  // namespace detail

/// Grows one tree leaf-wise: the open leaf with the largest positive gain (lowest node
/// id on ties) is split until num_leaves leaves exist or no leaf can be split.
inline RegressionTree fit_tree(const EnsembleTable& t, const std::vector<double>& g, const std::vector<double>& h,
                               const GBDTHyperparams& hp, std::size_t threads = 1) {
  struct Open {
    std::size_t node;
    std::size_t depth;
    std::vector<std::size_t> rows;
    detail::SplitCandidate split;
  };
  RegressionTree tree;
  std::vector<std::size_t> all(t.num_rows());
  std::iota(all.begin(), all.end(), 0);
  tree.nodes.push_back({-1, 0, -1, -1, detail::leaf_value(all, g, h)});
  std::vector<Open> open;
  auto consider = [&](std::size_t node, std::size_t depth, std::vector<std::size_t> rows) {
    detail::SplitCandidate s;
    if (depth < hp.max_depth) s = detail::best_split(t, rows, g, h, hp.min_samples_leaf, threads);
    open.push_back({node, depth, std::move(rows), s});
  };
  consider(0, 0, all);
  std::size_t leaves = 1;
  while (leaves < hp.num_leaves) {
    std::size_t pick = open.size();
    for (std::size_t i = 0; i < open.size(); ++i) {
      if (open[i].split.feature < 0 || !(open[i].split.gain > 0)) continue;
      if (pick == open.size() || open[i].split.gain > open[pick].split.gain ||
          (open[i].split.gain == open[pick].split.gain && open[i].node < open[pick].node))
        pick = i;
    }
    if (pick == open.size()) break;
    Open leaf = std::move(open[pick]);
    open.erase(open.begin() + static_cast<std::ptrdiff_t>(pick));
    std::vector<std::size_t> left, right;
    const auto f = static_cast<std::size_t>(leaf.split.feature);
    for (auto r : leaf.rows) (t.x[r][f] <= leaf.split.threshold ? left : right).push_back(r);
    const auto li = tree.nodes.size();
    tree.nodes.push_back({-1, 0, -1, -1, detail::leaf_value(left, g, h)});
    tree.nodes.push_back({-1, 0, -1, -1, detail::leaf_value(right, g, h)});
    auto& n = tree.nodes[leaf.node];
    n.feature = leaf.split.feature;
    n.threshold = leaf.split.threshold;
    n.left = static_cast<int>(li);
    n.right = static_cast<int>(li + 1);
    n.value = 0;
    ++leaves;
    consider(li, leaf.depth + 1, std::move(left));
    consider(li + 1, leaf.depth + 1, std::move(right));
  }
  for (const auto& n : tree.nodes)
    if (n.feature < 0 && !std::isfinite(n.value)) throw numeric_error("non-finite leaf value");
  return tree;
}

/// LambdaRank gradients of every row for the current scores.
inline GradHess table_gradients(const EnsembleTable& t, const std::vector<double>& scores) {
  GradHess all{std::vector<double>(t.num_rows(), 0.0), std::vector<double>(t.num_rows(), 0.0)};
  for (std::size_t q = 0; q < t.num_queries(); ++q) {
    const auto b = t.query_offsets[q], e = t.query_offsets[q + 1];
    const auto gh = lambdarank_gradients(std::span<const double>(scores).subspan(b, e - b),
                                         std::span<const int>(t.labels).subspan(b, e - b));
    std::copy(gh.grad.begin(), gh.grad.end(), all.grad.begin() + static_cast<std::ptrdiff_t>(b));
    std::copy(gh.hess.begin(), gh.hess.end(), all.hess.begin() + static_cast<std::ptrdiff_t>(b));
  }
  return all;
}

/// Boosting is fully deterministic (exact splits, fixed tie-breaks); `seed` is kept for
/// interface stability and does not influence the result.
inline GBDTModel train_gbdt(const EnsembleTable& t, const GBDTHyperparams& hp, std::uint64_t seed = 0,
                            std::size_t threads = 1) {
  (void)seed;
  hp.validate();
  bool varied = false;
  for (std::size_t q = 0; q < t.num_queries() && !varied; ++q)
    for (std::size_t r = t.query_offsets[q] + 1; r < t.query_offsets[q + 1]; ++r)
      if (t.labels[r] != t.labels[t.query_offsets[q]]) varied = true;
  if (!varied) throw data_error("ensemble training table has no grade variation within any query");

  GBDTModel m;
  m.columns = t.columns;
  m.learning_rate = hp.learning_rate;
  std::vector<double> scores(t.num_rows(), m.base_score);
  for (std::size_t it = 0; it < hp.num_iterations; ++it) {
    const auto gh = table_gradients(t, scores);
    auto tree = fit_tree(t, gh.grad, gh.hess, hp, threads);
    for (std::size_t r = 0; r < t.num_rows(); ++r) scores[r] += m.learning_rate * tree.predict(t.x[r]);
    m.trees.push_back(std::move(tree));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

inline ScoreTable table_scores(const EnsembleTable& t, const std::vector<double>& scores) {
  ScoreTable out;
  for (std::size_t r = 0; r < t.num_rows(); ++r) out[{t.query_ids[r], t.doc_ids[r]}] = scores[r];
  return out;
}

inline Qrels table_labels(const EnsembleTable& t) {
  Qrels out;
  for (std::size_t r = 0; r < t.num_rows(); ++r) out[{t.query_ids[r], t.doc_ids[r]}] = t.labels[r];
  return out;
}

inline double table_dcg(const EnsembleTable& t, const std::vector<double>& scores, std::size_t k = 10) {
  return evaluate_run(table_scores(t, scores), table_labels(t), k).mean_dcg;
}

/// Mean DCG@10 when sorting by one input column (descending).
inline double column_dcg(const EnsembleTable& t, std::size_t column, std::size_t k = 10) {
  std::vector<double> s;
  for (const auto& row : t.x) s.push_back(row[column]);
  return table_dcg(t, s, k);
}

struct TuningResult {
  GBDTHyperparams best;
  std::vector<std::pair<GBDTHyperparams, double>> trials;
};

/// Picks hyperparameters on a nested 80/20 query split of `t`: each grid point trains on
/// the 80% part and is scored by DCG@10 on the 20% part; ties keep the earlier grid point.
inline TuningResult tune_gbdt(const EnsembleTable& t, const std::vector<GBDTHyperparams>& grid, std::uint64_t seed,
                              std::size_t threads = 1) {
  if (grid.empty()) throw data_error("empty hyperparameter grid");
  std::vector<std::size_t> qs(t.num_queries());
  std::iota(qs.begin(), qs.end(), 0);
  Rng rng(derive_seed(seed, "ensemble-tune"));
  std::shuffle(qs.begin(), qs.end(), rng);
  std::size_t n_fit = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(qs.size())));
  if (qs.size() >= 2) n_fit = std::clamp<std::size_t>(n_fit, 1, qs.size() - 1);
  std::vector<std::size_t> fit_q(qs.begin(), qs.begin() + static_cast<std::ptrdiff_t>(n_fit));
  std::vector<std::size_t> hold_q(qs.begin() + static_cast<std::ptrdiff_t>(n_fit), qs.end());
  std::sort(fit_q.begin(), fit_q.end());
  std::sort(hold_q.begin(), hold_q.end());
  const auto fit = subset_queries(t, fit_q);
  const auto hold = subset_queries(t, hold_q);

  TuningResult r;
  double best = -1;
  for (const auto& hp : grid) {
    double dcg = 0;
    try {
      const auto m = train_gbdt(fit, hp, seed, threads);
      dcg = hold.num_rows() ? table_dcg(hold, m.predict(hold)) : 0.0;
    } catch (const data_error&) {
      dcg = 0;
    }
    r.trials.emplace_back(hp, dcg);
    if (dcg > best) {
      best = dcg;
      r.best = hp;
    }
  }
  return r;
}

inline std::vector<GBDTHyperparams> default_gbdt_grid() {
  std::vector<GBDTHyperparams> grid;
  for (std::size_t leaves : {7u, 15u, 31u})
    for (double lr : {0.05, 0.1}) {
      GBDTHyperparams hp;
      hp.num_leaves = leaves;
      hp.learning_rate = lr;
      grid.push_back(hp);
    }
  return grid;
}

// ---------------------------------------------------------------------------
// Model file
//   # ultr gbdt v1
//   columns  <name> ...
//   learning_rate  <x>
//   base_score  <x>
//   trees  <n>
//   tree  <i>  <num_nodes>
//   node  <id>  <feature>  <threshold>  <left>  <right>  <value>
// ---------------------------------------------------------------------------

inline void write_gbdt_model(const std::string& path, const GBDTModel& m) {
  auto os = io::open_artifact(path, "gbdt");
  os << "columns";
  for (const auto& c : m.columns) os << '\t' << c;
  os << "\nlearning_rate\t" << io::format_double(m.learning_rate) << "\nbase_score\t" << io::format_double(m.base_score)
     << "\ntrees\t" << m.trees.size() << '\n';
  for (std::size_t i = 0; i < m.trees.size(); ++i) {
    const auto& t = m.trees[i];
    os << "tree\t" << i << '\t' << t.nodes.size() << '\n';
    for (std::size_t n = 0; n < t.nodes.size(); ++n) {
      const auto& nd = t.nodes[n];
      os << "node\t" << n << '\t' << nd.feature << '\t' << io::format_double(nd.threshold) << '\t' << nd.left << '\t'
         << nd.right << '\t' << io::format_double(nd.value) << '\n';
    }
  }
  if (!os) throw data_error("failed writing '" + path + "'");
}

inline GBDTModel read_gbdt_model(const std::string& path) {
  const auto rows = io::read_rows(path, "gbdt", 0);
  GBDTModel m;
  std::size_t i = 0;
  auto expect = [&](const char* key, std::size_t min_fields) -> const io::Row& {
    if (i >= rows.size()) throw data_error(path + ": truncated model, expected '" + key + "'");
    const auto& r = rows[i++];
    if (r.fields.empty() || r.fields[0] != key || r.fields.size() < min_fields)
      throw data_error(path + ":" + std::to_string(r.line_number) + ": expected '" + key + "'");
    return r;
  };
  const auto& cols = expect("columns", 1);
  m.columns.assign(cols.fields.begin() + 1, cols.fields.end());
  m.learning_rate = io::parse_double(expect("learning_rate", 2).fields[1], "learning_rate");
  m.base_score = io::parse_double(expect("base_score", 2).fields[1], "base_score");
  const auto n_trees = static_cast<std::size_t>(io::parse_int(expect("trees", 2).fields[1], "trees"));
  for (std::size_t k = 0; k < n_trees; ++k) {
    const auto n_nodes = static_cast<std::size_t>(io::parse_int(expect("tree", 3).fields[2], "node count"));
    RegressionTree t;
    for (std::size_t n = 0; n < n_nodes; ++n) {
      const auto& r = expect("node", 7);
      TreeNode nd;
      nd.feature = static_cast<int>(io::parse_int(r.fields[2], "feature"));
      nd.threshold = io::parse_double(r.fields[3], "threshold");
      nd.left = static_cast<int>(io::parse_int(r.fields[4], "left"));
      nd.right = static_cast<int>(io::parse_int(r.fields[5], "right"));
      nd.value = io::parse_double(r.fields[6], "value");
      if (nd.feature >= static_cast<int>(m.columns.size())) throw data_error(path + ": node feature out of range");
      if (nd.feature >= 0 && (nd.left < 0 || nd.right < 0 || static_cast<std::size_t>(nd.left) >= n_nodes ||
                              static_cast<std::size_t>(nd.right) >= n_nodes || nd.left <= static_cast<int>(n) ||
                              nd.right <= static_cast<int>(n)))
        throw data_error(path + ":" + std::to_string(r.line_number) + ": bad child index");
      if (nd.feature < 0 && !std::isfinite(nd.value)) throw data_error(path + ": non-finite leaf value");
      t.nodes.push_back(nd);
    }
    if (t.nodes.empty()) throw data_error(path + ": empty tree");
    m.trees.push_back(std::move(t));
  }
  if (i != rows.size()) throw data_error(path + ": trailing content after last tree");
  return m;
}

/// Manifest: one line per run column, "<name> \t <score file>".
inline void write_run_manifest(const std::string& path, const std::vector<std::pair<std::string, std::string>>& runs) {
  auto os = io::open_artifact(path, "runs");
  for (const auto& [name, file] : runs) os << name << '\t' << file << '\n';
  if (!os) throw data_error("failed writing '" + path + "'");
}

inline std::vector<std::pair<std::string, std::string>> read_run_manifest(const std::string& path) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& row : io::read_rows(path, "runs", 2)) out.emplace_back(row.fields[0], row.fields[1]);
  return out;
}

}  // namespace ultr
