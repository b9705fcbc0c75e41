#pragma once

// Stage two: training on graded annotations. Grades are binarized (>= 2 is positive),
// each query yields groups of one positive and T-1 negatives, and the scorer is
// trained with the pairwise, multi-negative softmax or listwise loss. High-frequency
// queries can be duplicated in the training split; the best epoch is chosen by
// validation DCG@10.

#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ultr/checkpoint.hpp"
#include "ultr/eval.hpp"
#include "ultr/losses.hpp"
#include "ultr/ranker.hpp"

namespace ultr {

struct AnnotatedExample {
  std::string query_id;
  std::string doc_id;
  int grade = 0;
  FreqBucket freq_bucket = FreqBucket::Mid;
  /// Copy index assigned by head-query duplication; 0 for originals.
  std::size_t replica = 0;
};

enum class FinetuneLoss { Pairwise, SoftmaxNegatives, Listwise };

struct FinetuneConfig {
  FinetuneLoss loss = FinetuneLoss::SoftmaxNegatives;
  /// Group size: one positive plus T-1 negatives.
  std::size_t T = 4;
  std::size_t head_dup_factor = 2;
  double split_ratio = 0.8;
  /// Groups drawn per query (per duplicate) and epoch.
  std::size_t groups_per_query = 4;
  std::size_t epochs = 3;
  /// Groups per optimizer step.
  std::size_t batch_size = 16;
  double lr = 5e-4;
  double weight_decay = 0.01;
  bool log_variant = true;
  std::uint64_t seed = 1;

  void validate() const {
    if (T < 2) throw data_error("T must be >= 2");
    if (head_dup_factor < 1) throw data_error("head_dup_factor must be >= 1");
    if (!(split_ratio > 0 && split_ratio < 1)) throw data_error("split_ratio must be in (0,1)");
    if (groups_per_query == 0) throw data_error("groups_per_query must be >= 1");
    if (batch_size == 0) throw data_error("batch_size must be >= 1");
    if (!(lr > 0)) throw data_error("lr must be > 0");
  }
};

inline bool binarize(int grade) {
  if (grade < 0 || grade > 4) throw data_error("grade " + std::to_string(grade) + " outside 0..4");
  return grade >= 2;
}

inline Qrels to_qrels(const std::vector<AnnotatedExample>& examples) {
  Qrels q;
  for (const auto& e : examples) q[{e.query_id, e.doc_id}] = e.grade;
  return q;
}

/// Annotations for every judged pair, buckets taken from the queries.
inline std::vector<AnnotatedExample> make_annotations(const Qrels& qrels, const Corpus& corpus) {
  std::vector<AnnotatedExample> out;
  for (const auto& [key, grade] : qrels) out.push_back({key.first, key.second, grade, corpus.query(key.first).freq_bucket});
  return out;
}

// ---------------------------------------------------------------------------
// Annotation file: query_id \t doc_id \t grade \t freq_bucket
// ---------------------------------------------------------------------------

inline void write_annotations(const std::string& path, const std::vector<AnnotatedExample>& examples) {
  auto os = io::open_artifact(path, "annotations");
  for (const auto& e : examples)
    os << e.query_id << '\t' << e.doc_id << '\t' << e.grade << '\t' << to_string(e.freq_bucket) << '\n';
  if (!os) throw data_error("failed writing '" + path + "'");
}

inline std::vector<AnnotatedExample> read_annotations(const std::string& path) {
  std::vector<AnnotatedExample> out;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& row : io::read_rows(path, "annotations", 4)) {
    AnnotatedExample e;
    e.query_id = row.fields[0];
    e.doc_id = row.fields[1];
    e.grade = static_cast<int>(io::parse_int(row.fields[2], "grade"));
    binarize(e.grade);
    e.freq_bucket = parse_bucket(row.fields[3]);
    if (!seen.emplace(e.query_id, e.doc_id).second)
      throw data_error(path + ":" + std::to_string(row.line_number) + ": duplicate pair (" + e.query_id + ", " +
                       e.doc_id + ")");
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset operations
// ---------------------------------------------------------------------------

/// Every example of a High-frequency query appears `factor` times (replica 0..factor-1);
/// the result is shuffled with `seed`.
inline std::vector<AnnotatedExample> duplicate_head_queries(const std::vector<AnnotatedExample>& dataset,
                                                            std::size_t factor, std::uint64_t seed) {
  if (factor < 1) throw data_error("head_dup_factor must be >= 1");
  if (factor == 1) return dataset;
  std::vector<AnnotatedExample> out;
  for (const auto& e : dataset) {
    const std::size_t copies = e.freq_bucket == FreqBucket::High ? factor : 1;
    for (std::size_t r = 0; r < copies; ++r) {
      out.push_back(e);
      out.back().replica = r;
    }
  }
  Rng rng(derive_seed(seed, "head-dup"));
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

/// Splits by query id: round(ratio * #queries) queries (at least one on each side when
/// two or more exist) go to the first part.
inline std::pair<std::vector<AnnotatedExample>, std::vector<AnnotatedExample>> split_by_query(
    const std::vector<AnnotatedExample>& dataset, double ratio, std::uint64_t seed) {
  if (!(ratio > 0 && ratio < 1)) throw data_error("split ratio must be in (0,1)");
  std::set<std::string> ids;
  for (const auto& e : dataset) ids.insert(e.query_id);
  std::vector<std::string> order(ids.begin(), ids.end());
  Rng rng(derive_seed(seed, "split"));
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(order.size())));
  if (order.size() >= 2) n_train = std::clamp<std::size_t>(n_train, 1, order.size() - 1);
  const std::set<std::string> train_ids(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::pair<std::vector<AnnotatedExample>, std::vector<AnnotatedExample>> out;
  for (const auto& e : dataset) (train_ids.count(e.query_id) ? out.first : out.second).push_back(e);
  return out;
}

struct TrainingUnit {
  std::string query_id;
  std::size_t replica = 0;
  std::vector<std::string> positives;
  std::vector<std::string> negatives;
};

/// One unit per (query, replica), documents in doc_id order.
inline std::vector<TrainingUnit> training_units(const std::vector<AnnotatedExample>& dataset) {
  std::map<std::pair<std::string, std::size_t>, TrainingUnit> units;
  for (const auto& e : dataset) {
    auto& u = units[{e.query_id, e.replica}];
    u.query_id = e.query_id;
    u.replica = e.replica;
    (binarize(e.grade) ? u.positives : u.negatives).push_back(e.doc_id);
  }
  std::vector<TrainingUnit> out;
  for (auto& [key, u] : units) {
    std::sort(u.positives.begin(), u.positives.end());
    std::sort(u.negatives.begin(), u.negatives.end());
    out.push_back(std::move(u));
  }
  return out;
}

/// <q, d1-, ..., d(T-1)-, dT+>: negatives first, the positive last.
struct TrainingGroup {
  std::string query_id;
  std::vector<std::string> doc_ids;
  std::vector<std::uint8_t> is_positive;
};

/// One group: a uniformly drawn positive and T-1 uniformly drawn negatives (without
/// replacement when enough exist). Units lacking a positive or a negative yield nothing.
inline std::optional<TrainingGroup> sample_group(const TrainingUnit& unit, std::size_t T, std::uint64_t seed) {
  if (T < 2) throw data_error("T must be >= 2");
  if (unit.positives.empty() || unit.negatives.empty()) return std::nullopt;
  Rng rng(seed);
  TrainingGroup g;
  g.query_id = unit.query_id;
  const std::size_t k = T - 1;
  if (unit.negatives.size() >= k) {
    std::vector<std::size_t> idx(unit.negatives.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < k; ++i) {
      std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
      g.doc_ids.push_back(unit.negatives[idx[i]]);
    }
  } else {
    for (std::size_t i = 0; i < k; ++i) g.doc_ids.push_back(unit.negatives[uniform_index(rng, unit.negatives.size())]);
  }
  g.doc_ids.push_back(unit.positives[uniform_index(rng, unit.positives.size())]);
  g.is_positive.assign(g.doc_ids.size(), 0);
  g.is_positive.back() = 1;
  return g;
}

/// `per_unit` groups for every trainable unit; unit i, draw r uses seed
/// derive_seed(derive_seed(seed, i), r). Units without both classes are counted in `skipped`.
inline std::vector<TrainingGroup> sample_groups(const std::vector<TrainingUnit>& units, std::size_t T,
                                                std::size_t per_unit, std::uint64_t seed,
                                                std::size_t* skipped = nullptr) {
  std::vector<TrainingGroup> out;
  std::size_t skip = 0;
  for (std::size_t i = 0; i < units.size(); ++i) {
    if (units[i].positives.empty() || units[i].negatives.empty()) {
      ++skip;
      continue;
    }
    for (std::size_t r = 0; r < per_unit; ++r) out.push_back(*sample_group(units[i], T, derive_seed(derive_seed(seed, i), r)));
  }
  if (skipped) *skipped = skip;
  return out;
}

// ---------------------------------------------------------------------------
// Losses over groups
// ---------------------------------------------------------------------------

/// Loss of one group (positive last). Pairwise averages the pair loss of the positive
/// against each negative, which is exactly the single-pair loss for T = 2. Listwise
/// spreads the target mass equally over the positives of the list.
inline LossValue group_loss(std::span<const double> scores, std::span<const std::uint8_t> is_positive,
                            FinetuneLoss loss, bool log_variant) {
  switch (loss) {
    case FinetuneLoss::SoftmaxNegatives:
      return softmax_negatives_loss(scores, is_positive, log_variant);
    case FinetuneLoss::Pairwise: {
      std::size_t pos = scores.size();
      for (std::size_t j = 0; j < scores.size(); ++j)
        if (is_positive[j]) pos = j;
      if (pos == scores.size() || scores.size() < 2) throw data_error("pairwise group needs a positive and a negative");
      LossValue lv;
      lv.dscores.assign(scores.size(), 0.0);
      const double inv = 1.0 / static_cast<double>(scores.size() - 1);
      for (std::size_t j = 0; j < scores.size(); ++j) {
        if (j == pos) continue;
        const auto r = pairwise_loss(scores[pos], scores[j], log_variant);
        lv.loss += r.loss * inv;
        lv.dscores[pos] += r.d_pos * inv;
        lv.dscores[j] += r.d_neg * inv;
      }
      return lv;
    }
    case FinetuneLoss::Listwise: {
      std::vector<double> t(scores.size(), 0.0), w(scores.size(), 1.0);
      double n = 0;
      for (auto p : is_positive) n += p ? 1 : 0;
      if (n == 0) throw data_error("listwise group without positives");
      for (std::size_t j = 0; j < scores.size(); ++j) t[j] = is_positive[j] ? 1.0 / n : 0.0;
      return listwise_loss(scores, t, w, log_variant);
    }
  }
  throw data_error("unknown fine-tuning loss");
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct FinetuneEpochLog {
  std::size_t epoch = 0;
  double train_loss = 0;
  double validation_dcg = 0;
  double seconds = 0;
};

struct FinetuneResult {
  Checkpoint checkpoint;
  std::vector<FinetuneEpochLog> log;
  std::size_t best_epoch = 0;
  std::size_t skipped_units = 0;
  std::vector<AnnotatedExample> train;
  std::vector<AnnotatedExample> validation;
};

/// Mean DCG@10 of a checkpoint on an annotated set.
inline double annotated_dcg(const Checkpoint& ck, const Corpus& corpus, const CorpusStats& stats,
                            const std::vector<AnnotatedExample>& examples, std::size_t threads = 1) {
  const auto qrels = to_qrels(examples);
  return evaluate_run(score_pairs(ck, corpus, stats, qrels, threads), qrels, 10, "validation").mean_dcg;
}

/// Splits the annotations 80/20 by query, duplicates head queries in the training part
/// only, trains for cfg.epochs and returns the epoch (0 = input checkpoint) with the
/// best validation DCG@10; ties keep the earlier epoch.
inline FinetuneResult finetune(const Corpus& corpus, const CorpusStats& stats, const Checkpoint& init,
                               const std::vector<AnnotatedExample>& annotations, const FinetuneConfig& cfg,
                               std::size_t threads = 1) {
  cfg.validate();
  FinetuneResult result;
  std::tie(result.train, result.validation) = split_by_query(annotations, cfg.split_ratio, cfg.seed);
  const auto train = duplicate_head_queries(result.train, cfg.head_dup_factor, cfg.seed);
  const auto units = training_units(train);
  std::size_t trainable = 0;
  for (const auto& u : units) {
    if (!u.positives.empty() && !u.negatives.empty()) ++trainable;
    else ++result.skipped_units;
  }
  if (trainable == 0) throw data_error("no trainable query: every training query has a single class");
  if (result.skipped_units) warn(std::to_string(result.skipped_units) + " single-class training queries skipped");

  Checkpoint current = init;
  current.stage = "finetune";
  auto opt = OptimizerState::for_size(current.scorer.parameter_count(), cfg.lr, cfg.weight_decay);
  ScoringContext ctx(corpus, stats, current);
  const bool use_dropout = current.scorer.config().dropout_rate > 0;

  auto validation_dcg = [&](const Checkpoint& ck) {
    return result.validation.empty() ? 0.0 : annotated_dcg(ck, corpus, stats, result.validation, threads);
  };
  result.checkpoint = current;
  double best = validation_dcg(current);
  result.log.push_back({0, 0.0, best, 0.0});

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t epoch_seed = derive_seed(cfg.seed, epoch);
    std::vector<TrainingGroup> groups;
    if (cfg.loss == FinetuneLoss::Listwise) {
      for (const auto& u : units) {
        if (u.positives.empty() || u.negatives.empty()) continue;
        TrainingGroup g{u.query_id, u.negatives, std::vector<std::uint8_t>(u.negatives.size(), 0)};
        g.doc_ids.insert(g.doc_ids.end(), u.positives.begin(), u.positives.end());
        g.is_positive.resize(g.doc_ids.size(), 1);
        groups.push_back(std::move(g));
      }
    } else {
      groups = sample_groups(units, cfg.T, cfg.groups_per_query, epoch_seed);
    }
    Rng order_rng(derive_seed(epoch_seed, "order"));
    std::shuffle(groups.begin(), groups.end(), order_rng);
    Rng dropout_rng(derive_seed(epoch_seed, "dropout"));

    double epoch_loss = 0;
    for (std::size_t start = 0; start < groups.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(groups.size(), start + cfg.batch_size);
      std::vector<ScoringInput> inputs;
      std::map<std::pair<std::string, std::string>, std::size_t> slot;
      std::vector<std::vector<std::size_t>> index;
      for (std::size_t gi = start; gi < end; ++gi) {
        const auto& g = groups[gi];
        std::vector<std::size_t> idx;
        for (const auto& d : g.doc_ids) {
          auto [it, inserted] = slot.emplace(std::make_pair(g.query_id, d), inputs.size());
          if (inserted) inputs.push_back(ctx.input(g.query_id, d));
          idx.push_back(it->second);
        }
        index.push_back(std::move(idx));
      }
      auto fb = forward_backward(
          current.scorer, inputs,
          [&](std::span<const double> s) {
            LossValue total;
            total.dscores.assign(s.size(), 0.0);
            for (std::size_t k = 0; k < index.size(); ++k) {
              const auto x = detail::gather(s, index[k]);
              const auto lv = group_loss(x, groups[start + k].is_positive, cfg.loss, cfg.log_variant);
              total.loss += lv.loss;
              detail::scatter_add(total.dscores, index[k], lv.dscores);
            }
            return total;
          },
          use_dropout ? &dropout_rng : nullptr);
      adamw_step(current.scorer.parameters(), fb.gradients, opt);
      epoch_loss += fb.loss;
    }
    const double mean = groups.empty() ? 0.0 : epoch_loss / static_cast<double>(groups.size());
    if (!std::isfinite(mean)) throw numeric_error("non-finite training loss in epoch " + std::to_string(epoch));
    const double dcg = validation_dcg(current);
    result.log.push_back({epoch, mean, dcg, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
    if (dcg > best) {
      best = dcg;
      result.best_epoch = epoch;
      result.checkpoint = current;
      result.checkpoint.optimizer = opt;
    }
  }
  return result;
}

}  // namespace ultr
