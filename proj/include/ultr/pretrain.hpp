#pragma once

// Stage one: training the scorer on click logs.
//
// Each logged session becomes a list whose soft targets mix the clicks with a
// heuristic feature: y = delta * click + minmax(feature), target = softmax(y / tau).
// Lists are augmented with random negatives (documents of other queries in the
// batch, y = 0) and optionally have the slots after the last click replaced by
// random negatives. The loss is the listwise attention loss (as written or in log
// form) or a pairwise loss over priority pairs, optionally inverse-propensity
// weighted by click-ratio weights or by a jointly learned (DLA) propensity model.

#include <chrono>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ultr/checkpoint.hpp"
#include "ultr/clicklog.hpp"
#include "ultr/losses.hpp"
#include "ultr/ranker.hpp"

namespace ultr {

enum class IpwKind { None, ClickRatio, DLA };
enum class PretrainLoss { ListwiseAsWritten, ListwiseLog, PairwisePriority };

struct PretrainConfig {
  double delta = 2.0;
  double tau = 0.1;
  std::string refinement_feature = "bm25";
  std::size_t num_random_negatives = 2;
  bool replace_post_click = false;
  IpwKind ipw = IpwKind::None;
  /// Exponent of the click-ratio weights.
  double alpha = 0.25;
  PretrainLoss loss = PretrainLoss::ListwiseLog;
  std::size_t epochs = 1;
  /// Queries per optimizer step; every session of a query in the step contributes a list.
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 0.01;
  /// Learning rate of the DLA position logits.
  double propensity_lr = 0.05;
  /// Upper bound on DLA inverse weights.
  double dla_max_weight = 10.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(tau > 0)) throw data_error("tau must be > 0");
    if (batch_size == 0) throw data_error("batch_size must be >= 1");
    if (!(lr > 0)) throw data_error("lr must be > 0");
    if (!(dla_max_weight >= 1)) throw data_error("dla_max_weight must be >= 1");
    feature_index(refinement_feature);
  }
};

struct RefinedEntry {
  std::string doc_id;
  /// 1-based logged slot; 0 for appended random negatives.
  std::size_t position = 0;
  std::uint8_t click = 0;
  double feature = 0;
  double raw_label = 0;
  double target = 0;
  bool is_random_negative = false;
};

struct RefinedList {
  std::string query_id;
  std::vector<RefinedEntry> entries;
};

/// List view of a session; `features[i]` is the heuristic value of the document at slot i + 1.
inline RefinedList make_refined_list(const ClickSession& s, std::span<const double> features) {
  s.validate();
  if (features.size() != s.ranked_doc_ids.size()) throw data_error("make_refined_list: feature count mismatch");
  RefinedList list;
  list.query_id = s.query_id;
  for (std::size_t i = 0; i < s.ranked_doc_ids.size(); ++i) {
    RefinedEntry e;
    e.doc_id = s.ranked_doc_ids[i];
    e.position = i + 1;
    e.click = s.clicks[i];
    e.feature = features[i];
    list.entries.push_back(std::move(e));
  }
  return list;
}

/// Fills raw_label and target. Shown entries get delta * click + minmax(feature) with the
/// min-max taken over shown entries (0.5 when constant); random negatives get 0. Targets
/// are softmax(raw / tau) over the whole list.
inline void refine_labels(RefinedList& list, double delta, double tau) {
  if (!(tau > 0)) throw data_error("refine_labels: tau must be > 0");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& e : list.entries)
    if (!e.is_random_negative) {
      lo = std::min(lo, e.feature);
      hi = std::max(hi, e.feature);
    }
  std::vector<double> scaled;
  for (auto& e : list.entries) {
    if (e.is_random_negative) {
      e.raw_label = 0.0;
    } else {
      const double norm = hi > lo ? (e.feature - lo) / (hi - lo) : 0.5;
      e.raw_label = delta * e.click + norm;
    }
    scaled.push_back(e.raw_label / tau);
  }
  const auto t = softmax(scaled);
  for (std::size_t i = 0; i < t.size(); ++i) list.entries[i].target = t[i];
}

inline std::vector<double> refine_labels(std::span<const std::uint8_t> clicks, std::span<const double> features,
                                         double delta, double tau) {
  if (clicks.size() != features.size() || clicks.empty()) throw data_error("refine_labels: need equal, non-empty lists");
  RefinedList list;
  for (std::size_t i = 0; i < clicks.size(); ++i) list.entries.push_back({"", i + 1, clicks[i], features[i]});
  refine_labels(list, delta, tau);
  std::vector<double> out;
  for (const auto& e : list.entries) out.push_back(e.target);
  return out;
}

/// Appends k documents drawn from `pool` without replacement (with replacement, and a
/// warning, when the pool is smaller than k) as unclicked random negatives.
inline RefinedList inject_random_negatives(RefinedList list, std::span<const std::string> pool, std::size_t k,
                                           std::uint64_t seed) {
  if (k == 0) return list;
  if (pool.empty()) throw data_error("inject_random_negatives: empty negative pool");
  Rng rng(seed);
  std::vector<std::size_t> picks;
  if (pool.size() >= k) {
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
    picks.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  } else {
    warn("negative pool of " + std::to_string(pool.size()) + " is smaller than " + std::to_string(k) +
         "; sampling with replacement");
    for (std::size_t i = 0; i < k; ++i) picks.push_back(uniform_index(rng, pool.size()));
  }
  for (auto p : picks) {
    RefinedEntry e;
    e.doc_id = pool[p];
    e.is_random_negative = true;
    list.entries.push_back(std::move(e));
  }
  return list;
}

/// Replaces every shown document after the last click with a random negative that
/// keeps the slot's position. Lists without clicks are returned unchanged.
inline RefinedList replace_post_click(RefinedList list, std::span<const std::string> pool, std::uint64_t seed) {
  std::size_t last = 0;
  for (const auto& e : list.entries)
    if (!e.is_random_negative && e.click) last = std::max(last, e.position);
  if (last == 0) return list;
  Rng rng(seed);
  for (auto& e : list.entries) {
    if (e.is_random_negative || e.position <= last) continue;
    if (pool.empty()) throw data_error("replace_post_click: empty negative pool");
    e.doc_id = pool[uniform_index(rng, pool.size())];
    e.click = 0;
    e.feature = 0;
    e.is_random_negative = true;
  }
  return list;
}

/// Winner/loser index pairs. Rules in priority order: clicked beats unclicked; a shown
/// document beats a random negative; between shown documents with equal click status
/// the larger feature wins (margin 1e-9). Two random negatives are never paired.
inline std::vector<std::pair<std::size_t, std::size_t>> build_priority_pairs(const RefinedList& list) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  const auto& e = list.entries;
  for (std::size_t a = 0; a < e.size(); ++a) {
    for (std::size_t b = a + 1; b < e.size(); ++b) {
      if (e[a].click != e[b].click) {
        pairs.emplace_back(e[a].click ? a : b, e[a].click ? b : a);
      } else if (e[a].is_random_negative != e[b].is_random_negative) {
        pairs.emplace_back(e[a].is_random_negative ? b : a, e[a].is_random_negative ? a : b);
      } else if (!e[a].is_random_negative) {
        if (e[a].feature > e[b].feature + 1e-9) pairs.emplace_back(a, b);
        else if (e[b].feature > e[a].feature + 1e-9) pairs.emplace_back(b, a);
      }
    }
  }
  return pairs;
}

/// Per-entry inverse propensity weights: the model's weight for shown slots, 1 for
/// random negatives (including replaced slots).
inline std::vector<double> position_weights(const RefinedList& list, const PropensityModel* model,
                                            double max_weight = std::numeric_limits<double>::infinity()) {
  std::vector<double> w;
  for (const auto& e : list.entries)
    w.push_back(model && !e.is_random_negative && e.position > 0 ? std::min(model->weight(e.position), max_weight) : 1.0);
  return w;
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// Lists of one optimizer step. Entries refer to deduplicated scorer inputs.
struct TrainingBatch {
  std::vector<ScoringInput> inputs;
  std::vector<RefinedList> lists;
  std::vector<std::vector<std::size_t>> input_index;
};

/// Loss of a batch: the per-list losses summed over lists.
inline LossValue pretrain_batch_loss(const TrainingBatch& batch, std::span<const double> scores, PretrainLoss loss,
                                     const PropensityModel* propensity, double max_weight) {
  LossValue total;
  total.dscores.assign(scores.size(), 0.0);
  for (std::size_t li = 0; li < batch.lists.size(); ++li) {
    const auto& list = batch.lists[li];
    const auto& idx = batch.input_index[li];
    const auto x = detail::gather(scores, idx);
    LossValue lv;
    if (loss == PretrainLoss::PairwisePriority) {
      const auto pairs = build_priority_pairs(list);
      if (pairs.empty()) continue;
      lv = pairwise_pretrain_loss(x, pairs, true);
    } else {
      std::vector<double> t;
      for (const auto& e : list.entries) t.push_back(e.target);
      lv = listwise_loss(x, t, position_weights(list, propensity, max_weight), loss == PretrainLoss::ListwiseLog);
    }
    total.loss += lv.loss;
    detail::scatter_add(total.dscores, idx, lv.dscores);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Dual learning of propensity and relevance
// ---------------------------------------------------------------------------

struct PropensityLoss {
  double loss = 0;
  PositionArray dlogits{};
};

/// Propensity side of DLA: clicks explained by softmax(position_logits) over the shown
/// slots of each list, each click weighted by the inverse normalized ranker relevance
/// softmax(x)_first / softmax(x)_j (capped at max_weight), where "first" is the
/// top-most shown slot. Ranker scores are treated as constants.
inline PropensityLoss dla_propensity_loss(const PositionArray& logits, const TrainingBatch& batch,
                                          std::span<const double> scores, double max_weight) {
  PropensityLoss out;
  for (std::size_t li = 0; li < batch.lists.size(); ++li) {
    const auto& list = batch.lists[li];
    std::vector<std::size_t> shown;
    for (std::size_t j = 0; j < list.entries.size(); ++j)
      if (list.entries[j].position > 0) shown.push_back(j);
    if (shown.empty()) continue;
    std::vector<double> x, l;
    for (auto j : shown) {
      x.push_back(scores[batch.input_index[li][j]]);
      l.push_back(logits[list.entries[j].position - 1]);
    }
    const auto rel = softmax(x);
    std::size_t first = 0;
    for (std::size_t k = 1; k < shown.size(); ++k)
      if (list.entries[shown[k]].position < list.entries[shown[first]].position) first = k;
    std::vector<double> a(shown.size());
    double sum_a = 0;
    for (std::size_t k = 0; k < shown.size(); ++k) {
      const auto& e = list.entries[shown[k]];
      const double w = e.is_random_negative ? 1.0 : std::min(rel[first] / rel[k], max_weight);
      a[k] = e.click ? w : 0.0;
      sum_a += a[k];
    }
    const auto q = softmax(l);
    const auto lq = log_softmax(l);
    for (std::size_t k = 0; k < shown.size(); ++k) {
      out.loss -= a[k] * lq[k];
      out.dlogits[list.entries[shown[k]].position - 1] += -a[k] + q[k] * sum_a;
    }
  }
  return out;
}

struct DlaState {
  PropensityModel model;
  OptimizerState optimizer;

  static DlaState initial(double lr) {
    DlaState s;
    s.model.kind = PropensityModel::Kind::DLA;
    s.model.position_logits.fill(0.0);
    s.optimizer = OptimizerState::for_size(kLoggedPositions, lr, 0.0);
    return s;
  }
};

struct DlaStepResult {
  double ranker_loss = 0;
  double propensity_loss = 0;
};

/// One joint step: the ranker minimizes the log listwise loss weighted by the current
/// inverse propensities, the propensity model minimizes its click loss weighted by the
/// current inverse relevances. Both weightings use pre-step values; each side takes one
/// AdamW step.
inline DlaStepResult dla_step(WideDeepScorer& scorer, OptimizerState& ranker_opt, DlaState& dla,
                              const TrainingBatch& batch, double max_weight) {
  const PropensityModel snapshot = dla.model;
  auto fb = forward_backward(scorer, batch.inputs, [&](std::span<const double> s) {
    return pretrain_batch_loss(batch, s, PretrainLoss::ListwiseLog, &snapshot, max_weight);
  });
  const auto pl = dla_propensity_loss(snapshot.position_logits, batch, fb.scores, max_weight);
  if (!std::isfinite(pl.loss)) throw numeric_error("non-finite propensity loss");
  adamw_step(scorer.parameters(), fb.gradients, ranker_opt);
  adamw_step(dla.model.position_logits, pl.dlogits, dla.optimizer);
  return {fb.loss, pl.loss};
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0;
  double seconds = 0;
};

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
};

/// Groups sessions by query and assembles batches of `batch_size` queries.
class PretrainBatcher {
 public:
  PretrainBatcher(const Corpus& corpus, const CorpusStats& stats, const Checkpoint& ck,
                  const std::vector<ClickSession>& sessions, const PretrainConfig& cfg)
      : ctx_(corpus, stats, ck), cfg_(cfg), feature_idx_(feature_index(cfg.refinement_feature)) {
    for (std::size_t i = 0; i < sessions.size(); ++i) by_query_[sessions[i].query_id].push_back(&sessions[i]);
    for (const auto& [qid, unused] : by_query_) queries_.push_back(qid);
  }

  const std::vector<std::string>& queries() const { return queries_; }

  /// Batch for query indices `members` (into queries()). Random negatives for a query
  /// come from the shown documents of the other queries in the batch; a per-query
  /// negative set is drawn once per epoch with seed (seed, epoch, query index), so all
  /// sessions of a query share it.
  TrainingBatch assemble(const std::vector<std::size_t>& members, std::size_t epoch) const {
    TrainingBatch batch;
    std::map<std::pair<std::string, std::string>, std::size_t> slot;
    auto input_for = [&](const std::string& qid, const std::string& did) {
      auto [it, inserted] = slot.emplace(std::make_pair(qid, did), batch.inputs.size());
      if (inserted) batch.inputs.push_back(ctx_.input(qid, did));
      return it->second;
    };

    for (auto qi : members) {
      const auto& qid = queries_[qi];
      std::set<std::string> own;
      for (const auto* s : by_query_.at(qid)) own.insert(s->ranked_doc_ids.begin(), s->ranked_doc_ids.end());
      std::set<std::string> others;
      for (auto oj : members) {
        if (oj == qi) continue;
        for (const auto* s : by_query_.at(queries_[oj]))
          for (const auto& d : s->ranked_doc_ids)
            if (!own.count(d)) others.insert(d);
      }
      const std::vector<std::string> other_docs(others.begin(), others.end());
      const std::uint64_t qseed = derive_seed(derive_seed(cfg_.seed, epoch), qi);
      std::vector<std::string> negatives;
      const std::size_t want = std::max(cfg_.num_random_negatives, cfg_.replace_post_click ? kLoggedPositions : 0);
      if (want > 0 && !other_docs.empty()) {
        Rng rng(qseed);
        std::vector<std::size_t> idx(other_docs.size());
        std::iota(idx.begin(), idx.end(), 0);
        const std::size_t take = std::min(want, idx.size());
        for (std::size_t i = 0; i < take; ++i) std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
        for (std::size_t i = 0; i < take; ++i) negatives.push_back(other_docs[idx[i]]);
      }

      const auto& sessions = by_query_.at(qid);
      for (std::size_t si = 0; si < sessions.size(); ++si) {
        const auto& s = *sessions[si];
        std::vector<double> f;
        for (const auto& d : s.ranked_doc_ids) f.push_back(batch.inputs[input_for(qid, d)].features[feature_idx_]);
        auto list = make_refined_list(s, f);
        if (!negatives.empty()) {
          if (cfg_.replace_post_click) list = replace_post_click(std::move(list), negatives, derive_seed(qseed, si + 1));
          list = inject_random_negatives(std::move(list), negatives, cfg_.num_random_negatives, qseed);
        }
        refine_labels(list, cfg_.delta, cfg_.tau);
        std::vector<std::size_t> idx;
        for (const auto& e : list.entries) idx.push_back(input_for(qid, e.doc_id));
        batch.lists.push_back(std::move(list));
        batch.input_index.push_back(std::move(idx));
      }
    }
    return batch;
  }

 private:
  ScoringContext ctx_;
  const PretrainConfig& cfg_;
  std::size_t feature_idx_;
  std::map<std::string, std::vector<const ClickSession*>> by_query_;
  std::vector<std::string> queries_;
};

/// Trains the scorer of `init` on the click log. Sessions are filtered first (no
/// clicks, fewer than 10 candidates); click ratios for click-ratio IPW are estimated on
/// the unfiltered log.
inline PretrainResult pretrain(const Corpus& corpus, const CorpusStats& stats, const std::vector<ClickSession>& log,
                               const PretrainConfig& cfg, Checkpoint init) {
  cfg.validate();
  const auto sessions = filter_sessions(log);
  if (sessions.empty()) throw data_error("empty click log after filtering");

  PretrainResult result;
  result.checkpoint = std::move(init);
  auto& ck = result.checkpoint;
  ck.stage = "pretrain";
  auto& scorer = ck.scorer;
  auto opt = OptimizerState::for_size(scorer.parameter_count(), cfg.lr, cfg.weight_decay);

  std::optional<PropensityModel> click_ratio;
  if (cfg.ipw == IpwKind::ClickRatio) click_ratio = click_ratio_propensity(estimate_click_ratios(log), cfg.alpha);
  auto dla = DlaState::initial(cfg.propensity_lr);

  PretrainBatcher batcher(corpus, stats, ck, sessions, cfg);
  const std::size_t nq = batcher.queries().size();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(nq);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, "epoch-order-" + std::to_string(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    std::size_t lists = 0;
    for (std::size_t start = 0; start < nq; start += cfg.batch_size) {
      std::vector<std::size_t> members(order.begin() + static_cast<std::ptrdiff_t>(start),
                                       order.begin() + static_cast<std::ptrdiff_t>(std::min(nq, start + cfg.batch_size)));
      const auto batch = batcher.assemble(members, epoch);
      lists += batch.lists.size();
      if (cfg.ipw == IpwKind::DLA) {
        epoch_loss += dla_step(scorer, opt, dla, batch, cfg.dla_max_weight).ranker_loss;
        continue;
      }
      const PropensityModel* pm = click_ratio ? &*click_ratio : nullptr;
      auto fb = forward_backward(scorer, batch.inputs, [&](std::span<const double> s) {
        return pretrain_batch_loss(batch, s, cfg.loss, pm, std::numeric_limits<double>::infinity());
      });
      adamw_step(scorer.parameters(), fb.gradients, opt);
      epoch_loss += fb.loss;
    }
    const double mean = lists ? epoch_loss / static_cast<double>(lists) : 0.0;
    if (!std::isfinite(mean)) throw numeric_error("non-finite training loss in epoch " + std::to_string(epoch));
    result.log.push_back({epoch, mean, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
  }
  ck.optimizer = std::move(opt);
  if (cfg.ipw == IpwKind::ClickRatio) ck.propensity = click_ratio;
  if (cfg.ipw == IpwKind::DLA) ck.propensity = dla.model;
  return result;
}

}  // namespace ultr
