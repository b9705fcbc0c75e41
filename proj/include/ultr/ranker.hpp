#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ultr/checkpoint.hpp"
#include "ultr/corpus.hpp"
#include "ultr/eval.hpp"
#include "ultr/features.hpp"
#include "ultr/neural.hpp"

namespace ultr {

/// Everything needed to turn (query_id, doc_id) into a scorer input.
struct ScoringContext {
  const Corpus& corpus;
  const CorpusStats& stats;
  const Vocabulary& vocab;
  FeatureParams feature_params;
  std::size_t max_seq_len;

  ScoringContext(const Corpus& c, const CorpusStats& s, const Checkpoint& ck)
      : corpus(c), stats(s), vocab(ck.vocab), feature_params(ck.feature_params),
        max_seq_len(ck.scorer.config().max_seq_len) {}

  ScoringInput input(const std::string& query_id, const std::string& doc_id) const {
    const auto& q = corpus.query(query_id);
    const auto& d = corpus.document(doc_id);
    ScoringInput in;
    in.ids = encode_pair(vocab, q.tokens, encoder_doc_tokens(d), max_seq_len);
    in.features = extract_features(q, d, stats, feature_params).as_array();
    return in;
  }
};

/// Scores every key of `pairs` with the checkpoint's scorer.
template <class KeyedTable>
ScoreTable score_pairs(const Checkpoint& ck, const Corpus& corpus, const CorpusStats& stats, const KeyedTable& pairs,
                       std::size_t threads = 1) {
  ScoringContext ctx(corpus, stats, ck);
  std::vector<std::pair<std::string, std::string>> keys;
  for (const auto& [key, unused] : pairs) keys.push_back(key);
  std::vector<ScoringInput> inputs(keys.size());
  parallel_for(keys.size(), threads, [&](std::size_t i) { inputs[i] = ctx.input(keys[i].first, keys[i].second); });
  const auto scores = score_batch(ck.scorer, inputs, threads);
  ScoreTable out;
  for (std::size_t i = 0; i < keys.size(); ++i) out.emplace(keys[i], scores[i]);
  return out;
}

/// Scores of one heuristic feature column, usable as a run.
inline ScoreTable feature_scores(const FeatureTable& features, const std::string& feature) {
  const auto idx = feature_index(feature);
  ScoreTable out;
  for (const auto& [key, fv] : features) out.emplace(key, fv.as_array()[idx]);
  return out;
}

}  // namespace ultr
