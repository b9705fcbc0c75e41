#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ultr/corpus.hpp"
#include "ultr/features.hpp"
#include "ultr/io.hpp"

namespace ultr {

inline constexpr std::size_t kLoggedPositions = 10;

/// One logged impression. Positions are 1-based: clicks[i] belongs to position i + 1.
struct ClickSession {
  std::string query_id;
  std::vector<std::string> ranked_doc_ids;
  std::vector<std::uint8_t> clicks;
  std::size_t impression_count = 1;

  std::size_t num_clicks() const {
    std::size_t n = 0;
    for (auto c : clicks) n += c ? 1 : 0;
    return n;
  }
  /// 1-based position of the last click; 0 when nothing was clicked.
  std::size_t last_click_position() const {
    for (std::size_t i = clicks.size(); i > 0; --i)
      if (clicks[i - 1]) return i;
    return 0;
  }
  void validate() const {
    if (clicks.size() != ranked_doc_ids.size())
      throw data_error("session for '" + query_id + "': clicks and ranking differ in length");
    if (ranked_doc_ids.size() > kLoggedPositions)
      throw data_error("session for '" + query_id + "': more than 10 logged positions");
  }
};

/// Drops click-less sessions and every session of a query whose candidate pool (distinct
/// documents across all of its sessions) holds fewer than `min_candidates` documents.
inline std::vector<ClickSession> filter_sessions(const std::vector<ClickSession>& sessions,
                                                 std::size_t min_candidates = kLoggedPositions) {
  std::map<std::string, std::set<std::string>> pool;
  for (const auto& s : sessions) pool[s.query_id].insert(s.ranked_doc_ids.begin(), s.ranked_doc_ids.end());
  std::vector<ClickSession> out;
  for (const auto& s : sessions) {
    if (s.num_clicks() == 0) continue;
    if (pool[s.query_id].size() < min_candidates) continue;
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Position-based click simulation
// ---------------------------------------------------------------------------

struct ClickSimConfig {
  double eta = 1.0;
  double epsilon_noise = 0.0;
  bool shuffle_top10 = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(eta >= 0)) throw data_error("eta must be >= 0");
    if (!(epsilon_noise >= 0 && epsilon_noise < 1)) throw data_error("epsilon_noise must be in [0,1)");
  }
};

/// Examination probability (1/position)^eta.
inline double examination_probability(std::size_t position, double eta) {
  return std::pow(1.0 / static_cast<double>(position), eta);
}

/// Click probability given examination: epsilon + (1 - epsilon) * (2^grade - 1) / 15.
inline double click_relevance(int grade, double epsilon_noise) {
  return epsilon_noise + (1.0 - epsilon_noise) * (std::exp2(static_cast<double>(grade)) - 1.0) / 15.0;
}

/// Draws one session under the position-based model. Unjudged documents count as grade 0.
inline ClickSession simulate_clicks(const Qrels& true_relevance, const std::string& query_id,
                                    std::vector<std::string> ranking, const ClickSimConfig& cfg) {
  cfg.validate();
  if (ranking.size() > kLoggedPositions) throw data_error("simulate_clicks: ranking longer than 10");
  Rng rng(cfg.seed);
  if (cfg.shuffle_top10) std::shuffle(ranking.begin(), ranking.end(), rng);
  ClickSession s;
  s.query_id = query_id;
  s.clicks.resize(ranking.size(), 0);
  for (std::size_t i = 0; i < ranking.size(); ++i) {
    auto it = true_relevance.find({query_id, ranking[i]});
    const int grade = it == true_relevance.end() ? 0 : it->second;
    const double p = examination_probability(i + 1, cfg.eta) * click_relevance(grade, cfg.epsilon_noise);
    s.clicks[i] = uniform01(rng) < p ? 1 : 0;
  }
  s.ranked_doc_ids = std::move(ranking);
  return s;
}

/// Production ranker used to order a query's candidate pool before display: either a
/// uniform shuffle or a single heuristic feature plus per-session Gaussian noise.
struct LoggingPolicy {
  enum class Kind { Shuffled, FeatureSorted } kind = Kind::FeatureSorted;
  std::string feature = "doc_len";
  double noise_sd = 4.0;
};

/// Simulates `num_sessions` sessions spread round-robin over the queries of `pools`.
/// Session i uses seed derive_seed(cfg.seed, i).
inline std::vector<ClickSession> simulate_log(const Qrels& true_relevance, const FeatureTable& features,
                                              std::size_t num_sessions, const LoggingPolicy& policy,
                                              const ClickSimConfig& cfg) {
  const auto pools = docs_by_query(true_relevance);
  if (pools.empty()) throw data_error("simulate_log: no queries");
  std::vector<const std::pair<const std::string, std::vector<std::string>>*> order;
  for (const auto& entry : pools) order.push_back(&entry);
  const std::size_t fidx = feature_index(policy.feature);

  std::vector<ClickSession> sessions;
  sessions.reserve(num_sessions);
  for (std::size_t i = 0; i < num_sessions; ++i) {
    const auto& [qid, docs] = *order[i % order.size()];
    ClickSimConfig session_cfg = cfg;
    session_cfg.seed = derive_seed(cfg.seed, i);
    Rng rng(derive_seed(session_cfg.seed, "logger"));
    std::vector<std::pair<std::string, double>> scored;
    for (const auto& d : docs) {
      double s = 0.0;
      if (policy.kind == LoggingPolicy::Kind::FeatureSorted) {
        auto it = features.find({qid, d});
        if (it == features.end()) throw data_error("simulate_log: no features for (" + qid + ", " + d + ")");
        s = it->second.as_array()[fidx] + policy.noise_sd * std::normal_distribution<double>()(rng);
      } else {
        s = uniform01(rng);
      }
      scored.emplace_back(d, s);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    std::vector<std::string> ranking;
    for (std::size_t k = 0; k < std::min(kLoggedPositions, scored.size()); ++k) ranking.push_back(scored[k].first);
    sessions.push_back(simulate_clicks(true_relevance, qid, std::move(ranking), session_cfg));
  }
  return sessions;
}

// ---------------------------------------------------------------------------
// Propensity
// ---------------------------------------------------------------------------

using PositionArray = std::array<double, kLoggedPositions>;

/// cr_i = clicks at position i / impressions showing position i.
inline PositionArray estimate_click_ratios(const std::vector<ClickSession>& sessions) {
  PositionArray clicked{};
  PositionArray shown{};
  for (const auto& s : sessions) {
    s.validate();
    const double w = static_cast<double>(s.impression_count);
    for (std::size_t i = 0; i < s.clicks.size(); ++i) {
      shown[i] += w;
      if (s.clicks[i]) clicked[i] += w;
    }
  }
  PositionArray cr{};
  for (std::size_t i = 0; i < kLoggedPositions; ++i) {
    if (shown[i] == 0) throw data_error("position " + std::to_string(i + 1) + " never shown in click log");
    cr[i] = clicked[i] / shown[i];
  }
  if (cr[0] == 0) throw numeric_error("degenerate log: no clicks at position 1");
  return cr;
}

struct PropensityModel {
  enum class Kind { ClickRatio, DLA } kind = Kind::ClickRatio;
  PositionArray weights{1, 1, 1, 1, 1, 1, 1, 1, 1, 1};
  PositionArray position_logits{};
  double alpha = 0.0;

  /// Inverse propensity weight for a 1-based position.
  double weight(std::size_t position) const {
    if (position < 1 || position > kLoggedPositions) throw data_error("position out of range 1..10");
    if (kind == Kind::ClickRatio) return weights[position - 1];
    // softmax(l)_1 / softmax(l)_i
    return std::exp(position_logits[0] - position_logits[position - 1]);
  }
};

/// pw_i = (cr_1 / cr_i)^alpha.
inline PropensityModel click_ratio_propensity(const PositionArray& cr, double alpha) {
  for (std::size_t i = 0; i < kLoggedPositions; ++i)
    if (!(cr[i] > 0)) throw numeric_error("click ratio at position " + std::to_string(i + 1) + " is not positive");
  PropensityModel m;
  m.kind = PropensityModel::Kind::ClickRatio;
  m.alpha = alpha;
  for (std::size_t i = 0; i < kLoggedPositions; ++i) m.weights[i] = std::pow(cr[0] / cr[i], alpha);
  return m;
}

/// The nine inverse propensity weights published for the deployed click-ratio scheme.
inline constexpr std::array<double, 9> kPublishedClickRatioWeights{1.0, 1.19, 1.44, 1.58, 1.89, 1.95, 2.12, 2.26, 2.51};

/// Published weights laid over positions 2..10, with pw_1 = 1.
inline PropensityModel published_click_ratio_propensity() {
  PropensityModel m;
  m.alpha = 0.25;
  m.weights[0] = 1.0;
  for (std::size_t i = 0; i < kPublishedClickRatioWeights.size(); ++i) m.weights[i + 1] = kPublishedClickRatioWeights[i];
  return m;
}

// ---------------------------------------------------------------------------
// Click-log file: query_id \t doc ids (comma-separated) \t 0/1 flags (comma-separated)
// ---------------------------------------------------------------------------

inline void write_click_log(const std::string& path, const std::vector<ClickSession>& sessions) {
  auto os = io::open_artifact(path, "clicklog");
  for (const auto& s : sessions) {
    s.validate();
    os << s.query_id << '\t' << io::join(s.ranked_doc_ids, ',') << '\t';
    for (std::size_t i = 0; i < s.clicks.size(); ++i) os << (i ? "," : "") << (s.clicks[i] ? '1' : '0');
    os << '\n';
  }
}

inline std::vector<ClickSession> read_click_log(const std::string& path) {
  std::vector<ClickSession> sessions;
  for (auto& row : io::read_rows(path, "clicklog", 3)) {
    ClickSession s;
    s.query_id = row.fields[0];
    s.ranked_doc_ids = io::split(row.fields[1], ',');
    for (const auto& f : io::split(row.fields[2], ',')) {
      if (f != "0" && f != "1") throw data_error(path + ":" + std::to_string(row.line_number) + ": click flag must be 0 or 1");
      s.clicks.push_back(f == "1" ? 1 : 0);
    }
    try {
      s.validate();
    } catch (const data_error& e) {
      throw data_error(path + ":" + std::to_string(row.line_number) + ": " + e.what());
    }
    sessions.push_back(std::move(s));
  }
  return sessions;
}

}  // namespace ultr
