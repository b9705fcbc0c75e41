#pragma once

// Ranking losses over raw scores. Each returns the loss and its gradient with respect
// to the scores; "as written" variants use the probability itself, log variants the
// log-probability. All softmaxes are max-shifted.

#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "ultr/common.hpp"
#include "ultr/neural.hpp"

namespace ultr {

namespace detail {

inline std::vector<double> gather(std::span<const double> scores, const std::vector<std::size_t>& idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(scores[i]);
  return out;
}

inline void scatter_add(std::vector<double>& dst, const std::vector<std::size_t>& idx, const std::vector<double>& src) {
  for (std::size_t j = 0; j < idx.size(); ++j) dst[idx[j]] += src[j];
}

}  // namespace detail

inline std::vector<double> softmax(std::span<const double> x) {
  std::vector<double> p(x.size());
  if (x.empty()) return p;
  const double m = *std::max_element(x.begin(), x.end());
  double z = 0;
  for (std::size_t i = 0; i < x.size(); ++i) z += (p[i] = std::exp(x[i] - m));
  for (auto& v : p) v /= z;
  return p;
}

inline std::vector<double> log_softmax(std::span<const double> x) {
  std::vector<double> out(x.size());
  if (x.empty()) return out;
  const double m = *std::max_element(x.begin(), x.end());
  double z = 0;
  for (double v : x) z += std::exp(v - m);
  const double lz = std::log(z);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - m - lz;
  return out;
}

/// Attention-allocation listwise loss for one list:
///   as written: -sum_j w_j * t_j * softmax(x)_j
///   log:        -sum_j w_j * t_j * log softmax(x)_j
inline LossValue listwise_loss(std::span<const double> scores, std::span<const double> targets,
                               std::span<const double> weights, bool log_variant) {
  if (scores.size() != targets.size() || scores.size() != weights.size())
    throw data_error("listwise_loss: length mismatch");
  LossValue lv;
  lv.dscores.assign(scores.size(), 0.0);
  if (scores.empty()) return lv;
  const auto p = softmax(scores);
  std::vector<double> a(scores.size());
  double sum_a = 0, sum_ap = 0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    a[j] = weights[j] * targets[j];
    sum_a += a[j];
    sum_ap += a[j] * p[j];
  }
  if (log_variant) {
    const auto lp = log_softmax(scores);
    for (std::size_t j = 0; j < scores.size(); ++j) {
      lv.loss -= a[j] * lp[j];
      lv.dscores[j] = -a[j] + p[j] * sum_a;
    }
  } else {
    lv.loss = -sum_ap;
    for (std::size_t j = 0; j < scores.size(); ++j) lv.dscores[j] = -p[j] * (a[j] - sum_ap);
  }
  return lv;
}

struct PairLoss {
  double loss = 0;
  double d_pos = 0;
  double d_neg = 0;
};

/// -exp(x+)/(exp(x+)+exp(x-)), or its negative log.
inline PairLoss pairwise_loss(double x_pos, double x_neg, bool log_variant) {
  const double m = std::max(x_pos, x_neg);
  const double e_pos = std::exp(x_pos - m);
  const double e_neg = std::exp(x_neg - m);
  const double z = e_pos + e_neg;
  const double p = e_pos / z;
  PairLoss r;
  if (log_variant) {
    r.loss = -((x_pos - m) - std::log(z));
    r.d_pos = -(1.0 - p);
    r.d_neg = 1.0 - p;
  } else {
    r.loss = -p;
    r.d_pos = -p * (1.0 - p);
    r.d_neg = p * (1.0 - p);
  }
  return r;
}

/// Softmax over a group holding exactly one positive and T-1 negatives:
/// -exp(x+)/sum_j exp(x_j), or its negative log.
inline LossValue softmax_negatives_loss(std::span<const double> group, std::span<const std::uint8_t> is_positive,
                                        bool log_variant) {
  if (group.size() != is_positive.size()) throw data_error("softmax_negatives_loss: length mismatch");
  std::size_t pos = group.size(), count = 0;
  for (std::size_t j = 0; j < group.size(); ++j)
    if (is_positive[j]) {
      pos = j;
      ++count;
    }
  if (count != 1) throw data_error("softmax_negatives_loss: group needs exactly one positive, found " + std::to_string(count));
  const double m = *std::max_element(group.begin(), group.end());
  double z = 0;
  std::vector<double> e(group.size());
  for (std::size_t j = 0; j < group.size(); ++j) z += (e[j] = std::exp(group[j] - m));
  const double p = e[pos] / z;
  LossValue lv;
  lv.dscores.resize(group.size());
  if (log_variant) {
    lv.loss = -((group[pos] - m) - std::log(z));
    for (std::size_t j = 0; j < group.size(); ++j) lv.dscores[j] = e[j] / z - (j == pos ? 1.0 : 0.0);
  } else {
    lv.loss = -p;
    for (std::size_t j = 0; j < group.size(); ++j) lv.dscores[j] = -p * ((j == pos ? 1.0 : 0.0) - e[j] / z);
  }
  return lv;
}

/// Mean pairwise loss over (winner, loser) index pairs. No pairs gives loss 0 and a warning.
inline LossValue pairwise_pretrain_loss(std::span<const double> scores,
                                        std::span<const std::pair<std::size_t, std::size_t>> pairs,
                                        bool log_variant) {
  LossValue lv;
  lv.dscores.assign(scores.size(), 0.0);
  if (pairs.empty()) {
    warn("pairwise_pretrain_loss: no pairs, loss is 0");
    return lv;
  }
  const double inv = 1.0 / static_cast<double>(pairs.size());
  for (const auto& [w, l] : pairs) {
    if (w >= scores.size() || l >= scores.size()) throw data_error("pairwise_pretrain_loss: pair index out of range");
    const auto r = pairwise_loss(scores[w], scores[l], log_variant);
    lv.loss += r.loss * inv;
    lv.dscores[w] += r.d_pos * inv;
    lv.dscores[l] += r.d_neg * inv;
  }
  return lv;
}

}  // namespace ultr
