#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "ctrsink/errors.hpp"

namespace ctrsink {

// Binary cross-entropy of one logit, -[y log s(z) + (1-y) log(1-s(z))],
// in the overflow-free form.
inline double bce_loss(double logit, int label) {
  return std::max(logit, 0.0) - logit * double(label) + std::log1p(std::exp(-std::abs(logit)));
}

// Area under the ROC curve via the rank-sum statistic with average ranks
// for ties (ties count one half).
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw InvalidArgument("auc: scores and labels differ in length");
  std::size_t positives = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw InvalidArgument("auc: labels must be 0 or 1");
    positives += std::size_t(y);
  }
  const std::size_t negatives = labels.size() - positives;
  if (positives == 0 || negatives == 0) throw SingleClassError();

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // twice the rank, to keep tied averages integral
  double rank_sum_x2 = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_x2 = double(i + 1 + j);  // (i+1 + j) = 2 * mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]] == 1) rank_sum_x2 += avg_x2;
    i = j;
  }
  const double p = double(positives), n = double(negatives);
  return (rank_sum_x2 / 2.0 - p * (p + 1.0) / 2.0) / (p * n);
}

}  // namespace ctrsink
