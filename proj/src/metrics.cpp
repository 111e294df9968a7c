#include "dualprompt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dualprompt {

double auc_roc(std::span<const double> pos, std::span<const double> neg) {
  if (pos.empty() || neg.empty()) throw std::invalid_argument("auc_roc: empty score list");
  // Midranks over the pooled scores; the positive rank sum gives U.
  struct Item {
    double score;
    bool positive;
  };
  std::vector<Item> all;
  all.reserve(pos.size() + neg.size());
  for (double s : pos) all.push_back({s, true});
  for (double s : neg) all.push_back({s, false});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.score < b.score; });

  double rank_sum = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (all[k].positive) rank_sum += midrank;
    i = j;
  }
  const double np = static_cast<double>(pos.size());
  const double nn = static_cast<double>(neg.size());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

std::optional<double> auc_from_labels(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("auc_from_labels: scores and labels differ in length");
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < scores.size(); ++i) (labels[i] != 0 ? pos : neg).push_back(scores[i]);
  if (pos.empty() || neg.empty()) return std::nullopt;
  return auc_roc(pos, neg);
}

std::optional<double> class_auc(const Matrix& probs, std::span<const std::size_t> targets) {
  if (probs.rows() != targets.size())
    throw std::invalid_argument("class_auc: row count differs from target count");
  const std::size_t c = probs.cols();
  auto one_vs_rest = [&](std::size_t k) {
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < targets.size(); ++i)
      (targets[i] == k ? pos : neg).push_back(probs(i, k));
    if (pos.empty() || neg.empty()) return std::optional<double>{};
    return std::optional<double>{auc_roc(pos, neg)};
  };
  if (c == 2) return one_vs_rest(1);
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t k = 0; k < c; ++k) {
    if (auto a = one_vs_rest(k)) {
      sum += *a;
      ++used;
    }
  }
  if (used < 2) return std::nullopt;
  return sum / static_cast<double>(used);
}

Summary aggregate(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("aggregate: no values");
  // Summing in sorted order makes the result independent of input order.
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  Summary s;
  s.n = sorted.size();
  s.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : sorted) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  return s;
}

}  // namespace dualprompt
