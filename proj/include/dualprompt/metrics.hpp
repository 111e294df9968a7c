#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "dualprompt/tensor.hpp"

namespace dualprompt {

/// P(random positive outscores random negative), ties counted 1/2.
/// Throws std::invalid_argument if either side is empty.
double auc_roc(std::span<const double> pos, std::span<const double> neg);

/// AUC of scores against binary labels; nullopt when one class is absent.
std::optional<double> auc_from_labels(std::span<const double> scores, std::span<const int> labels);

/// Scores a probability matrix (rows = queries, cols = classes). Two
/// classes: AUC of column 1. More: macro one-vs-rest over the classes that
/// occur with at least one negative. nullopt when fewer than two classes occur.
std::optional<double> class_auc(const Matrix& probs, std::span<const std::size_t> targets);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // n-1 denominator; 0 when n == 1
  std::size_t n = 0;
};

/// Throws std::invalid_argument on an empty input.
Summary aggregate(std::span<const double> values);

}  // namespace dualprompt
