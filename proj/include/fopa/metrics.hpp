// SPDX-License-Identifier: Apache-2.0
#ifndef FOPA_METRICS_HPP
#define FOPA_METRICS_HPP

#include <cstdint>
#include <span>

namespace fopa {

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::int64_t total() const { return tp + fp + tn + fn; }
  void add(int predicted, int label);
  ConfusionCounts &operator+=(const ConfusionCounts &o);
};

struct ClassificationMetrics {
  double f1 = 0.0;
  double bacc = 0.0;
};

/// F1 on the positive class and balanced accuracy. Throws DataError when the
/// table is empty or lacks one of the two classes.
ClassificationMetrics f1_and_bacc(const ConfusionCounts &counts);

/// Thresholds scores (>= threshold is positive) against labels.
ConfusionCounts confusion(std::span<const double> scores, std::span<const int> labels,
                          double threshold = 0.5);

}  // namespace fopa

#endif  // FOPA_METRICS_HPP
