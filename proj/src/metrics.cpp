// SPDX-License-Identifier: Apache-2.0
#include "fopa/metrics.hpp"

#include <string>

#include "fopa/error.hpp"

namespace fopa {

void ConfusionCounts::add(int predicted, int label) {
  if (label) {
    (predicted ? tp : fn)++;
  } else {
    (predicted ? fp : tn)++;
  }
}

ConfusionCounts &ConfusionCounts::operator+=(const ConfusionCounts &o) {
  tp += o.tp;
  fp += o.fp;
  tn += o.tn;
  fn += o.fn;
  return *this;
}

ClassificationMetrics f1_and_bacc(const ConfusionCounts &c) {
  if (c.total() == 0) throw DataError("no annotated pixels to evaluate");
  const std::int64_t pos = c.tp + c.fn;
  const std::int64_t neg = c.tn + c.fp;
  if (pos == 0 || neg == 0) {
    throw DataError("balanced accuracy is undefined: evaluation set has only " +
                    std::string(pos == 0 ? "negative" : "positive") + " labels");
  }
  ClassificationMetrics m;
  const double tpr = static_cast<double>(c.tp) / pos;
  const double tnr = static_cast<double>(c.tn) / neg;
  m.bacc = (tpr + tnr) / 2.0;
  // 2PR / (P + R) written over counts; zero when nothing is predicted positive.
  const std::int64_t denom = 2 * c.tp + c.fp + c.fn;
  m.f1 = c.tp == 0 ? 0.0 : 2.0 * c.tp / denom;
  return m;
}

ConfusionCounts confusion(std::span<const double> scores, std::span<const int> labels,
                          double threshold) {
  if (scores.size() != labels.size()) {
    throw DimensionError("got " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(labels.size()) + " labels");
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < scores.size(); ++i) c.add(scores[i] >= threshold ? 1 : 0, labels[i]);
  return c;
}

}  // namespace fopa
