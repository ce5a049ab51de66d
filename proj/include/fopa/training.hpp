// SPDX-License-Identifier: Apache-2.0
//
// Two-stage training: the composite classifier first, then the dense model
// with a transferred background encoder, sparse BCE and feature mimicking.

#ifndef FOPA_TRAINING_HPP
#define FOPA_TRAINING_HPP

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fopa/metrics.hpp"
#include "fopa/models.hpp"
#include "fopa/scene.hpp"

namespace fopa {

struct TrainConfig {
  int epochs = 20;
  double lr = 0.0005;
  int lr_halving_period = 2;
  double lambda_mimic = 16.0;
  int batch_size = 4;  // pairs per step
  std::uint64_t seed = 1;
  bool transfer_prior = true;
  bool freeze_encoder = true;
  bool mimic_enabled = true;
  ModelConfig model;

  void validate() const;
  bool uses_mimic() const { return mimic_enabled && lambda_mimic != 0.0; }
};

/// Step schedule over 0-based epochs: lr / 2^(epoch / period).
double learning_rate(const TrainConfig &config, int epoch);

/// -sum log p_c over the annotated scores; ContractError when empty.
Tensor bce_loss(const Tensor &scores, std::span<const int> labels);
/// Sum of squared distances between rows; targets carry no gradient.
Tensor mimic_loss(const Tensor &projected, const Tensor &targets);
Tensor total_loss(const Tensor &bce, const Tensor &mimic, double lambda);

/// Adaptive-moment optimizer over a fixed parameter list.
class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.999,
                double epsilon = 1e-8);
  void step(double lr);
  void zero_grad();
  long long steps() const { return steps_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, epsilon_;
  long long steps_ = 0;
};

struct EpochStats {
  int epoch = 0;  // 1-based in reports
  double lr = 0.0;
  double bce = 0.0;    // per annotated pixel
  double mimic = 0.0;  // per annotated pixel
  double total = 0.0;
  double train_bacc = 0.0;
  std::uint32_t bg_encoder_checksum = 0;  // dense model only
};

using EpochCallback = std::function<void(const EpochStats &)>;

/// Header and row of the tab-separated training log.
std::string epoch_log_header();
std::string epoch_log_line(const EpochStats &stats);

SopaModel train_sopa(const Corpus &corpus, const TrainConfig &config,
                     const EpochCallback &on_epoch = {});
FopaModel train_fopa(const Corpus &corpus, const SopaModel &sopa, const TrainConfig &config,
                     const EpochCallback &on_epoch = {});

/// Mean per-composite BCE of the classifier over the annotated placements of
/// a split.
double sopa_split_loss(const SopaModel &model, const Corpus &corpus, const std::string &split);

struct MimicWeightSearch {
  std::vector<double> candidates;
  std::vector<double> validation_bacc;  // one per candidate
  double chosen = 0.0;
  std::size_t train_pairs = 0;
  std::size_t validation_pairs = 0;
};

/// Picks the mimic weight by held-out balanced accuracy. A seeded share of
/// the training pairs becomes the validation set; the composite classifier is
/// retrained on the rest so no validation label reaches the targets. Each
/// candidate trains the dense model for `epochs`; ties keep the earlier one.
MimicWeightSearch cross_validate_mimic_weight(const Corpus &corpus, const TrainConfig &config,
                                              std::span<const double> candidates, int epochs,
                                              double validation_share = 0.2,
                                              const EpochCallback &on_epoch = {});

/// Composite-classifier feature for every annotated pixel of a pair, in
/// annotation order: |S| x mimic_dim.
Tensor sopa_targets(const SopaModel &sopa, const Corpus &corpus, const AnnotatedPair &pair);

}  // namespace fopa

#endif  // FOPA_TRAINING_HPP
