// SPDX-License-Identifier: Apache-2.0
#include "fopa/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

#include "fopa/error.hpp"
#include "fopa/eval.hpp"

namespace fopa {

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (lr_halving_period < 1) throw ConfigError("lr halving period must be >= 1 epoch");
  if (!(lambda_mimic >= 0.0)) throw ConfigError("mimic weight must be >= 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  model.validate();
}

double learning_rate(const TrainConfig &config, int epoch) {
  return std::ldexp(config.lr, -(epoch / config.lr_halving_period));
}

Tensor bce_loss(const Tensor &scores, std::span<const int> labels) {
  if (labels.empty()) throw ContractError("BCE over an empty annotation set");
  return bce_sum(scores, labels);
}

Tensor mimic_loss(const Tensor &projected, const Tensor &targets) {
  if (projected.shape() != targets.shape()) {
    throw DimensionError("mimic pairs differ in shape: " + shape_str(projected.shape()) +
                         " vs " + shape_str(targets.shape()));
  }
  const Tensor diff = sub(projected, targets.detach());
  return sum(mul(diff, diff));
}

Tensor total_loss(const Tensor &bce, const Tensor &mimic, double lambda) {
  return add(bce, scalar_mul(mimic, lambda));
}

Adam::Adam(std::vector<Tensor> params, double beta1, double beta2, double epsilon)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
  for (const Tensor &p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step(double lr) {
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor &p = params_[i];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto &m = m_[i];
    auto &v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + epsilon_);
    }
  }
}

void Adam::zero_grad() { zero_grads(params_); }

std::string epoch_log_header() { return "epoch\tlr\tL_bce\tL_mimic\tL_total\ttrain_bAcc"; }

std::string epoch_log_line(const EpochStats &s) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d\t%.6g\t%.6f\t%.6f\t%.6f\t%.4f", s.epoch, s.lr, s.bce, s.mimic,
                s.total, s.train_bacc);
  return buf;
}

namespace {

void require_grid(const Corpus &corpus, const ModelConfig &model) {
  if (corpus.config.image_size != model.image_size) {
    throw ConfigError("corpus images are " + std::to_string(corpus.config.image_size) +
                      " pixels but the model grid is " + std::to_string(model.image_size));
  }
}

void require_both_classes(const std::vector<AnnotatedPair> &pairs) {
  bool pos = false, neg = false;
  for (const auto &p : pairs) {
    for (const auto &a : p.annotations) (a.label ? pos : neg) = true;
  }
  if (!pos || !neg) {
    throw TrainingError(std::string("training split has no ") +
                        (pos ? "negative" : "positive") + " annotations");
  }
}

void require_finite(double loss, int epoch) {
  if (!std::isfinite(loss)) {
    throw NumericError("non-finite loss in epoch " + std::to_string(epoch + 1));
  }
}

std::vector<Tensor> tensors_of(const std::vector<NamedTensor> &named) {
  std::vector<Tensor> out;
  for (const auto &[name, t] : named) out.push_back(t);
  return out;
}

double bacc_or_zero(const ConfusionCounts &c) {
  if (c.tp + c.fn == 0 || c.tn + c.fp == 0) return 0.0;
  return f1_and_bacc(c).bacc;
}

// Annotated placements of the given pairs rendered as composites.
Tensor composites_of(const Corpus &corpus, std::span<const AnnotatedPair *const> pairs,
                     std::vector<int> *labels) {
  std::vector<Tensor> samples;
  for (const AnnotatedPair *p : pairs) {
    const auto &bg = corpus.background(p->bg_id);
    const auto &fg = corpus.foreground(p->fg_id);
    for (const auto &a : p->annotations) {
      samples.push_back(composite_tensor(compose(bg, fg, {p->scale, a.x, a.y})));
      if (labels) labels->push_back(a.label);
    }
  }
  return stack_samples(samples);
}

}  // namespace

Tensor sopa_targets(const SopaModel &sopa, const Corpus &corpus, const AnnotatedPair &pair) {
  const AnnotatedPair *one[] = {&pair};
  return sopa_forward(sopa, composites_of(corpus, one, nullptr)).penultimate.detach();
}

double sopa_split_loss(const SopaModel &model, const Corpus &corpus, const std::string &split) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto &p : corpus.split(split)) {
    const AnnotatedPair *one[] = {&p};
    std::vector<int> labels;
    const Tensor x = composites_of(corpus, one, &labels);
    total += bce_with_logits_sum(sopa_forward(model, x).logits, labels).item();
    count += labels.size();
  }
  if (count == 0) throw DataError("split '" + split + "' has no annotations");
  return total / count;
}

SopaModel train_sopa(const Corpus &corpus, const TrainConfig &config,
                     const EpochCallback &on_epoch) {
  config.validate();
  require_grid(corpus, config.model);
  require_both_classes(corpus.train);
  SopaModel model = SopaModel::create(config.model, config.seed);
  Adam opt(tensors_of(model.parameters()));
  Rng rng(config.seed * 0x9e3779b97f4a7c15ULL + 1);

  std::vector<std::size_t> order(corpus.train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = learning_rate(config, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    ConfusionCounts counts;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      std::vector<const AnnotatedPair *> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) {
        batch.push_back(&corpus.train[order[i]]);
      }
      std::vector<int> labels;
      const Tensor x = composites_of(corpus, batch, &labels);
      const SopaOutput out = sopa_forward(model, x);
      const Tensor loss = bce_with_logits_sum(out.logits, labels);
      require_finite(loss.item(), epoch);
      for (std::size_t i = 0; i < labels.size(); ++i) {
        counts.add(out.logits.data()[i] >= 0.0 ? 1 : 0, labels[i]);
      }
      loss_sum += loss.item();
      seen += labels.size();
      backward(loss);
      opt.step(lr);
      opt.zero_grad();
    }
    if (on_epoch) {
      EpochStats s;
      s.epoch = epoch + 1;
      s.lr = lr;
      s.bce = seen ? loss_sum / seen : 0.0;
      s.total = s.bce;
      s.train_bacc = bacc_or_zero(counts);
      on_epoch(s);
    }
  }
  return model;
}

FopaModel train_fopa(const Corpus &corpus, const SopaModel &sopa, const TrainConfig &config,
                     const EpochCallback &on_epoch) {
  config.validate();
  require_grid(corpus, config.model);
  require_both_classes(corpus.train);
  const bool mimic = config.uses_mimic();
  if ((config.transfer_prior || mimic) && sopa.config.image_size != config.model.image_size) {
    throw ConfigError("composite classifier grid differs from the dense model grid");
  }
  if (mimic && sopa.config.mimic_dim() != config.model.mimic_dim()) {
    throw ConfigError("composite classifier feature width " +
                      std::to_string(sopa.config.mimic_dim()) + " differs from the mimic width " +
                      std::to_string(config.model.mimic_dim()));
  }

  FopaModel model = FopaModel::create(config.model, config.seed);
  if (config.transfer_prior) {
    transfer_background_prior(sopa, model, config.freeze_encoder);
  } else if (config.freeze_encoder) {
    for (auto &s : model.bg_encoder.stages) {
      for (Tensor *t : {&s.conv, &s.scale, &s.shift, &s.res_conv, &s.res_scale, &s.res_shift}) {
        t->set_requires_grad(false);
      }
    }
    model.bg_encoder_frozen = true;
  }

  const auto &pairs = corpus.train;
  struct PairData {
    FopaBatch input;
    std::vector<int> labels;
    Tensor targets;
  };
  std::vector<PairData> data(pairs.size());
  std::map<int, std::vector<Tensor>> bg_cache;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const AnnotatedPair &p = pairs[i];
    data[i].input = make_fopa_batch(corpus.background(p.bg_id), corpus.foreground(p.fg_id),
                                    p.scale, config.model);
    for (const auto &a : p.annotations) data[i].labels.push_back(a.label);
    if (mimic) data[i].targets = sopa_targets(sopa, corpus, p);
    if (model.bg_encoder_frozen && !bg_cache.count(p.bg_id)) {
      bg_cache[p.bg_id] = background_features(model, data[i].input.bg);
    }
  }

  Adam opt(tensors_of(model.trainable_parameters()));
  Rng rng(config.seed * 0x9e3779b97f4a7c15ULL + 2);
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = learning_rate(config, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double bce_sum_epoch = 0.0, mimic_sum_epoch = 0.0, total_sum_epoch = 0.0;
    std::size_t seen = 0;
    ConfusionCounts counts;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      std::vector<Tensor> fg, bg, onehot, targets;
      std::vector<std::vector<Tensor>> stage_maps(config.model.stages);
      std::vector<PixelIndex> pixels;
      std::vector<int> labels;
      for (std::size_t i = start; i < stop; ++i) {
        const std::size_t idx = order[i];
        const PairData &d = data[idx];
        fg.push_back(d.input.fg);
        bg.push_back(d.input.bg);
        if (d.input.scale_onehot.defined()) onehot.push_back(d.input.scale_onehot);
        if (mimic) targets.push_back(d.targets);
        if (model.bg_encoder_frozen) {
          const auto &maps = bg_cache.at(pairs[idx].bg_id);
          for (std::size_t s = 0; s < maps.size(); ++s) stage_maps[s].push_back(maps[s]);
        }
        for (const auto &a : pairs[idx].annotations) {
          pixels.push_back({i - start, static_cast<std::size_t>(a.y), static_cast<std::size_t>(a.x)});
          labels.push_back(a.label);
        }
      }
      FopaBatch batch;
      batch.fg = stack_samples(fg);
      batch.bg = stack_samples(bg);
      if (!onehot.empty()) batch.scale_onehot = stack_samples(onehot);
      std::vector<Tensor> cached;
      if (model.bg_encoder_frozen) {
        for (const auto &maps : stage_maps) cached.push_back(stack_samples(maps));
      }
      const FopaOutput out =
          fopa_forward(model, batch, model.bg_encoder_frozen ? &cached : nullptr);
      const Tensor logits = gather_pixels(out.logits, pixels);
      const Tensor bce = bce_with_logits_sum(logits, labels);
      Tensor loss = bce;
      double mimic_value = 0.0;
      if (mimic) {
        const Tensor m = mimic_loss(project_pixels(model, out.features, pixels),
                                    stack_samples(targets));
        mimic_value = m.item();
        loss = total_loss(bce, m, config.lambda_mimic);
      }
      require_finite(loss.item(), epoch);
      for (std::size_t i = 0; i < labels.size(); ++i) {
        counts.add(logits.data()[i] >= 0.0 ? 1 : 0, labels[i]);
      }
      bce_sum_epoch += bce.item();
      mimic_sum_epoch += mimic_value;
      total_sum_epoch += loss.item();
      seen += labels.size();
      backward(loss);
      opt.step(lr);
      opt.zero_grad();
    }
    if (on_epoch) {
      EpochStats s;
      s.epoch = epoch + 1;
      s.lr = lr;
      s.bce = seen ? bce_sum_epoch / seen : 0.0;
      s.mimic = seen ? mimic_sum_epoch / seen : 0.0;
      s.total = seen ? total_sum_epoch / seen : 0.0;
      s.train_bacc = bacc_or_zero(counts);
      s.bg_encoder_checksum = encoder_checksum(model.bg_encoder);
      on_epoch(s);
    }
  }
  return model;
}

MimicWeightSearch cross_validate_mimic_weight(const Corpus &corpus, const TrainConfig &config,
                                              std::span<const double> candidates, int epochs,
                                              double validation_share,
                                              const EpochCallback &on_epoch) {
  config.validate();
  if (candidates.empty()) throw ConfigError("no mimic weight candidates");
  if (!(validation_share > 0.0 && validation_share < 1.0)) {
    throw ConfigError("validation share must lie in (0, 1)");
  }
  for (double c : candidates) {
    if (!(c >= 0.0)) throw ConfigError("mimic weight candidates must be >= 0");
  }
  std::vector<std::size_t> order(corpus.train.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(config.seed * 0x9e3779b97f4a7c15ULL + 3);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::lround(validation_share * order.size()));
  if (n_val == 0 || n_val >= order.size()) {
    throw DataError("training split too small to hold out validation pairs");
  }
  Corpus fold;
  fold.config = corpus.config;
  fold.backgrounds = corpus.backgrounds;
  fold.foregrounds = corpus.foregrounds;
  fold.pairs_before_split = corpus.pairs_before_split;
  std::sort(order.begin(), order.begin() + n_val);
  std::sort(order.begin() + n_val, order.end());
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_val ? fold.test : fold.train).push_back(corpus.train[order[i]]);
  }
  require_both_classes(fold.test);

  MimicWeightSearch result;
  result.train_pairs = fold.train.size();
  result.validation_pairs = fold.test.size();
  const SopaModel teacher = train_sopa(fold, config);
  TrainConfig trial = config;
  trial.epochs = epochs;
  trial.mimic_enabled = true;
  double best = -1.0;
  for (double c : candidates) {
    trial.lambda_mimic = c;
    const FopaModel model = train_fopa(fold, teacher, trial, on_epoch);
    const double bacc = evaluate_fopa(model, fold, "test").metrics.bacc;
    result.candidates.push_back(c);
    result.validation_bacc.push_back(bacc);
    if (bacc > best) {
      best = bacc;
      result.chosen = c;
    }
  }
  return result;
}

}  // namespace fopa
