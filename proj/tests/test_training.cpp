// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "fopa/error.hpp"
#include "fopa/ops.hpp"
#include "fopa/training.hpp"
#include "support/oracles.hpp"

using namespace fopa;

namespace {

const Corpus &small_corpus() {
  static const Corpus corpus = [] {
    CorpusConfig c;
    c.n_backgrounds = 4;
    c.n_foregrounds = 4;
    c.image_size = 32;
    return generate_corpus(c);
  }();
  return corpus;
}

TrainConfig small_config() {
  TrainConfig t;
  t.epochs = 2;
  t.batch_size = 4;
  t.model.image_size = 32;
  t.model.stages = 2;
  t.model.base_channels = 4;
  t.model.feature_dim = 4;
  return t;
}

const SopaModel &small_sopa() {
  static const SopaModel model = train_sopa(small_corpus(), small_config());
  return model;
}

std::uint32_t params_checksum(const FopaModel &m) { return checksum(m.parameters()); }

}  // namespace

TEST_CASE("learning-rate schedule halves every period") {
  TrainConfig c;
  CHECK(learning_rate(c, 0) == 0.0005);
  CHECK(learning_rate(c, 1) == 0.0005);
  CHECK(learning_rate(c, 2) == 0.00025);
  CHECK(learning_rate(c, 5) == 0.000125);
  c.lr_halving_period = 3;
  CHECK(learning_rate(c, 5) == 0.00025);
}

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.lambda_mimic = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("binary cross-entropy") {
  SUBCASE("single pixel at 0.5") {
    const std::vector<int> pos{1}, neg{0};
    CHECK(std::abs(bce_loss(Tensor::full({1}, 0.5), pos).item() - 0.693147) <= 1e-6);
    CHECK(std::abs(bce_loss(Tensor::full({1}, 0.5), pos).item() - std::log(2.0)) <= 1e-9);
    CHECK(std::abs(bce_loss(Tensor::full({1}, 0.5), neg).item() - std::log(2.0)) <= 1e-9);
  }
  SUBCASE("sum over pixels") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    std::vector<double> s(40);
    std::vector<int> labels(40);
    double expected = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = u(rng);
      labels[i] = static_cast<int>(rng() % 2);
      expected -= labels[i] ? std::log(s[i]) : std::log(1.0 - s[i]);
    }
    const double got = bce_loss(Tensor::from_data({40}, s), labels).item();
    CHECK(std::abs(got - expected) <= 1e-12 * std::abs(expected));
  }
  SUBCASE("empty annotation set") {
    CHECK_THROWS_AS(bce_loss(Tensor::zeros({0}), std::vector<int>{}), ContractError);
  }
}

TEST_CASE("mimic loss") {
  std::mt19937_64 rng(4);
  const std::vector<double> a = oracle::uniform(rng, 3 * 8), b = oracle::uniform(rng, 3 * 8);
  SUBCASE("equal features give zero") {
    CHECK(mimic_loss(Tensor::from_data({3, 8}, a), Tensor::from_data({3, 8}, a)).item() == 0.0);
  }
  SUBCASE("sum of squared distances") {
    double expected = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) expected += (a[i] - b[i]) * (a[i] - b[i]);
    const double got =
        mimic_loss(Tensor::from_data({3, 8}, a), Tensor::from_data({3, 8}, b)).item();
    CHECK(std::abs(got - expected) <= 1e-12 * expected);
    CHECK(got > 0.0);
  }
  SUBCASE("gradient reaches the projection only") {
    Tensor p = Tensor::from_data({3, 8}, a, true);
    Tensor t = Tensor::from_data({3, 8}, b, true);
    backward(mimic_loss(p, t));
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(std::abs(p.grad()[i] - 2.0 * (a[i] - b[i])) <= 1e-12);
    }
    CHECK_FALSE(t.has_grad());
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(mimic_loss(Tensor::zeros({3, 8}), Tensor::zeros({3, 7})), DimensionError);
    CHECK_THROWS_AS(mimic_loss(Tensor::zeros({2, 8}), Tensor::zeros({3, 8})), DimensionError);
  }
}

TEST_CASE("total loss") {
  CHECK(total_loss(Tensor::scalar(0.2), Tensor::scalar(0.05), 16.0).item() == 1.0);
  CHECK(total_loss(Tensor::scalar(0.37), Tensor::scalar(12.5), 0.0).item() == 0.37);
  CHECK(total_loss(Tensor::scalar(0.37), Tensor::scalar(0.0), 16.0).item() == 0.37);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  for (int i = 0; i < 100; ++i) {
    const double b = u(rng), m = u(rng), l = u(rng);
    CHECK(total_loss(Tensor::scalar(b), Tensor::scalar(m), l).item() == b + l * m);
  }
}

TEST_CASE("adam matches a hand-written update") {
  std::mt19937_64 rng(6);
  const std::vector<double> init = oracle::uniform(rng, 5);
  Tensor w = Tensor::from_data({5}, init, true);
  Adam opt({w});
  std::vector<double> ref = init, m(5, 0.0), v(5, 0.0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 0.01;
  for (int step = 1; step <= 4; ++step) {
    backward(sum(mul(w, w)));  // gradient 2w
    opt.step(lr);
    opt.zero_grad();
    for (std::size_t i = 0; i < ref.size(); ++i) {
      const double g = 2.0 * ref[i];
      m[i] = b1 * m[i] + (1 - b1) * g;
      v[i] = b2 * v[i] + (1 - b2) * g * g;
      const double mh = m[i] / (1 - std::pow(b1, step)), vh = v[i] / (1 - std::pow(b2, step));
      ref[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
  CHECK(opt.steps() == 4);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(w.data()[i] - ref[i]) <= 1e-12);
}

TEST_CASE("composite classifier training") {
  std::vector<double> losses;
  TrainConfig c = small_config();
  c.epochs = 4;
  const SopaModel a = train_sopa(small_corpus(), c, [&](const EpochStats &s) {
    losses.push_back(s.bce);
    CHECK(s.epoch == static_cast<int>(losses.size()));
    CHECK(s.lr == learning_rate(c, s.epoch - 1));
  });
  REQUIRE(losses.size() == 4);
  CHECK(losses.back() < losses.front());
  const SopaModel b = train_sopa(small_corpus(), c);
  CHECK(checksum(a.parameters()) == checksum(b.parameters()));

  SUBCASE("one-class training split") {
    Corpus one = small_corpus();
    for (auto &p : one.train) {
      std::erase_if(p.annotations, [](const PixelAnnotation &x) { return x.label == 1; });
    }
    CHECK_THROWS_AS(train_sopa(one, c), TrainingError);
  }
  SUBCASE("grid mismatch") {
    TrainConfig wrong = c;
    wrong.model.image_size = 64;
    CHECK_THROWS_AS(train_sopa(small_corpus(), wrong), ConfigError);
  }
}

TEST_CASE("dense model training") {
  const TrainConfig base = small_config();
  SUBCASE("frozen background encoder keeps the transferred weights") {
    const std::uint32_t teacher = encoder_checksum(small_sopa().encoder);
    int epochs = 0;
    const FopaModel m = train_fopa(small_corpus(), small_sopa(), base, [&](const EpochStats &s) {
      ++epochs;
      CHECK(s.bg_encoder_checksum == teacher);
      CHECK(s.mimic > 0.0);
      CHECK(s.total == doctest::Approx(s.bce + base.lambda_mimic * s.mimic).epsilon(1e-9));
    });
    CHECK(epochs == base.epochs);
    CHECK(encoder_checksum(m.bg_encoder) == teacher);
    CHECK(m.bg_encoder_frozen);
  }
  SUBCASE("unfrozen background encoder moves") {
    TrainConfig c = base;
    c.freeze_encoder = false;
    c.epochs = 1;
    const FopaModel m = train_fopa(small_corpus(), small_sopa(), c);
    CHECK(encoder_checksum(m.bg_encoder) != encoder_checksum(small_sopa().encoder));
    CHECK_FALSE(m.bg_encoder_frozen);
  }
  SUBCASE("mimic off equals zero weight") {
    TrainConfig off = base, zero = base;
    off.mimic_enabled = false;
    zero.lambda_mimic = 0.0;
    std::vector<double> off_losses, zero_losses;
    const FopaModel a = train_fopa(small_corpus(), small_sopa(), off,
                                   [&](const EpochStats &s) { off_losses.push_back(s.total); });
    const FopaModel b = train_fopa(small_corpus(), small_sopa(), zero,
                                   [&](const EpochStats &s) { zero_losses.push_back(s.total); });
    CHECK(params_checksum(a) == params_checksum(b));
    CHECK(off_losses == zero_losses);
  }
  SUBCASE("same seed reproduces the weights") {
    TrainConfig c = base;
    c.epochs = 1;
    CHECK(params_checksum(train_fopa(small_corpus(), small_sopa(), c)) ==
          params_checksum(train_fopa(small_corpus(), small_sopa(), c)));
    TrainConfig other = c;
    other.seed = 2;
    CHECK(params_checksum(train_fopa(small_corpus(), small_sopa(), c)) !=
          params_checksum(train_fopa(small_corpus(), small_sopa(), other)));
  }
  SUBCASE("one-hot input trains") {
    TrainConfig c = base;
    c.epochs = 1;
    c.model.onehot_bins = 8;
    const FopaModel m = train_fopa(small_corpus(), small_sopa(), c);
    CHECK(m.config.onehot_bins == 8);
  }
  SUBCASE("mimic width mismatch") {
    TrainConfig c = base;
    c.model.stages = 3;
    CHECK_THROWS_AS(train_fopa(small_corpus(), small_sopa(), c), ConfigError);
  }
  SUBCASE("diverging run") {
    TrainConfig c = base;
    c.lr = 1e200;
    c.lambda_mimic = 0.0;
    c.epochs = 3;
    CHECK_THROWS_AS(train_fopa(small_corpus(), small_sopa(), c), NumericError);
  }
}

TEST_CASE("mimic targets are the classifier's pooled features") {
  const AnnotatedPair &p = small_corpus().train.front();
  const Tensor t = sopa_targets(small_sopa(), small_corpus(), p);
  REQUIRE(t.shape() == Shape{p.annotations.size(),
                             static_cast<std::size_t>(small_sopa().config.mimic_dim())});
  const auto &a = p.annotations.back();
  const Composite c = compose(small_corpus().background(p.bg_id),
                              small_corpus().foreground(p.fg_id), Placement{p.scale, a.x, a.y});
  const Tensor f = sopa_forward(small_sopa(), composite_tensor(c)).penultimate;
  const std::size_t row = p.annotations.size() - 1, width = f.size();
  for (std::size_t j = 0; j < width; ++j) CHECK(t.data()[row * width + j] == f.data()[j]);
}

TEST_CASE("mimic weight selection") {
  TrainConfig c = small_config();
  c.epochs = 1;
  const std::vector<double> candidates{16.0, 0.01};
  const MimicWeightSearch r = cross_validate_mimic_weight(small_corpus(), c, candidates, 1);
  CHECK(r.candidates == candidates);
  REQUIRE(r.validation_bacc.size() == 2);
  const std::size_t best = r.validation_bacc[1] > r.validation_bacc[0] ? 1 : 0;
  CHECK(r.chosen == candidates[best]);
  CHECK(r.train_pairs + r.validation_pairs == small_corpus().train.size());
  CHECK(r.validation_pairs == static_cast<std::size_t>(
                                  std::lround(0.2 * small_corpus().train.size())));
  CHECK_THROWS_AS(cross_validate_mimic_weight(small_corpus(), c, std::vector<double>{}, 1),
                  ConfigError);
  CHECK_THROWS_AS(cross_validate_mimic_weight(small_corpus(), c, candidates, 1, 1.5),
                  ConfigError);
}
