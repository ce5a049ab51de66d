// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <random>

#include "fopa/error.hpp"
#include "fopa/image.hpp"
#include "fopa/models.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace fopa;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 16;
  c.stages = 2;
  c.base_channels = 2;
  c.feature_dim = 2;
  return c;
}

Tensor random_tensor(std::mt19937_64 &rng, Shape shape, bool grad = false) {
  const std::size_t n = numel(shape);
  return Tensor::from_data(std::move(shape), oracle::uniform(rng, n), grad);
}

std::vector<double> to_vec(const Tensor &t) { return {t.data().begin(), t.data().end()}; }

const Corpus &desk_corpus() {
  static const Corpus corpus = generate_corpus(CorpusConfig{});
  return corpus;
}

std::vector<const AnnotatedPair *> first_pairs(std::size_t n) {
  std::vector<const AnnotatedPair *> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(&desk_corpus().train[i]);
  return out;
}

}  // namespace

TEST_CASE("kernel generator") {
  std::mt19937_64 rng(1);
  Rng model_rng(2);
  SUBCASE("zero input gives zero kernels and a zero dynamic layer") {
    const KernelGenerator g = KernelGenerator::create(128, 16, 3, model_rng);
    const Tensor k = g.forward(Tensor::zeros({2, 128}));
    CHECK(k.shape() == Shape{2, 16, 3, 3});
    for (double v : k.data()) CHECK(v == 0.0);
    const Tensor out = dynamic_depthwise_conv2d(random_tensor(rng, {2, 16, 8, 8}), k);
    for (double v : out.data()) CHECK(v == 0.0);
  }
  SUBCASE("output size is k * k * d") {
    const KernelGenerator g = KernelGenerator::create(128, 16, 3, model_rng);
    CHECK(g.forward(random_tensor(rng, {1, 128})).size() == 144);
    CHECK(g.fc1_w.dim(0) == 288);
  }
  SUBCASE("matches a two-layer dense oracle") {
    const KernelGenerator g = KernelGenerator::create(12, 4, 3, model_rng);
    Tensor fc2_b = g.fc2_b;
    const auto bias2 = oracle::uniform(rng, 36);
    std::copy(bias2.begin(), bias2.end(), fc2_b.mutable_data().begin());
    for (int trial = 0; trial < 10; ++trial) {
      const Tensor v = random_tensor(rng, {3, 12});
      auto h = oracle::dense(to_vec(v), 3, 12, to_vec(g.fc1_w), 72, to_vec(g.fc1_b));
      for (double &x : h) x = std::max(0.0, x);
      const auto expected = oracle::dense(h, 3, 72, to_vec(g.fc2_w), 36, bias2);
      CHECK(oracle::max_abs_diff(to_vec(g.forward(v)), expected) <= 1e-12);
    }
  }
  CHECK_THROWS_AS(KernelGenerator::create(8, 2, 3, model_rng).forward(Tensor::zeros({1, 9})),
                  DimensionError);
}

TEST_CASE("fuse_dynamic") {
  std::mt19937_64 rng(3);
  const Tensor full = random_tensor(rng, {2, 4, 8, 8});
  const Tensor half = random_tensor(rng, {2, 4, 4, 4});
  const Tensor k1 = random_tensor(rng, {2, 4, 3, 3});
  const Tensor k2 = random_tensor(rng, {2, 4, 3, 3});
  const Tensor single = fuse_dynamic(full, half, k1, k2, 1);
  CHECK(to_vec(single) == to_vec(dynamic_depthwise_conv2d(full, k1)));
  const Tensor zeroed = fuse_dynamic(full, half, k1, Tensor::zeros({2, 4, 3, 3}), 2);
  CHECK(to_vec(zeroed) == to_vec(single));

  const auto a = oracle::depthwise(to_vec(full), 2, 4, 8, 8, to_vec(k1), 3);
  const auto b = oracle::upsample2(oracle::depthwise(to_vec(half), 2, 4, 4, 4, to_vec(k2), 3), 8, 4, 4);
  std::vector<double> expected(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) expected[i] = a[i] + b[i];
  CHECK(oracle::max_abs_diff(to_vec(fuse_dynamic(full, half, k1, k2, 2)), expected) <= 1e-10);
}

TEST_CASE("fuse_concat") {
  std::mt19937_64 rng(4);
  Rng model_rng(5);
  const Tensor full = random_tensor(rng, {2, 3, 8, 8});
  const Tensor half = random_tensor(rng, {2, 3, 4, 4});
  ConcatFuser f1 = ConcatFuser::create(3, 5, 3, model_rng);
  ConcatFuser f2 = ConcatFuser::create(3, 5, 3, model_rng);

  SUBCASE("zero vector and identity block pass the map through") {
    auto w = f1.w.mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
    for (int c = 0; c < 3; ++c) w[c * 8 + c] = 1.0;
    const Tensor out = fuse_concat(full, half, f1, f2, Tensor::zeros({2, 5}), Tensor(), 1);
    CHECK(to_vec(out) == to_vec(full));
  }
  SUBCASE("shape matches dynamic fusion") {
    const Tensor out = fuse_concat(full, half, f1, f2, random_tensor(rng, {2, 5}),
                                   random_tensor(rng, {2, 5}), 2);
    const Tensor dyn = fuse_dynamic(full, half, random_tensor(rng, {2, 3, 3, 3}),
                                    random_tensor(rng, {2, 3, 3, 3}), 2);
    CHECK(out.shape() == dyn.shape());
  }
  SUBCASE("matches a broadcast-and-project oracle") {
    auto b1 = oracle::uniform(rng, 3), b2 = oracle::uniform(rng, 3);
    std::copy(b1.begin(), b1.end(), f1.b.mutable_data().begin());
    std::copy(b2.begin(), b2.end(), f2.b.mutable_data().begin());
    const Tensor v1 = random_tensor(rng, {2, 5});
    const Tensor v2 = random_tensor(rng, {2, 5});
    auto project = [](const Tensor &map, const Tensor &v, const ConcatFuser &f, int hw) {
      const auto m = to_vec(map), vv = to_vec(v), w = to_vec(f.w), b = to_vec(f.b);
      std::vector<double> out(2 * 3 * hw * hw);
      for (int n = 0; n < 2; ++n)
        for (int o = 0; o < 3; ++o)
          for (int p = 0; p < hw * hw; ++p) {
            double acc = b[o];
            for (int c = 0; c < 3; ++c) acc += w[o * 8 + c] * m[(n * 3 + c) * hw * hw + p];
            for (int j = 0; j < 5; ++j) acc += w[o * 8 + 3 + j] * vv[n * 5 + j];
            out[(n * 3 + o) * hw * hw + p] = acc;
          }
      return out;
    };
    const auto a = project(full, v1, f1, 8);
    const auto b = oracle::upsample2(project(half, v2, f2, 4), 6, 4, 4);
    std::vector<double> expected(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) expected[i] = a[i] + b[i];
    CHECK(oracle::max_abs_diff(to_vec(fuse_concat(full, half, f1, f2, v1, v2, 2)), expected) <=
          1e-10);
  }
}

TEST_CASE("model configs") {
  CHECK(ModelConfig::desk().mimic_dim() == 128);
  CHECK(ModelConfig::full_scale().mimic_dim() == 512);
  CHECK(ModelConfig::full_scale().feature_dim == 64);
  ModelConfig bad;
  bad.n_scales = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ModelConfig{};
  bad.image_size = 40;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(parse_fusion("concat") == FusionMode::kConcat);
  CHECK_THROWS_AS(parse_fusion("sum"), ConfigError);
}

TEST_CASE("sopa forward") {
  const SopaModel model = SopaModel::create(ModelConfig::desk(), 9);
  const Corpus &corpus = desk_corpus();
  const auto &bg = corpus.backgrounds[0];
  const auto &fg = corpus.foregrounds[0];
  const Tensor a = composite_tensor(compose(bg, fg, {1.0, 30, 40}));
  const Tensor b = composite_tensor(compose(bg, fg, {1.0, 30, 40}));
  const Tensor c = composite_tensor(compose(bg, fg, {1.0, 12, 50}));
  const SopaOutput oa = sopa_forward(model, a);
  CHECK(oa.penultimate.shape() == Shape{1, 128});
  CHECK(oa.logits.shape() == Shape{1, 1});
  CHECK(oa.logits.item() == sopa_forward(model, b).logits.item());

  // Batched and one-at-a-time evaluation build different graphs.
  const Tensor parts[] = {c, a};
  const SopaOutput batched = sopa_forward(model, stack_samples(parts));
  CHECK(std::abs(batched.logits.data()[1] - oa.logits.item()) <= 1e-12);
  CHECK(std::abs(batched.logits.data()[0] - sopa_forward(model, c).logits.item()) <= 1e-12);

  CHECK_THROWS_AS(sopa_forward(model, Tensor::zeros({1, 3, 64, 64})), DimensionError);
  CHECK_THROWS_AS(sopa_forward(model, Tensor::zeros({1, 4, 32, 32})), DimensionError);
}

TEST_CASE("fopa forward shapes and per-pixel head") {
  for (FusionMode mode : {FusionMode::kDynamic, FusionMode::kConcat}) {
    for (int scales : {1, 2}) {
      ModelConfig config;
      config.fusion = mode;
      config.n_scales = scales;
      const FopaModel model = FopaModel::create(config, 11);
      const auto pairs = first_pairs(3);
      const FopaBatch batch = make_fopa_batch(desk_corpus(), pairs, config);
      const FopaOutput out = fopa_forward(model, batch);
      CHECK(out.scores.shape() == Shape{3, 1, 64, 64});
      CHECK(out.features.shape() == Shape{3, 16, 64, 64});
      for (double s : out.scores.data()) {
        REQUIRE(s > 0.0);
        REQUIRE(s < 1.0);
      }
      std::vector<PixelIndex> pixels;
      for (std::size_t n = 0; n < pairs.size(); ++n) {
        for (const auto &a : pairs[n]->annotations) {
          pixels.push_back({n, static_cast<std::size_t>(a.y), static_cast<std::size_t>(a.x)});
        }
      }
      const Tensor logits = classify_pixels(model, gather_pixels(out.features, pixels));
      for (std::size_t i = 0; i < pixels.size(); ++i) {
        const auto &p = pixels[i];
        const double expected = oracle::logistic(logits.data()[i]);
        CHECK(std::abs(out.scores.at({p.n, 0, p.y, p.x}) - expected) <= 1e-12);
      }
      CHECK(project_pixels(model, out.features, pixels).shape() ==
            Shape{pixels.size(), 128});
    }
  }
}

TEST_CASE("fopa input variants") {
  ModelConfig centred;
  ModelConfig onehot;
  onehot.onehot_bins = 16;
  const FopaModel centred_model = FopaModel::create(centred, 1);
  const FopaModel onehot_model = FopaModel::create(onehot, 1);
  const auto pairs = first_pairs(2);
  const FopaBatch centred_batch = make_fopa_batch(desk_corpus(), pairs, centred);
  const FopaBatch onehot_batch = make_fopa_batch(desk_corpus(), pairs, onehot);
  CHECK(onehot_batch.scale_onehot.shape() == Shape{2, 16});
  CHECK(fopa_forward(onehot_model, onehot_batch).scores.shape() == Shape{2, 1, 64, 64});
  CHECK_THROWS_AS(fopa_forward(onehot_model, centred_batch), ConfigError);
  CHECK_THROWS_AS(fopa_forward(centred_model, onehot_batch), ConfigError);
  ModelConfig small = centred;
  small.image_size = 32;
  CHECK_THROWS_AS(make_fopa_batch(desk_corpus(), pairs, small), ConfigError);
}

TEST_CASE("pass counters") {
  const ModelConfig config;
  const FopaModel fopa = FopaModel::create(config, 2);
  const SopaModel sopa = SopaModel::create(config, 2);
  reset_pass_counts();
  const auto pairs = first_pairs(1);
  fopa_forward(fopa, make_fopa_batch(desk_corpus(), pairs, config));
  sopa_forward(sopa, Tensor::zeros({5, 4, 64, 64}));
  CHECK(pass_counts().fopa == 1);
  CHECK(pass_counts().sopa == 5);
  reset_pass_counts();
  CHECK(pass_counts().sopa == 0);
}

TEST_CASE("background prior transfer") {
  const ModelConfig config;
  const SopaModel sopa = SopaModel::create(config, 21);
  FopaModel fopa = FopaModel::create(config, 22);
  CHECK(encoder_checksum(fopa.bg_encoder) != encoder_checksum(sopa.encoder));
  const auto all = fopa.parameters().size();
  transfer_background_prior(sopa, fopa, true);
  CHECK(encoder_checksum(fopa.bg_encoder) == encoder_checksum(sopa.encoder));
  CHECK(fopa.bg_encoder_frozen);
  CHECK(fopa.trainable_parameters().size() == all - 4 * 6);
  for (const auto &s : fopa.bg_encoder.stages) CHECK_FALSE(s.conv.requires_grad());
  // The copy is independent of the source.
  CHECK(fopa.bg_encoder.stages[0].conv.node() != sopa.encoder.stages[0].conv.node());

  FopaModel unfrozen = FopaModel::create(config, 22);
  transfer_background_prior(sopa, unfrozen, false);
  CHECK(unfrozen.trainable_parameters().size() == all);
  CHECK(unfrozen.bg_encoder.stages[0].conv.requires_grad());

  ModelConfig other = config;
  other.base_channels = 8;
  try {
    transfer_background_prior(SopaModel::create(other, 1), fopa, true);
    FAIL("expected a transfer error");
  } catch (const TransferError &e) {
    CHECK(std::string(e.what()).find("stage1.conv") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "fopa_model_tests";
  std::filesystem::create_directories(dir);
  ModelConfig config;
  config.fusion = FusionMode::kConcat;
  config.onehot_bins = 8;
  FopaModel fopa = FopaModel::create(config, 3);
  transfer_background_prior(SopaModel::create(config, 4), fopa, true);
  save_fopa(fopa, dir / "f.ckpt");
  CHECK(checkpoint_kind(dir / "f.ckpt") == "fopa");
  const FopaModel back = load_fopa(dir / "f.ckpt");
  CHECK(back.config.fusion == FusionMode::kConcat);
  CHECK(back.config.onehot_bins == 8);
  CHECK(back.bg_encoder_frozen);
  CHECK(checksum(back.parameters()) == checksum(fopa.parameters()));
  save_fopa(back, dir / "g.ckpt");
  CHECK(read_file_bytes(dir / "f.ckpt") == read_file_bytes(dir / "g.ckpt"));

  const SopaModel sopa = SopaModel::create(ModelConfig{}, 6);
  save_sopa(sopa, dir / "s.ckpt");
  CHECK(checksum(load_sopa(dir / "s.ckpt").parameters()) == checksum(sopa.parameters()));
  CHECK_THROWS_AS(load_sopa(dir / "f.ckpt"), DataError);

  auto bytes = read_file_bytes(dir / "s.ckpt");
  CHECK(std::string(bytes.begin(), bytes.begin() + 6) == "FOPA1\n");
  bytes[bytes.size() / 2] ^= 0x10;
  CHECK_THROWS_AS(decode_checkpoint(bytes), ParseError);
  bytes[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bytes), ParseError);
}

TEST_CASE("checkpoint record layout") {
  const NamedTensor records[] = {{"ab", Tensor::from_data({2}, {1.0, -2.0})}};
  const auto bytes = encode_checkpoint(records);
  // magic 6 + name_len 4 + name 2 + rank 4 + dim 4 + values 16 + crc 4
  REQUIRE(bytes.size() == 40);
  CHECK(bytes[6] == 2);
  CHECK(bytes[7] == 0);
  CHECK(bytes[12] == 1);
  CHECK(bytes[16] == 2);
  CHECK(bytes[27] == 0x3f);  // high byte of 1.0
  CHECK(bytes[35] == 0xc0);  // high byte of -2.0
  const auto back = decode_checkpoint(bytes);
  REQUIRE(back.size() == 1);
  CHECK(back[0].first == "ab");
  CHECK(to_vec(back[0].second) == std::vector<double>{1.0, -2.0});
}

TEST_CASE("end-to-end gradients through the dense model") {
  std::mt19937_64 rng(31);
  for (FusionMode mode : {FusionMode::kDynamic, FusionMode::kConcat}) {
    for (int bins : {0, 4}) {
      ModelConfig config = tiny_config();
      config.fusion = mode;
      config.onehot_bins = bins;
      const FopaModel base = FopaModel::create(config, 5);
      FopaBatch batch;
      batch.fg = random_tensor(rng, {2, 4, 16, 16});
      batch.bg = random_tensor(rng, {2, 4, 16, 16});
      if (bins) batch.scale_onehot = Tensor::from_data({2, 4}, {0, 1, 0, 0, 0, 0, 0, 1});
      const std::vector<PixelIndex> pixels{{0, 3, 4}, {0, 9, 9}, {1, 15, 0}, {1, 7, 12}};
      const std::vector<int> labels{1, 0, 0, 1};

      auto install = [&](FopaModel &m, const std::vector<Tensor> &l) {
        m.fg_encoder.stages[0].conv = l[0];
        m.bg_encoder.stages[1].res_scale = l[1];
        m.decoder.levels[0].w1 = l[2];
        m.decoder.levels[1].b2 = l[3];
        if (mode == FusionMode::kDynamic) {
          m.kernel_generators[0].fc2_w = l[4];
          m.kernel_generators[1].fc1_w = l[5];
        } else {
          m.fusers[0].w = l[4];
          m.fusers[1].w = l[5];
        }
        m.classifier_w = l[6];
        m.mimic_w = l[7];
      };
      std::vector<Tensor> leaves{base.fg_encoder.stages[0].conv, base.bg_encoder.stages[1].res_scale,
                                 base.decoder.levels[0].w1, base.decoder.levels[1].b2};
      if (mode == FusionMode::kDynamic) {
        leaves.push_back(base.kernel_generators[0].fc2_w);
        leaves.push_back(base.kernel_generators[1].fc1_w);
      } else {
        leaves.push_back(base.fusers[0].w);
        leaves.push_back(base.fusers[1].w);
      }
      leaves.push_back(base.classifier_w);
      leaves.push_back(base.mimic_w);
      for (auto &l : leaves) l = l.clone(true);

      gradcheck::Case c{leaves, [&](const std::vector<Tensor> &l) {
                          FopaModel m = base;
                          install(m, l);
                          const FopaOutput out = fopa_forward(m, batch);
                          const Tensor bce = bce_with_logits_sum(gather_pixels(out.logits, pixels), labels);
                          const Tensor proj = project_pixels(m, out.features, pixels);
                          return add(bce, sum(mul(proj, proj)));
                        }};
      CHECK(gradcheck::check(c, rng) <= 1e-4);
    }
  }
}
