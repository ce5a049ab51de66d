// SPDX-License-Identifier: Apache-2.0
#include "fopa/models.hpp"

#include <zlib.h>

#include <atomic>
#include <cmath>
#include <cstring>
#include <map>

#include "fopa/error.hpp"

namespace fopa {

namespace {

std::atomic<std::uint64_t> g_sopa_passes{0};
std::atomic<std::uint64_t> g_fopa_passes{0};

Tensor normal_param(Shape shape, double stddev, Rng &rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> values(numel(shape));
  for (double &v : values) v = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(values), true);
}

Tensor const_param(Shape shape, double value) { return Tensor::full(std::move(shape), value, true); }

Tensor conv_param(int out_ch, int in_ch, int k, Rng &rng) {
  const auto fan_in = static_cast<double>(in_ch * k * k);
  return normal_param({static_cast<std::size_t>(out_ch), static_cast<std::size_t>(in_ch),
                       static_cast<std::size_t>(k), static_cast<std::size_t>(k)},
                      std::sqrt(2.0 / fan_in), rng);
}

Tensor dense_param(int out_dim, int in_dim, double gain, Rng &rng) {
  return normal_param({static_cast<std::size_t>(out_dim), static_cast<std::size_t>(in_dim)},
                      std::sqrt(gain / in_dim), rng);
}

Tensor vec(int n, double value = 0.0) { return const_param({static_cast<std::size_t>(n)}, value); }

void push(std::vector<NamedTensor> &out, const std::string &prefix, const char *name,
          const Tensor &t) {
  out.emplace_back(prefix + name, t);
}

}  // namespace

const char *fusion_name(FusionMode mode) {
  return mode == FusionMode::kDynamic ? "dynamic" : "concat";
}

FusionMode parse_fusion(const std::string &name) {
  if (name == "dynamic") return FusionMode::kDynamic;
  if (name == "concat") return FusionMode::kConcat;
  throw ConfigError("unknown fusion mode '" + name + "' (expected dynamic or concat)");
}

void ModelConfig::validate() const {
  if (stages < 2) throw ConfigError("models need at least 2 encoder stages");
  if (base_channels < 1 || feature_dim < 1) throw ConfigError("channel counts must be positive");
  if (kernel_size < 1 || kernel_size % 2 == 0) throw ConfigError("kernel size must be odd");
  if (n_scales != 1 && n_scales != 2) throw ConfigError("n_scales must be 1 or 2");
  if (onehot_bins != 0 && onehot_bins < 2) throw ConfigError("one-hot encoding needs >= 2 bins");
  if (input_channels != 4) throw ConfigError("inputs carry RGB plus one mask channel");
  if (image_size % (1 << stages) != 0) {
    throw ConfigError("image size " + std::to_string(image_size) + " is not divisible by 2^" +
                      std::to_string(stages));
  }
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.image_size = 256;
  c.base_channels = 64;
  c.feature_dim = 64;
  return c;
}

// ---- encoder ---------------------------------------------------------------

Encoder Encoder::create(int input_channels, int base_channels, int n_stages, Rng &rng) {
  Encoder enc;
  int in_ch = input_channels;
  for (int l = 1; l <= n_stages; ++l) {
    const int ch = base_channels << (l - 1);
    Stage s;
    s.conv = conv_param(ch, in_ch, 3, rng);
    s.scale = vec(ch, 1.0);
    s.shift = vec(ch);
    s.res_conv = conv_param(ch, ch, 1, rng);
    s.res_scale = vec(ch, 1.0);
    s.res_shift = vec(ch);
    enc.stages.push_back(std::move(s));
    in_ch = ch;
  }
  return enc;
}

std::vector<Tensor> Encoder::forward(const Tensor &x) const {
  std::vector<Tensor> out;
  Tensor h = x;
  for (const Stage &s : stages) {
    h = relu(channel_affine(conv2d(h, s.conv, Tensor(), 2, 1), s.scale, s.shift));
    const Tensor r = channel_affine(conv2d(h, s.res_conv, Tensor(), 1, 0), s.res_scale, s.res_shift);
    h = relu(add(h, r));
    out.push_back(h);
  }
  return out;
}

void Encoder::append_parameters(const std::string &prefix, std::vector<NamedTensor> &out) const {
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string p = prefix + "stage" + std::to_string(i + 1) + ".";
    const Stage &s = stages[i];
    push(out, p, "conv", s.conv);
    push(out, p, "scale", s.scale);
    push(out, p, "shift", s.shift);
    push(out, p, "res_conv", s.res_conv);
    push(out, p, "res_scale", s.res_scale);
    push(out, p, "res_shift", s.res_shift);
  }
}

// ---- decoder ---------------------------------------------------------------

Decoder Decoder::create(const ModelConfig &config, Rng &rng) {
  Decoder dec;
  int prev = config.stage_channels(config.stages);
  auto level = [&](int in_ch, int out_ch) {
    Level lv;
    lv.w1 = conv_param(out_ch, in_ch, 3, rng);
    lv.b1 = vec(out_ch);
    lv.w2 = conv_param(out_ch, out_ch, 3, rng);
    lv.b2 = vec(out_ch);
    dec.levels.push_back(std::move(lv));
    prev = out_ch;
  };
  for (int l = config.stages - 1; l >= 1; --l) {
    const int skip = config.stage_channels(l);
    level(prev + skip, l == 1 ? config.feature_dim : skip);
  }
  level(prev + config.input_channels, config.feature_dim);
  return dec;
}

DecoderOutput Decoder::forward(std::span<const Tensor> skips, const Tensor &bg_input) const {
  if (skips.size() != levels.size()) {
    throw DimensionError("decoder has " + std::to_string(levels.size()) + " levels but got " +
                         std::to_string(skips.size()) + " encoder maps");
  }
  auto run = [](const Level &lv, const Tensor &up, const Tensor &skip) {
    const Tensor parts[] = {up, skip};
    Tensor h = relu(conv2d(concat_channels(parts), lv.w1, lv.b1, 1, 1));
    return relu(conv2d(h, lv.w2, lv.b2, 1, 1));
  };
  DecoderOutput out;
  Tensor x = skips.back();
  const std::size_t n_skip = skips.size() - 1;
  for (std::size_t i = 0; i < n_skip; ++i) {
    x = run(levels[i], upsample_nearest_2x(x), skips[n_skip - 1 - i]);
  }
  out.half = x;
  out.full = run(levels.back(), upsample_nearest_2x(x), bg_input);
  return out;
}

void Decoder::append_parameters(const std::string &prefix, std::vector<NamedTensor> &out) const {
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const std::string p = prefix + "level" + std::to_string(i) + ".";
    push(out, p, "w1", levels[i].w1);
    push(out, p, "b1", levels[i].b1);
    push(out, p, "w2", levels[i].w2);
    push(out, p, "b2", levels[i].b2);
  }
}

// ---- kernel generation and fusion -----------------------------------------

KernelGenerator KernelGenerator::create(int input_dim, int channels, int kernel_size, Rng &rng) {
  KernelGenerator g;
  g.channels = channels;
  g.kernel_size = kernel_size;
  const int taps = kernel_size * kernel_size * channels;
  g.fc1_w = dense_param(2 * taps, input_dim, 2.0, rng);
  g.fc1_b = vec(2 * taps);
  g.fc2_w = dense_param(taps, 2 * taps, 1.0, rng);
  g.fc2_b = vec(taps);
  return g;
}

Tensor KernelGenerator::forward(const Tensor &pooled) const {
  if (pooled.rank() != 2 || pooled.dim(1) != fc1_w.dim(1)) {
    throw DimensionError("kernel generator expects N x " + std::to_string(fc1_w.dim(1)) +
                         " input, got " + shape_str(pooled.shape()));
  }
  const Tensor h = relu(linear(pooled, fc1_w, fc1_b));
  const auto k = static_cast<std::size_t>(kernel_size);
  return reshape(linear(h, fc2_w, fc2_b),
                 {pooled.dim(0), static_cast<std::size_t>(channels), k, k});
}

void KernelGenerator::append_parameters(const std::string &prefix,
                                        std::vector<NamedTensor> &out) const {
  push(out, prefix, "fc1_w", fc1_w);
  push(out, prefix, "fc1_b", fc1_b);
  push(out, prefix, "fc2_w", fc2_w);
  push(out, prefix, "fc2_b", fc2_b);
}

ConcatFuser ConcatFuser::create(int map_channels, int vector_dim, int out_channels, Rng &rng) {
  ConcatFuser f;
  f.w = normal_param({static_cast<std::size_t>(out_channels),
                      static_cast<std::size_t>(map_channels + vector_dim), 1, 1},
                     std::sqrt(1.0 / (map_channels + vector_dim)), rng);
  f.b = vec(out_channels);
  return f;
}

Tensor ConcatFuser::forward(const Tensor &map, const Tensor &pooled) const {
  const Tensor parts[] = {map, broadcast_spatial(pooled, map.dim(2), map.dim(3))};
  return conv2d(concat_channels(parts), w, b, 1, 0);
}

void ConcatFuser::append_parameters(const std::string &prefix,
                                    std::vector<NamedTensor> &out) const {
  push(out, prefix, "w", w);
  push(out, prefix, "b", b);
}

Tensor fuse_dynamic(const Tensor &full, const Tensor &half, const Tensor &kernels_full,
                    const Tensor &kernels_half, int n_scales) {
  Tensor out = dynamic_depthwise_conv2d(full, kernels_full);
  if (n_scales == 2) {
    out = add(out, upsample_nearest_2x(dynamic_depthwise_conv2d(half, kernels_half)));
  }
  return out;
}

Tensor fuse_concat(const Tensor &full, const Tensor &half, const ConcatFuser &fuse_full,
                   const ConcatFuser &fuse_half, const Tensor &pooled_full,
                   const Tensor &pooled_half, int n_scales) {
  Tensor out = fuse_full.forward(full, pooled_full);
  if (n_scales == 2) {
    out = add(out, upsample_nearest_2x(fuse_half.forward(half, pooled_half)));
  }
  return out;
}

// ---- SOPA ------------------------------------------------------------------

SopaModel SopaModel::create(const ModelConfig &config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  SopaModel m;
  m.config = config;
  m.encoder = Encoder::create(config.input_channels, config.base_channels, config.stages, rng);
  m.head_w = dense_param(1, config.mimic_dim(), 1.0, rng);
  m.head_b = vec(1);
  return m;
}

std::vector<NamedTensor> SopaModel::parameters() const {
  std::vector<NamedTensor> out;
  encoder.append_parameters("encoder.", out);
  push(out, "head.", "w", head_w);
  push(out, "head.", "b", head_b);
  return out;
}

namespace {

void check_input(const Tensor &x, const ModelConfig &config, const char *what) {
  const auto size = static_cast<std::size_t>(config.image_size);
  if (x.rank() != 4) {
    throw DimensionError(std::string(what) + " must be N x C x H x W, got " +
                         shape_str(x.shape()));
  }
  if (x.dim(1) != static_cast<std::size_t>(config.input_channels)) {
    throw DimensionError(std::string(what) + " has " + std::to_string(x.dim(1)) +
                         " channels (axis 1), expected " +
                         std::to_string(config.input_channels));
  }
  if (x.dim(2) != size || x.dim(3) != size) {
    throw DimensionError(std::string(what) + " is " + std::to_string(x.dim(2)) + "x" +
                         std::to_string(x.dim(3)) + ", model grid is " +
                         std::to_string(size) + "x" + std::to_string(size));
  }
}

}  // namespace

SopaOutput sopa_forward(const SopaModel &model, const Tensor &input) {
  check_input(input, model.config, "composite input");
  g_sopa_passes += input.dim(0);
  const auto maps = model.encoder.forward(input);
  SopaOutput out;
  out.penultimate = global_avg_pool(maps.back());
  out.logits = linear(out.penultimate, model.head_w, model.head_b);
  return out;
}

// ---- FOPA ------------------------------------------------------------------

FopaModel FopaModel::create(const ModelConfig &config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  FopaModel m;
  m.config = config;
  m.fg_encoder = Encoder::create(config.input_channels, config.base_channels, config.stages, rng);
  m.bg_encoder = Encoder::create(config.input_channels, config.base_channels, config.stages, rng);
  m.decoder = Decoder::create(config, rng);
  const int d = config.feature_dim;
  for (int s = 0; s < config.n_scales; ++s) {
    const int vector_dim = config.stage_channels(config.stages - s) + config.onehot_bins;
    if (config.fusion == FusionMode::kDynamic) {
      m.kernel_generators.push_back(KernelGenerator::create(vector_dim, d, config.kernel_size, rng));
    } else {
      m.fusers.push_back(ConcatFuser::create(d, vector_dim, d, rng));
    }
  }
  m.classifier_w = normal_param({1, static_cast<std::size_t>(d), 1, 1}, std::sqrt(1.0 / d), rng);
  m.classifier_b = vec(1);
  m.mimic_w = dense_param(config.mimic_dim(), d, 1.0, rng);
  m.mimic_b = vec(config.mimic_dim());
  return m;
}

std::vector<NamedTensor> FopaModel::parameters() const {
  std::vector<NamedTensor> out;
  fg_encoder.append_parameters("fg_encoder.", out);
  bg_encoder.append_parameters("bg_encoder.", out);
  decoder.append_parameters("decoder.", out);
  for (std::size_t i = 0; i < kernel_generators.size(); ++i) {
    kernel_generators[i].append_parameters("kgu" + std::to_string(i + 1) + ".", out);
  }
  for (std::size_t i = 0; i < fusers.size(); ++i) {
    fusers[i].append_parameters("fuse" + std::to_string(i + 1) + ".", out);
  }
  push(out, "classifier.", "w", classifier_w);
  push(out, "classifier.", "b", classifier_b);
  push(out, "mimic.", "w", mimic_w);
  push(out, "mimic.", "b", mimic_b);
  return out;
}

std::vector<NamedTensor> FopaModel::trainable_parameters() const {
  std::vector<NamedTensor> out;
  for (auto &p : parameters()) {
    if (bg_encoder_frozen && p.first.rfind("bg_encoder.", 0) == 0) continue;
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<Tensor> background_features(const FopaModel &model, const Tensor &bg) {
  check_input(bg, model.config, "background input");
  return model.bg_encoder.forward(bg);
}

FopaOutput fopa_forward(const FopaModel &model, const FopaBatch &batch,
                        const std::vector<Tensor> *bg_features) {
  const ModelConfig &c = model.config;
  check_input(batch.fg, c, "foreground input");
  check_input(batch.bg, c, "background input");
  const std::size_t n = batch.fg.dim(0);
  if (batch.bg.dim(0) != n) throw DimensionError("foreground and background batch sizes differ");
  if (c.onehot_bins > 0) {
    if (!batch.scale_onehot.defined()) {
      throw ConfigError("model expects one-hot scale inputs but the batch has none");
    }
    if (batch.scale_onehot.shape() != Shape{n, static_cast<std::size_t>(c.onehot_bins)}) {
      throw ConfigError("scale one-hot is " + shape_str(batch.scale_onehot.shape()) +
                        ", model uses " + std::to_string(c.onehot_bins) + " bins");
    }
  } else if (batch.scale_onehot.defined()) {
    throw ConfigError("model expects centred-canvas inputs but the batch carries a scale one-hot");
  }
  g_fopa_passes += n;

  const auto fg_maps = model.fg_encoder.forward(batch.fg);
  const std::vector<Tensor> computed =
      bg_features ? std::vector<Tensor>{} : background_features(model, batch.bg);
  const std::vector<Tensor> &bg_maps = bg_features ? *bg_features : computed;
  const DecoderOutput dec = model.decoder.forward(bg_maps, batch.bg);

  auto pooled = [&](int stage) {
    Tensor v = global_avg_pool(fg_maps[stage - 1]);
    if (c.onehot_bins > 0) {
      const Tensor parts[] = {v, batch.scale_onehot};
      v = concat_features(parts);
    }
    return v;
  };
  const Tensor pooled_full = pooled(c.stages);
  const Tensor pooled_half = c.n_scales == 2 ? pooled(c.stages - 1) : Tensor();

  FopaOutput out;
  if (c.fusion == FusionMode::kDynamic) {
    const Tensor k_full = model.kernel_generators[0].forward(pooled_full);
    const Tensor k_half =
        c.n_scales == 2 ? model.kernel_generators[1].forward(pooled_half) : Tensor();
    out.features = fuse_dynamic(dec.full, dec.half, k_full, k_half, c.n_scales);
  } else {
    out.features = fuse_concat(dec.full, dec.half, model.fusers[0],
                               c.n_scales == 2 ? model.fusers[1] : model.fusers[0], pooled_full,
                               pooled_half, c.n_scales);
  }
  out.logits = conv2d(out.features, model.classifier_w, model.classifier_b, 1, 0);
  out.scores = sigmoid(out.logits);
  return out;
}

Tensor project_pixels(const FopaModel &model, const Tensor &features,
                      std::span<const PixelIndex> pixels) {
  return linear(gather_pixels(features, pixels), model.mimic_w, model.mimic_b);
}

Tensor classify_pixels(const FopaModel &model, const Tensor &pixel_features) {
  const Tensor w = reshape(model.classifier_w, {1, model.classifier_w.dim(1)});
  return linear(pixel_features, w, model.classifier_b);
}

// ---- prior transfer and checksums -----------------------------------------

void transfer_background_prior(const SopaModel &sopa, FopaModel &fopa, bool freeze) {
  std::vector<NamedTensor> src, dst;
  sopa.encoder.append_parameters("", src);
  fopa.bg_encoder.append_parameters("", dst);
  std::map<std::string, Shape> src_shapes, dst_shapes;
  for (const auto &[name, t] : src) src_shapes[name] = t.shape();
  for (const auto &[name, t] : dst) dst_shapes[name] = t.shape();
  std::string diff;
  auto note = [&](const std::string &name, const std::string &a, const std::string &b) {
    diff += "\n  " + name + ": sopa " + a + " vs background encoder " + b;
  };
  for (const auto &[name, shape] : src_shapes) {
    auto it = dst_shapes.find(name);
    if (it == dst_shapes.end()) {
      note(name, shape_str(shape), "missing");
    } else if (it->second != shape) {
      note(name, shape_str(shape), shape_str(it->second));
    }
  }
  for (const auto &[name, shape] : dst_shapes) {
    if (!src_shapes.count(name)) note(name, "missing", shape_str(shape));
  }
  if (!diff.empty()) throw TransferError("encoder architectures differ:" + diff);

  Encoder copy = sopa.encoder;
  for (auto &s : copy.stages) {
    for (Tensor *t : {&s.conv, &s.scale, &s.shift, &s.res_conv, &s.res_scale, &s.res_shift}) {
      *t = t->clone(!freeze);
    }
  }
  fopa.bg_encoder = std::move(copy);
  fopa.bg_encoder_frozen = freeze;
}

std::uint32_t checksum(std::span<const NamedTensor> tensors) {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto &[name, t] : tensors) {
    crc = crc32(crc, reinterpret_cast<const Bytef *>(name.data()), static_cast<uInt>(name.size()));
    const auto data = t.data();
    crc = crc32(crc, reinterpret_cast<const Bytef *>(data.data()),
                static_cast<uInt>(data.size() * sizeof(double)));
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t encoder_checksum(const Encoder &encoder) {
  std::vector<NamedTensor> params;
  encoder.append_parameters("", params);
  return checksum(params);
}

std::size_t parameter_count(std::span<const NamedTensor> tensors) {
  std::size_t n = 0;
  for (const auto &[name, t] : tensors) n += t.size();
  return n;
}

PassCounts pass_counts() { return {g_sopa_passes.load(), g_fopa_passes.load()}; }

void reset_pass_counts() {
  g_sopa_passes = 0;
  g_fopa_passes = 0;
}

// ---- input encoding --------------------------------------------------------

Tensor image_tensor(const Image &rgb, const Image &mask) {
  if (rgb.channels != 3 || mask.channels != 1 || rgb.width != mask.width ||
      rgb.height != mask.height) {
    throw DimensionError("image tensor needs an RGB image and a same-size gray mask");
  }
  const std::size_t h = rgb.height, w = rgb.width, plane = h * w;
  std::vector<double> data(4 * plane);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        data[c * plane + y * w + x] = rgb.at(static_cast<int>(x), static_cast<int>(y), c) / 255.0;
      }
      data[3 * plane + y * w + x] = mask.at(static_cast<int>(x), static_cast<int>(y)) ? 1.0 : 0.0;
    }
  }
  return Tensor::from_data({1, 4, h, w}, std::move(data));
}

Tensor stack_samples(std::span<const Tensor> samples) {
  if (samples.empty()) throw DimensionError("cannot stack an empty sample list");
  Shape shape = samples.front().shape();
  std::vector<double> data;
  std::size_t n = 0;
  for (const Tensor &s : samples) {
    if (s.rank() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), s.shape().begin() + 1)) {
      throw DimensionError("cannot stack " + shape_str(s.shape()) + " onto " + shape_str(shape));
    }
    data.insert(data.end(), s.data().begin(), s.data().end());
    n += s.dim(0);
  }
  shape[0] = n;
  return Tensor::from_data(std::move(shape), std::move(data));
}

Tensor composite_tensor(const Composite &composite) {
  return image_tensor(composite.rgb, composite.mask);
}

FopaBatch make_fopa_batch(const Corpus &corpus, std::span<const AnnotatedPair *const> pairs,
                          const ModelConfig &config) {
  std::vector<Tensor> fg, bg, onehot;
  for (const AnnotatedPair *p : pairs) {
    FopaBatch one = make_fopa_batch(corpus.background(p->bg_id), corpus.foreground(p->fg_id),
                                    p->scale, config);
    fg.push_back(one.fg);
    bg.push_back(one.bg);
    if (one.scale_onehot.defined()) onehot.push_back(one.scale_onehot);
  }
  FopaBatch batch;
  batch.fg = stack_samples(fg);
  batch.bg = stack_samples(bg);
  if (!onehot.empty()) batch.scale_onehot = stack_samples(onehot);
  return batch;
}

FopaBatch make_fopa_batch(const Background &bg, const ForegroundObject &fg, double scale,
                          const ModelConfig &config) {
  const int size = config.image_size;
  if (bg.pixels.width != size || bg.pixels.height != size) {
    throw ConfigError("background is " + std::to_string(bg.pixels.width) + "x" +
                      std::to_string(bg.pixels.height) + " but the model grid is " +
                      std::to_string(size) + "x" + std::to_string(size));
  }
  FopaBatch batch;
  if (config.onehot_bins > 0) {
    const OneHotScaleInput in = prepare_onehot_input(bg, fg, scale, config.onehot_bins, size, size);
    batch.fg = image_tensor(in.fg_full, in.mask_full);
    batch.bg = image_tensor(in.bg_canvas, in.zero_mask);
    batch.scale_onehot = Tensor::from_data(
        {1, static_cast<std::size_t>(config.onehot_bins)}, in.scale_onehot);
  } else {
    const FopaInput in = prepare_fopa_input(bg, fg, scale, size, size);
    batch.fg = image_tensor(in.fg_canvas, in.mask_canvas);
    batch.bg = image_tensor(in.bg_canvas, in.zero_mask);
  }
  return batch;
}

// ---- checkpoints -----------------------------------------------------------

namespace {

constexpr char kMagic[] = "FOPA1\n";
constexpr std::size_t kMagicLen = 6;

void put_u32(std::vector<std::uint8_t> &out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t> &out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Cursor {
 public:
  explicit Cursor(std::span<const std::uint8_t> bytes) : bytes_(bytes), pos_(kMagicLen) {}
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t offset() const { return pos_; }

  void need(std::size_t n, const char *what) const {
    if (bytes_.size() - pos_ < n) {
      throw ParseError(std::string("checkpoint truncated in ") + what, pos_);
    }
  }
  std::uint32_t u32(const char *what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8, "tensor values");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  std::string text(std::size_t n) {
    need(n, "tensor name");
    std::string s(bytes_.begin() + pos_, bytes_.begin() + pos_ + n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(std::span<const NamedTensor> tensors) {
  std::vector<std::uint8_t> out(kMagic, kMagic + kMagicLen);
  for (const auto &[name, t] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) put_f64(out, v);
  }
  put_u32(out, static_cast<std::uint32_t>(crc32(0L, out.data(), static_cast<uInt>(out.size()))));
  return out;
}

std::vector<NamedTensor> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagicLen + 4 || std::memcmp(bytes.data(), kMagic, kMagicLen) != 0) {
    throw ParseError("not a checkpoint (bad magic)", 0);
  }
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
  const auto actual = static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(body)));
  if (stored != actual) throw ParseError("checkpoint CRC mismatch", body);

  std::vector<NamedTensor> out;
  Cursor cur(bytes.first(body));
  while (!cur.done()) {
    const std::uint32_t name_len = cur.u32("name length");
    std::string name = cur.text(name_len);
    const std::uint32_t rank = cur.u32("rank");
    if (rank > 8) throw ParseError("implausible tensor rank " + std::to_string(rank), cur.offset());
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(cur.u32("dims"));
    const std::size_t count = numel(shape);
    cur.need(count * 8, "tensor values");
    std::vector<double> values(count);
    for (double &v : values) v = cur.f64();
    out.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(values)));
  }
  return out;
}

namespace {

void put_meta(std::vector<NamedTensor> &out, const std::string &key, double value) {
  out.emplace_back("meta/" + key, Tensor::scalar(value));
}

std::vector<NamedTensor> config_meta(const ModelConfig &c, double kind) {
  std::vector<NamedTensor> m;
  put_meta(m, "kind", kind);
  put_meta(m, "image_size", c.image_size);
  put_meta(m, "stages", c.stages);
  put_meta(m, "base_channels", c.base_channels);
  put_meta(m, "feature_dim", c.feature_dim);
  put_meta(m, "kernel_size", c.kernel_size);
  put_meta(m, "n_scales", c.n_scales);
  put_meta(m, "fusion", c.fusion == FusionMode::kDynamic ? 0 : 1);
  put_meta(m, "onehot_bins", c.onehot_bins);
  return m;
}

struct Loaded {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, double> meta;
  ModelConfig config;
  double kind = 0;
};

Loaded read_checkpoint(const std::filesystem::path &path) {
  Loaded l;
  for (auto &[name, t] : decode_checkpoint(read_file_bytes(path))) {
    if (name.rfind("meta/", 0) == 0) {
      if (t.rank() != 0) throw DataError("metadata record " + name + " is not a scalar");
      l.meta[name.substr(5)] = t.item();
    } else if (!l.tensors.emplace(name, t).second) {
      throw DataError("checkpoint repeats tensor " + name);
    }
  }
  auto get = [&](const char *key) -> int {
    auto it = l.meta.find(key);
    if (it == l.meta.end()) throw DataError(std::string("checkpoint lacks meta/") + key);
    return static_cast<int>(it->second);
  };
  l.kind = get("kind");
  l.config.image_size = get("image_size");
  l.config.stages = get("stages");
  l.config.base_channels = get("base_channels");
  l.config.feature_dim = get("feature_dim");
  l.config.kernel_size = get("kernel_size");
  l.config.n_scales = get("n_scales");
  l.config.fusion = get("fusion") == 0 ? FusionMode::kDynamic : FusionMode::kConcat;
  l.config.onehot_bins = get("onehot_bins");
  l.config.validate();
  return l;
}

// Copies every stored tensor into the freshly built parameter set; names and
// shapes must match exactly.
void fill_parameters(const std::vector<NamedTensor> &params, const Loaded &l) {
  if (params.size() != l.tensors.size()) {
    throw DataError("checkpoint has " + std::to_string(l.tensors.size()) +
                    " tensors, model expects " + std::to_string(params.size()));
  }
  for (const auto &[name, t] : params) {
    auto it = l.tensors.find(name);
    if (it == l.tensors.end()) throw DataError("checkpoint lacks tensor " + name);
    if (it->second.shape() != t.shape()) {
      throw DataError("tensor " + name + " is " + shape_str(it->second.shape()) +
                      " in the checkpoint, model expects " + shape_str(t.shape()));
    }
    Tensor target = t;
    const auto src = it->second.data();
    std::copy(src.begin(), src.end(), target.mutable_data().begin());
  }
}

void write_model(const std::filesystem::path &path, std::vector<NamedTensor> records,
                 const std::vector<NamedTensor> &params) {
  records.insert(records.end(), params.begin(), params.end());
  write_file_bytes(path, encode_checkpoint(records));
}

}  // namespace

void save_sopa(const SopaModel &model, const std::filesystem::path &path) {
  write_model(path, config_meta(model.config, 1), model.parameters());
}

SopaModel load_sopa(const std::filesystem::path &path) {
  const Loaded l = read_checkpoint(path);
  if (l.kind != 1) throw DataError(path.string() + " is not a composite-classifier checkpoint");
  SopaModel m = SopaModel::create(l.config, 0);
  fill_parameters(m.parameters(), l);
  return m;
}

void save_fopa(const FopaModel &model, const std::filesystem::path &path) {
  auto meta = config_meta(model.config, 2);
  put_meta(meta, "bg_encoder_frozen", model.bg_encoder_frozen ? 1 : 0);
  write_model(path, std::move(meta), model.parameters());
}

FopaModel load_fopa(const std::filesystem::path &path) {
  const Loaded l = read_checkpoint(path);
  if (l.kind != 2) throw DataError(path.string() + " is not a dense-model checkpoint");
  FopaModel m = FopaModel::create(l.config, 0);
  fill_parameters(m.parameters(), l);
  auto it = l.meta.find("bg_encoder_frozen");
  if (it != l.meta.end() && it->second != 0) {
    m.bg_encoder_frozen = true;
    std::vector<NamedTensor> enc;
    m.bg_encoder.append_parameters("", enc);
    for (auto &[name, t] : enc) t.set_requires_grad(false);
  }
  return m;
}

std::string checkpoint_kind(const std::filesystem::path &path) {
  const double kind = read_checkpoint(path).kind;
  if (kind == 1) return "sopa";
  if (kind == 2) return "fopa";
  throw DataError(path.string() + " has unknown checkpoint kind");
}

}  // namespace fopa
