// SPDX-License-Identifier: Apache-2.0
//
// Slow (per-composite) and fast (dense) placement assessors built from the
// tensor ops: residual encoders, a U-Net background decoder, kernel
// generation units, the two fusion modes, checkpoints and checksums.

#ifndef FOPA_MODELS_HPP
#define FOPA_MODELS_HPP

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fopa/ops.hpp"
#include "fopa/scene.hpp"
#include "fopa/tensor.hpp"

namespace fopa {

using Rng = std::mt19937_64;
using NamedTensor = std::pair<std::string, Tensor>;

enum class FusionMode { kDynamic, kConcat };

const char *fusion_name(FusionMode mode);
FusionMode parse_fusion(const std::string &name);

struct ModelConfig {
  int image_size = 64;
  int stages = 4;
  int base_channels = 16;  // stage l has base * 2^(l-1) channels
  int input_channels = 4;  // RGB + mask
  int feature_dim = 16;    // per-pixel fused feature width
  int kernel_size = 3;
  int n_scales = 2;
  FusionMode fusion = FusionMode::kDynamic;
  int onehot_bins = 0;  // 0: centred canvas input, otherwise one-hot scale bins

  int stage_channels(int stage) const { return base_channels << (stage - 1); }
  // Width of the pooled composite feature, also the mimic target width.
  int mimic_dim() const { return stage_channels(stages); }
  void validate() const;

  static ModelConfig desk();
  static ModelConfig full_scale();
};

/// Stride-2 conv + per-channel affine + relu, then one residual 1x1 unit.
struct Encoder {
  struct Stage {
    Tensor conv, scale, shift;
    Tensor res_conv, res_scale, res_shift;
  };
  std::vector<Stage> stages;

  static Encoder create(int input_channels, int base_channels, int n_stages, Rng &rng);
  /// Feature maps from highest to lowest resolution.
  std::vector<Tensor> forward(const Tensor &x) const;
  void append_parameters(const std::string &prefix, std::vector<NamedTensor> &out) const;
};

struct DecoderOutput {
  Tensor full;  // N x d x H x W
  Tensor half;  // N x d x H/2 x W/2
};

/// U-Net decoder: upsample, concatenate the skip, two 3x3 conv + relu.
/// The last level concatenates the background RGB at full resolution.
struct Decoder {
  struct Level {
    Tensor w1, b1, w2, b2;
  };
  std::vector<Level> levels;  // coarse to fine

  static Decoder create(const ModelConfig &config, Rng &rng);
  DecoderOutput forward(std::span<const Tensor> skips, const Tensor &bg_rgb) const;
  void append_parameters(const std::string &prefix, std::vector<NamedTensor> &out) const;
};

/// Two fully connected layers mapping a pooled foreground vector to one
/// k x k filter per feature channel.
struct KernelGenerator {
  Tensor fc1_w, fc1_b, fc2_w, fc2_b;
  int channels = 0;
  int kernel_size = 0;

  static KernelGenerator create(int input_dim, int channels, int kernel_size, Rng &rng);
  /// N x input_dim -> N x channels x k x k.
  Tensor forward(const Tensor &pooled) const;
  void append_parameters(const std::string &prefix, std::vector<NamedTensor> &out) const;
};

/// Broadcast-concatenate fusion: [map, tile(v)] -> 1x1 conv -> d channels.
struct ConcatFuser {
  Tensor w, b;

  static ConcatFuser create(int map_channels, int vector_dim, int out_channels, Rng &rng);
  Tensor forward(const Tensor &map, const Tensor &pooled) const;
  void append_parameters(const std::string &prefix, std::vector<NamedTensor> &out) const;
};

/// Depthwise-filters the full map with the first kernels and, for two
/// scales, adds the upsampled filtered half map.
Tensor fuse_dynamic(const Tensor &full, const Tensor &half, const Tensor &kernels_full,
                    const Tensor &kernels_half, int n_scales);
Tensor fuse_concat(const Tensor &full, const Tensor &half, const ConcatFuser &fuse_full,
                   const ConcatFuser &fuse_half, const Tensor &pooled_full,
                   const Tensor &pooled_half, int n_scales);

struct SopaModel {
  ModelConfig config;
  Encoder encoder;
  Tensor head_w, head_b;

  static SopaModel create(const ModelConfig &config, std::uint64_t seed);
  std::vector<NamedTensor> parameters() const;
};

struct SopaOutput {
  Tensor logits;       // N x 1
  Tensor penultimate;  // N x mimic_dim
};

SopaOutput sopa_forward(const SopaModel &model, const Tensor &input);

struct FopaModel {
  ModelConfig config;
  Encoder fg_encoder;
  Encoder bg_encoder;
  Decoder decoder;
  std::vector<KernelGenerator> kernel_generators;  // one per scale, full first
  std::vector<ConcatFuser> fusers;                 // one per scale, full first
  Tensor classifier_w, classifier_b;
  Tensor mimic_w, mimic_b;
  bool bg_encoder_frozen = false;

  static FopaModel create(const ModelConfig &config, std::uint64_t seed);
  std::vector<NamedTensor> parameters() const;
  /// Parameters the optimizer may update (excludes a frozen background encoder).
  std::vector<NamedTensor> trainable_parameters() const;
};

struct FopaBatch {
  Tensor fg;            // N x 4 x H x W: object canvas + mask
  Tensor bg;            // N x 4 x H x W: background + zero mask
  Tensor scale_onehot;  // N x bins, one-hot variant only
  std::size_t size() const { return fg.defined() ? fg.dim(0) : 0; }
};

struct FopaOutput {
  Tensor scores;    // N x 1 x H x W, sigmoid of logits
  Tensor logits;    // N x 1 x H x W
  Tensor features;  // N x d x H x W
};

/// Background encoder features; constant when the encoder is frozen.
std::vector<Tensor> background_features(const FopaModel &model, const Tensor &bg);

/// One dense pass. `bg_features`, when given, replaces running the
/// background encoder.
FopaOutput fopa_forward(const FopaModel &model, const FopaBatch &batch,
                        const std::vector<Tensor> *bg_features = nullptr);
/// Mimic projection of the fused feature at the listed pixels: M x mimic_dim.
Tensor project_pixels(const FopaModel &model, const Tensor &features,
                      std::span<const PixelIndex> pixels);
/// Classifier applied to one M x d feature block: M x 1 logits.
Tensor classify_pixels(const FopaModel &model, const Tensor &pixel_features);

void transfer_background_prior(const SopaModel &sopa, FopaModel &fopa, bool freeze);

std::uint32_t checksum(std::span<const NamedTensor> tensors);
std::uint32_t encoder_checksum(const Encoder &encoder);
std::size_t parameter_count(std::span<const NamedTensor> tensors);

// Instrumentation: number of samples pushed through each forward.
struct PassCounts {
  std::uint64_t sopa = 0;
  std::uint64_t fopa = 0;
};
PassCounts pass_counts();
void reset_pass_counts();

// Input encoding: RGB / 255 followed by the {0,1} mask channel.
Tensor image_tensor(const Image &rgb, const Image &mask);
Tensor stack_samples(std::span<const Tensor> samples);
Tensor composite_tensor(const Composite &composite);

FopaBatch make_fopa_batch(const Corpus &corpus, std::span<const AnnotatedPair *const> pairs,
                          const ModelConfig &config);
FopaBatch make_fopa_batch(const Background &bg, const ForegroundObject &fg, double scale,
                          const ModelConfig &config);

// Checkpoints. Layout: "FOPA1\n", then per tensor (u32 name length, name,
// u32 rank, u32 dims..., f64 values), then a CRC32 of everything before it.
std::vector<std::uint8_t> encode_checkpoint(std::span<const NamedTensor> tensors);
std::vector<NamedTensor> decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_sopa(const SopaModel &model, const std::filesystem::path &path);
SopaModel load_sopa(const std::filesystem::path &path);
void save_fopa(const FopaModel &model, const std::filesystem::path &path);
FopaModel load_fopa(const std::filesystem::path &path);
/// "sopa" or "fopa", read from the checkpoint metadata.
std::string checkpoint_kind(const std::filesystem::path &path);

}  // namespace fopa

#endif  // FOPA_MODELS_HPP
