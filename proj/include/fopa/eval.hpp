// SPDX-License-Identifier: Apache-2.0
//
// Annotated-pixel evaluation, enumeration score maps, best/worst placement
// selection, analytic FLOPs and the timing harness.

#ifndef FOPA_EVAL_HPP
#define FOPA_EVAL_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fopa/metrics.hpp"
#include "fopa/models.hpp"
#include "fopa/scene.hpp"

namespace fopa {

struct ScoreMap {
  int width = 0;
  int height = 0;
  std::vector<double> scores;  // row-major
  double at(int x, int y) const { return scores[static_cast<std::size_t>(y) * width + x]; }
};

struct SplitEvaluation {
  ConfusionCounts counts;
  ClassificationMetrics metrics;
  std::size_t pairs = 0;
};

SplitEvaluation evaluate_fopa(const FopaModel &model, const Corpus &corpus,
                              const std::string &split, double threshold = 0.5);
SplitEvaluation evaluate_sopa(const SopaModel &model, const Corpus &corpus,
                              const std::string &split, double threshold = 0.5);

/// One dense pass over the pair.
ScoreMap fopa_score_map(const FopaModel &model, const Background &bg, const ForegroundObject &fg,
                        double scale);
/// One composite-classifier pass per grid location.
ScoreMap sopa_enumerate_map(const Background &bg, const ForegroundObject &fg, double scale,
                            const SopaModel &sopa);

struct Selection {
  int x = 0;
  int y = 0;
  double score = 0.0;
  Composite composite;
};

struct SelectedComposites {
  Selection best;
  Selection worst;
};

/// Arg-max and arg-min of the map; ties go to the first location in
/// row-major order.
SelectedComposites select_composites(const ScoreMap &map, const Background &bg,
                                     const ForegroundObject &fg, double scale);

// ---- analytic FLOPs --------------------------------------------------------

/// One counted layer. Kinds: conv, depthwise, linear, pool, activation,
/// sigmoid, add, affine, upsample, concat.
struct LayerSpec {
  std::string kind;
  std::size_t out_h = 1, out_w = 1;
  std::size_t in_channels = 0, out_channels = 0;
  std::size_t kernel = 1;
  std::size_t elements = 0;  // elementwise kinds
};

/// Multiply and add counted separately: conv 2*H'*W'*Co*(Ci*k^2+1),
/// depthwise 2*H*W*d*k^2, linear 2*F*G, pooling and activations 1 per
/// element. CountingError on an unknown kind.
double count_flops(const std::vector<LayerSpec> &layers);

std::vector<LayerSpec> sopa_layers(const ModelConfig &config);
std::vector<LayerSpec> fopa_layers(const ModelConfig &config);

struct FlopsSummary {
  double sopa_per_pass = 0.0;
  double sopa_per_map = 0.0;  // per pass times H*W
  double fopa_per_pass = 0.0;
  double fopa_per_map = 0.0;  // one pass
  double enumeration_to_dense() const { return sopa_per_map / fopa_per_map; }
};

FlopsSummary flops_summary(const ModelConfig &sopa_config, const ModelConfig &fopa_config);

// ---- timing ----------------------------------------------------------------

struct BenchOptions {
  int repetitions = 10;
  int warmup = 3;
  int enumeration_repetitions = 3;  // full direct enumeration maps timed
  bool measure_enumeration = true;
};

struct BenchReport {
  std::string method;
  double time_single_s = 0.0;
  double time_all_s = 0.0;
  double time_all_measured_s = 0.0;  // enumeration only; 0 when not measured
  std::uint64_t passes_per_map = 0;
  double flops_per_pass = 0.0;
  double flops_per_map = 0.0;
  double param_memory_mb = 0.0;
  bool has_accuracy = false;
  ClassificationMetrics accuracy;
};

struct BenchResult {
  BenchReport sopa;
  BenchReport fopa;
  double measured_speedup() const { return sopa.time_all_s / fopa.time_all_s; }
};

/// Times both paths on one (background, foreground, scale) sample.
BenchResult benchmark(const SopaModel &sopa, const FopaModel &fopa, const Background &bg,
                      const ForegroundObject &fg, double scale, const BenchOptions &options);

double median(std::vector<double> values);
double param_memory_mb(std::span<const NamedTensor> params);

/// Tab-separated comparison table preceded by '#' notes.
std::string format_bench_table(const BenchResult &result, const FlopsSummary &full_flops);
/// key=value lines for the same figures.
std::string format_bench_values(const BenchResult &result, const FlopsSummary &full_flops);

}  // namespace fopa

#endif  // FOPA_EVAL_HPP
