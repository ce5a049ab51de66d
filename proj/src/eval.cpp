// SPDX-License-Identifier: Apache-2.0
#include "fopa/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>

#include "fopa/error.hpp"
#include "fopa/key_values.hpp"

namespace fopa {

namespace {

std::vector<int> labels_of(const AnnotatedPair &p) {
  std::vector<int> out;
  for (const auto &a : p.annotations) out.push_back(a.label);
  return out;
}

SplitEvaluation finish(ConfusionCounts counts, std::size_t pairs) {
  SplitEvaluation e;
  e.counts = counts;
  e.pairs = pairs;
  e.metrics = f1_and_bacc(counts);
  return e;
}

}  // namespace

SplitEvaluation evaluate_fopa(const FopaModel &model, const Corpus &corpus,
                              const std::string &split, double threshold) {
  ConfusionCounts counts;
  const auto &pairs = corpus.split(split);
  for (const auto &p : pairs) {
    const ScoreMap map =
        fopa_score_map(model, corpus.background(p.bg_id), corpus.foreground(p.fg_id), p.scale);
    for (const auto &a : p.annotations) counts.add(map.at(a.x, a.y) >= threshold ? 1 : 0, a.label);
  }
  return finish(counts, pairs.size());
}

SplitEvaluation evaluate_sopa(const SopaModel &model, const Corpus &corpus,
                              const std::string &split, double threshold) {
  ConfusionCounts counts;
  const auto &pairs = corpus.split(split);
  for (const auto &p : pairs) {
    const auto &bg = corpus.background(p.bg_id);
    const auto &fg = corpus.foreground(p.fg_id);
    std::vector<Tensor> samples;
    for (const auto &a : p.annotations) {
      samples.push_back(composite_tensor(compose(bg, fg, {p.scale, a.x, a.y})));
    }
    const Tensor scores = sigmoid(sopa_forward(model, stack_samples(samples)).logits);
    const auto c = confusion(scores.data(), labels_of(p), threshold);
    counts += c;
  }
  return finish(counts, pairs.size());
}

ScoreMap fopa_score_map(const FopaModel &model, const Background &bg, const ForegroundObject &fg,
                        double scale) {
  const FopaOutput out = fopa_forward(model, make_fopa_batch(bg, fg, scale, model.config));
  ScoreMap map;
  map.width = map.height = model.config.image_size;
  map.scores.assign(out.scores.data().begin(), out.scores.data().end());
  return map;
}

ScoreMap sopa_enumerate_map(const Background &bg, const ForegroundObject &fg, double scale,
                            const SopaModel &sopa) {
  const int size = sopa.config.image_size;
  if (bg.pixels.width != size || bg.pixels.height != size) {
    throw ConfigError("background does not match the classifier grid");
  }
  ScoreMap map;
  map.width = map.height = size;
  map.scores.resize(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const Tensor logit = sopa_forward(sopa, composite_tensor(compose(bg, fg, {scale, x, y}))).logits;
      map.scores[static_cast<std::size_t>(y) * size + x] = sigmoid(logit).item();
    }
  }
  return map;
}

SelectedComposites select_composites(const ScoreMap &map, const Background &bg,
                                     const ForegroundObject &fg, double scale) {
  if (map.scores.empty()) throw InputError("cannot select from an empty score map");
  std::size_t best = 0, worst = 0;
  for (std::size_t i = 1; i < map.scores.size(); ++i) {
    if (map.scores[i] > map.scores[best]) best = i;
    if (map.scores[i] < map.scores[worst]) worst = i;
  }
  auto pick = [&](std::size_t i) {
    Selection s;
    s.x = static_cast<int>(i % map.width);
    s.y = static_cast<int>(i / map.width);
    s.score = map.scores[i];
    s.composite = compose(bg, fg, {scale, s.x, s.y});
    return s;
  };
  return {pick(best), pick(worst)};
}

// ---- FLOPs -----------------------------------------------------------------

double count_flops(const std::vector<LayerSpec> &layers) {
  double total = 0.0;
  for (const LayerSpec &l : layers) {
    const double hw = static_cast<double>(l.out_h) * l.out_w;
    const double k2 = static_cast<double>(l.kernel) * l.kernel;
    if (l.kind == "conv") {
      total += 2.0 * hw * l.out_channels * (l.in_channels * k2 + 1.0);
    } else if (l.kind == "depthwise") {
      total += 2.0 * hw * l.out_channels * k2;
    } else if (l.kind == "linear") {
      total += 2.0 * l.in_channels * l.out_channels;
    } else if (l.kind == "pool" || l.kind == "activation" || l.kind == "sigmoid" ||
               l.kind == "add") {
      total += static_cast<double>(l.elements);
    } else if (l.kind == "affine") {
      total += 2.0 * l.elements;
    } else if (l.kind == "upsample" || l.kind == "concat") {
      // pure data movement
    } else {
      throw CountingError("unknown layer kind '" + l.kind + "'");
    }
  }
  return total;
}

namespace {

LayerSpec conv(std::size_t hw, std::size_t ci, std::size_t co, std::size_t k) {
  return {"conv", hw, hw, ci, co, k, 0};
}
LayerSpec elementwise(const char *kind, std::size_t n) { return {kind, 1, 1, 0, 0, 1, n}; }
LayerSpec linear_layer(std::size_t f, std::size_t g) { return {"linear", 1, 1, f, g, 1, 0}; }

void encoder_layers(const ModelConfig &c, std::vector<LayerSpec> &out) {
  std::size_t in_ch = c.input_channels;
  for (int l = 1; l <= c.stages; ++l) {
    const std::size_t hw = c.image_size >> l;
    const std::size_t ch = c.stage_channels(l);
    const std::size_t n = hw * hw * ch;
    out.push_back(conv(hw, in_ch, ch, 3));
    out.push_back(elementwise("affine", n));
    out.push_back(elementwise("activation", n));
    out.push_back(conv(hw, ch, ch, 1));
    out.push_back(elementwise("affine", n));
    out.push_back(elementwise("add", n));
    out.push_back(elementwise("activation", n));
    in_ch = ch;
  }
}

}  // namespace

std::vector<LayerSpec> sopa_layers(const ModelConfig &c) {
  std::vector<LayerSpec> out;
  encoder_layers(c, out);
  const std::size_t last = c.image_size >> c.stages;
  out.push_back(elementwise("pool", last * last * c.mimic_dim()));
  out.push_back(linear_layer(c.mimic_dim(), 1));
  return out;
}

std::vector<LayerSpec> fopa_layers(const ModelConfig &c) {
  std::vector<LayerSpec> out;
  encoder_layers(c, out);  // foreground
  encoder_layers(c, out);  // background
  // Decoder, coarse to fine.
  std::size_t prev = c.mimic_dim();
  auto level = [&](std::size_t hw, std::size_t skip, std::size_t out_ch) {
    out.push_back(elementwise("upsample", hw * hw * prev));
    out.push_back(elementwise("concat", hw * hw * (prev + skip)));
    out.push_back(conv(hw, prev + skip, out_ch, 3));
    out.push_back(elementwise("activation", hw * hw * out_ch));
    out.push_back(conv(hw, out_ch, out_ch, 3));
    out.push_back(elementwise("activation", hw * hw * out_ch));
    prev = out_ch;
  };
  for (int l = c.stages - 1; l >= 1; --l) {
    level(c.image_size >> l, c.stage_channels(l), l == 1 ? c.feature_dim : c.stage_channels(l));
  }
  level(c.image_size, c.input_channels, c.feature_dim);

  const std::size_t d = c.feature_dim;
  const std::size_t k = c.kernel_size;
  for (int s = 0; s < c.n_scales; ++s) {
    const std::size_t hw = c.image_size >> s;
    const std::size_t stage_hw = c.image_size >> (c.stages - s);
    const std::size_t vec = c.stage_channels(c.stages - s) + c.onehot_bins;
    out.push_back(elementwise("pool", stage_hw * stage_hw * c.stage_channels(c.stages - s)));
    if (c.fusion == FusionMode::kDynamic) {
      out.push_back(linear_layer(vec, 2 * k * k * d));
      out.push_back(elementwise("activation", 2 * k * k * d));
      out.push_back(linear_layer(2 * k * k * d, k * k * d));
      out.push_back({"depthwise", hw, hw, d, d, k, 0});
    } else {
      out.push_back(elementwise("concat", hw * hw * (d + vec)));
      out.push_back(conv(hw, d + vec, d, 1));
    }
    if (s == 1) {
      out.push_back(elementwise("upsample", hw * hw * d));
      out.push_back(elementwise("add", c.image_size * c.image_size * d));
    }
  }
  out.push_back(conv(c.image_size, d, 1, 1));
  out.push_back(elementwise("sigmoid", static_cast<std::size_t>(c.image_size) * c.image_size));
  return out;
}

FlopsSummary flops_summary(const ModelConfig &sopa_config, const ModelConfig &fopa_config) {
  FlopsSummary s;
  s.sopa_per_pass = count_flops(sopa_layers(sopa_config));
  s.sopa_per_map = s.sopa_per_pass * sopa_config.image_size * sopa_config.image_size;
  s.fopa_per_pass = count_flops(fopa_layers(fopa_config));
  s.fopa_per_map = s.fopa_per_pass;
  return s;
}

// ---- timing ----------------------------------------------------------------

double median(std::vector<double> values) {
  if (values.empty()) throw InputError("median of no values");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double param_memory_mb(std::span<const NamedTensor> params) {
  return static_cast<double>(parameter_count(params)) * sizeof(double) / (1024.0 * 1024.0);
}

namespace {

using Clock = std::chrono::steady_clock;

template <typename F>
double time_once(F &&f) {
  const auto start = Clock::now();
  f();
  return std::chrono::duration<double>(Clock::now() - start).count();
}

template <typename F>
double median_time(int warmup, int reps, F &&f) {
  for (int i = 0; i < warmup; ++i) f();
  std::vector<double> times;
  for (int i = 0; i < reps; ++i) times.push_back(time_once(f));
  return median(times);
}

}  // namespace

BenchResult benchmark(const SopaModel &sopa, const FopaModel &fopa, const Background &bg,
                      const ForegroundObject &fg, double scale, const BenchOptions &options) {
  if (options.repetitions < 10) throw ConfigError("benchmarks need at least 10 repetitions");
  if (options.warmup < 0) throw ConfigError("warm-up count must be >= 0");
  const std::size_t grid = static_cast<std::size_t>(sopa.config.image_size) * sopa.config.image_size;
  const FlopsSummary flops = flops_summary(sopa.config, fopa.config);

  BenchResult r;
  r.sopa.method = "SOPA";
  r.fopa.method = "FOPA";
  // One placement: build the composite, then score it, as enumeration does.
  // Successive repetitions walk the grid with a stride coprime to its size.
  std::size_t location = grid / 2;
  const auto single = [&] {
    location = (location + 2477) % grid;
    const int x = static_cast<int>(location % sopa.config.image_size);
    const int y = static_cast<int>(location / sopa.config.image_size);
    sigmoid(sopa_forward(sopa, composite_tensor(compose(bg, fg, {scale, x, y}))).logits).item();
  };
  for (int i = 0; i < options.warmup; ++i) single();
  // Single passes are spread over rounds interleaved with the whole-map
  // timings so both sample the same stretch of machine time.
  const int rounds = options.measure_enumeration ? std::max(1, options.enumeration_repetitions) : 1;
  std::vector<double> single_times, map_times;
  reset_pass_counts();
  for (int round = 0; round < rounds; ++round) {
    const int reps = options.repetitions * (round + 1) / rounds - options.repetitions * round / rounds;
    for (int i = 0; i < reps; ++i) single_times.push_back(time_once(single));
    if (options.measure_enumeration) {
      const std::uint64_t before = pass_counts().sopa;
      map_times.push_back(time_once([&] { sopa_enumerate_map(bg, fg, scale, sopa); }));
      r.sopa.passes_per_map = pass_counts().sopa - before;
    }
  }
  r.sopa.time_single_s = median(single_times);
  r.sopa.time_all_s = r.sopa.time_single_s * static_cast<double>(grid);
  if (options.measure_enumeration) {
    r.sopa.time_all_measured_s = median(map_times);
  } else {
    r.sopa.passes_per_map = grid;
  }
  r.sopa.flops_per_pass = flops.sopa_per_pass;
  r.sopa.flops_per_map = flops.sopa_per_map;
  r.sopa.param_memory_mb = param_memory_mb(sopa.parameters());

  const FopaBatch batch = make_fopa_batch(bg, fg, scale, fopa.config);
  r.fopa.time_single_s =
      median_time(options.warmup, options.repetitions, [&] { fopa_forward(fopa, batch); });
  r.fopa.time_all_s = r.fopa.time_single_s;
  reset_pass_counts();
  fopa_score_map(fopa, bg, fg, scale);
  r.fopa.passes_per_map = pass_counts().fopa;
  r.fopa.flops_per_pass = flops.fopa_per_pass;
  r.fopa.flops_per_map = flops.fopa_per_map;
  r.fopa.param_memory_mb = param_memory_mb(fopa.parameters());
  return r;
}

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string accuracy_cell(const BenchReport &r, bool f1) {
  if (!r.has_accuracy) return "-";
  return fixed(f1 ? r.accuracy.f1 : r.accuracy.bacc, 3);
}

}  // namespace

std::string format_bench_table(const BenchResult &result, const FlopsSummary &full_flops) {
  std::string out;
  out += "# FLOPs count multiply and add separately (2 per multiply-accumulate).\n";
  out += "# Memory-MB is parameter bytes / 2^20; activation memory is not included.\n";
  out += "# Time-a for SOPA is Time-s x H x W; measured enumeration: " +
         fixed(result.sopa.time_all_measured_s, 4) + " s.\n";
  out += "# Full-scale analytic FLOPs-G per map: SOPA " + fixed(full_flops.sopa_per_map / 1e9, 2) +
         ", FOPA " + fixed(full_flops.fopa_per_map / 1e9, 2) + " (ratio " +
         fixed(full_flops.enumeration_to_dense(), 1) + ").\n";
  out += "Method\tF1\tbAcc\tTime-s\tTime-a\tMemory-MB\tFLOPs-G\n";
  for (const BenchReport *r : {&result.sopa, &result.fopa}) {
    out += r->method + "\t" + accuracy_cell(*r, true) + "\t" + accuracy_cell(*r, false) + "\t" +
           fixed(r->time_single_s, 6) + "\t" + fixed(r->time_all_s, 6) + "\t" +
           fixed(r->param_memory_mb, 3) + "\t" + fixed(r->flops_per_map / 1e9, 4) + "\n";
  }
  return out;
}

std::string format_bench_values(const BenchResult &result, const FlopsSummary &full_flops) {
  KeyValues kv;
  for (const BenchReport *r : {&result.sopa, &result.fopa}) {
    const std::string p = r->method == "SOPA" ? "sopa." : "fopa.";
    if (r->has_accuracy) {
      kv.set(p + "f1", r->accuracy.f1);
      kv.set(p + "bacc", r->accuracy.bacc);
    }
    kv.set(p + "time_single_s", r->time_single_s);
    kv.set(p + "time_all_s", r->time_all_s);
    if (r->time_all_measured_s > 0.0) kv.set(p + "time_all_measured_s", r->time_all_measured_s);
    kv.set(p + "passes_per_map", static_cast<long long>(r->passes_per_map));
    kv.set(p + "flops_per_pass", r->flops_per_pass);
    kv.set(p + "flops_per_map", r->flops_per_map);
    kv.set(p + "param_memory_mb", r->param_memory_mb);
  }
  kv.set("measured_speedup", result.measured_speedup());
  kv.set("full_scale.sopa_flops_per_map", full_flops.sopa_per_map);
  kv.set("full_scale.fopa_flops_per_map", full_flops.fopa_per_map);
  kv.set("full_scale.enumeration_to_dense", full_flops.enumeration_to_dense());
  return kv.str();
}

}  // namespace fopa
