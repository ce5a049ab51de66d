// SPDX-License-Identifier: Apache-2.0
#include "fopa/fopa.h"

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <memory>
#include <new>
#include <string>
#include <variant>

#include "fopa/error.hpp"
#include "fopa/eval.hpp"
#include "fopa/image.hpp"
#include "fopa/training.hpp"

struct fopa_corpus {
  fopa::Corpus corpus;
};

struct fopa_model {
  std::variant<fopa::SopaModel, fopa::FopaModel> model;
};

namespace {

thread_local std::string last_error;

fopa_status fail(fopa_status status, const std::string &message) {
  last_error = message;
  return status;
}

fopa_status status_of(fopa::ErrorKind kind) {
  using K = fopa::ErrorKind;
  switch (kind) {
    case K::kDimension: return FOPA_ERR_DIMENSION;
    case K::kContract: return FOPA_ERR_CONTRACT;
    case K::kInput: return FOPA_ERR_INPUT;
    case K::kParse: return FOPA_ERR_PARSE;
    case K::kData: return FOPA_ERR_DATA;
    case K::kConfig: return FOPA_ERR_CONFIG;
    case K::kTransfer: return FOPA_ERR_TRANSFER;
    case K::kTraining: return FOPA_ERR_TRAINING;
    case K::kNumeric: return FOPA_ERR_NUMERIC;
    case K::kCounting: return FOPA_ERR_COUNTING;
    case K::kIo: return FOPA_ERR_IO;
  }
  return FOPA_ERR_INTERNAL;
}

template <typename F>
fopa_status guarded(F &&body) {
  try {
    body();
    last_error.clear();
    return FOPA_OK;
  } catch (const fopa::Error &e) {
    return fail(status_of(e.kind()), e.what());
  } catch (const std::bad_alloc &) {
    return fail(FOPA_ERR_INTERNAL, "out of memory");
  } catch (const std::exception &e) {
    return fail(FOPA_ERR_INTERNAL, e.what());
  }
}

#define FOPA_REQUIRE(cond, what)                               \
  do {                                                         \
    if (!(cond)) return fail(FOPA_ERR_ARGUMENT, (what));       \
  } while (0)

fopa::ModelConfig model_config(const fopa_train_options &o) {
  fopa::ModelConfig m;
  m.image_size = o.image_size;
  m.stages = o.stages;
  m.base_channels = o.base_channels;
  m.feature_dim = o.feature_dim;
  m.kernel_size = o.kernel_size;
  m.n_scales = o.n_scales;
  if (o.fusion != FOPA_FUSION_DYNAMIC && o.fusion != FOPA_FUSION_CONCAT) {
    throw fopa::ConfigError("unknown fusion mode " + std::to_string(o.fusion));
  }
  m.fusion = o.fusion == FOPA_FUSION_CONCAT ? fopa::FusionMode::kConcat : fopa::FusionMode::kDynamic;
  m.onehot_bins = o.onehot_bins;
  return m;
}

fopa::TrainConfig train_config(const fopa_train_options &o) {
  fopa::TrainConfig c;
  c.epochs = o.epochs;
  c.lr = o.lr;
  c.lr_halving_period = o.lr_halving_period;
  c.lambda_mimic = o.lambda_mimic;
  c.batch_size = o.batch_size;
  c.seed = o.seed;
  c.transfer_prior = o.transfer_prior != 0;
  c.freeze_encoder = o.freeze_encoder != 0;
  c.mimic_enabled = o.mimic_enabled != 0;
  c.model = model_config(o);
  return c;
}

fopa::EpochCallback forward_epochs(fopa_epoch_fn fn, void *user) {
  if (!fn) return {};
  return [fn, user](const fopa::EpochStats &s) {
    const fopa_epoch_stats c{s.epoch, s.lr, s.bce, s.mimic, s.total, s.train_bacc,
                             s.bg_encoder_checksum};
    fn(&c, user);
  };
}

bool valid_split(const char *split) {
  return split && (std::strcmp(split, "train") == 0 || std::strcmp(split, "test") == 0);
}

fopa_pair_info pair_info(const fopa::AnnotatedPair &p, bool test) {
  return fopa_pair_info{p.pair_id, p.bg_id, p.fg_id, p.scale, p.annotations.size(), test ? 1 : 0};
}

const fopa::AnnotatedPair *find_pair(const fopa::Corpus &c, int pair_id, bool *test) {
  for (const auto &p : c.train) {
    if (p.pair_id == pair_id) {
      *test = false;
      return &p;
    }
  }
  for (const auto &p : c.test) {
    if (p.pair_id == pair_id) {
      *test = true;
      return &p;
    }
  }
  throw fopa::DataError("no pair with id " + std::to_string(pair_id));
}

char *copy_string(const std::string &s) {
  char *out = static_cast<char *>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

}  // namespace

extern "C" {

const char *fopa_status_name(fopa_status status) {
  switch (status) {
    case FOPA_OK: return "ok";
    case FOPA_ERR_DIMENSION: return "dimension error";
    case FOPA_ERR_CONTRACT: return "contract error";
    case FOPA_ERR_INPUT: return "input error";
    case FOPA_ERR_PARSE: return "parse error";
    case FOPA_ERR_DATA: return "data error";
    case FOPA_ERR_CONFIG: return "config error";
    case FOPA_ERR_TRANSFER: return "transfer error";
    case FOPA_ERR_TRAINING: return "training error";
    case FOPA_ERR_NUMERIC: return "numeric error";
    case FOPA_ERR_COUNTING: return "counting error";
    case FOPA_ERR_IO: return "io error";
    case FOPA_ERR_ARGUMENT: return "invalid argument";
    case FOPA_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char *fopa_last_error(void) { return last_error.c_str(); }

const char *fopa_version(void) { return "0.1.0"; }

void fopa_string_free(char *text) { std::free(text); }

// ---- corpus ----------------------------------------------------------------

void fopa_corpus_options_default(fopa_corpus_options *options) {
  if (!options) return;
  const fopa::CorpusConfig d;
  *options = fopa_corpus_options{d.seed, d.n_backgrounds, d.n_foregrounds, d.scales_per_pair,
                                 d.image_size};
}

fopa_status fopa_corpus_generate(const fopa_corpus_options *options, fopa_corpus **out) {
  FOPA_REQUIRE(options && out, "null argument");
  *out = nullptr;
  return guarded([&] {
    fopa::CorpusConfig c;
    c.seed = options->seed;
    c.n_backgrounds = options->n_backgrounds;
    c.n_foregrounds = options->n_foregrounds;
    c.scales_per_pair = options->scales_per_pair;
    c.image_size = options->image_size;
    auto h = std::make_unique<fopa_corpus>();
    h->corpus = fopa::generate_corpus(c);
    *out = h.release();
  });
}

fopa_status fopa_corpus_load(const char *dir, fopa_corpus **out) {
  FOPA_REQUIRE(dir && out, "null argument");
  *out = nullptr;
  return guarded([&] {
    auto h = std::make_unique<fopa_corpus>();
    h->corpus = fopa::load_corpus(dir);
    *out = h.release();
  });
}

fopa_status fopa_corpus_save(const fopa_corpus *corpus, const char *dir) {
  FOPA_REQUIRE(corpus && dir, "null argument");
  return guarded([&] { fopa::save_corpus(corpus->corpus, dir); });
}

void fopa_corpus_free(fopa_corpus *corpus) { delete corpus; }

fopa_status fopa_corpus_pair_count(const fopa_corpus *corpus, const char *split, size_t *count) {
  FOPA_REQUIRE(corpus && count, "null argument");
  FOPA_REQUIRE(valid_split(split), "split must be 'train' or 'test'");
  *count = corpus->corpus.split(split).size();
  last_error.clear();
  return FOPA_OK;
}

fopa_status fopa_corpus_pair_at(const fopa_corpus *corpus, const char *split, size_t index,
                                fopa_pair_info *out) {
  FOPA_REQUIRE(corpus && out, "null argument");
  FOPA_REQUIRE(valid_split(split), "split must be 'train' or 'test'");
  const auto &pairs = corpus->corpus.split(split);
  FOPA_REQUIRE(index < pairs.size(), "pair index out of range");
  *out = pair_info(pairs[index], std::strcmp(split, "test") == 0);
  last_error.clear();
  return FOPA_OK;
}

fopa_status fopa_corpus_find_pair(const fopa_corpus *corpus, int pair_id, fopa_pair_info *out) {
  FOPA_REQUIRE(corpus && out, "null argument");
  return guarded([&] {
    bool test = false;
    const auto *p = find_pair(corpus->corpus, pair_id, &test);
    *out = pair_info(*p, test);
  });
}

int fopa_corpus_image_size(const fopa_corpus *corpus) {
  return corpus ? corpus->corpus.config.image_size : 0;
}

// ---- models ----------------------------------------------------------------

void fopa_train_options_default(fopa_train_options *options) {
  if (!options) return;
  const fopa::TrainConfig t;
  const fopa::ModelConfig m = fopa::ModelConfig::desk();
  *options = fopa_train_options{t.epochs,
                                t.lr,
                                t.lr_halving_period,
                                t.lambda_mimic,
                                t.batch_size,
                                t.seed,
                                t.transfer_prior ? 1 : 0,
                                t.freeze_encoder ? 1 : 0,
                                t.mimic_enabled ? 1 : 0,
                                m.image_size,
                                m.stages,
                                m.base_channels,
                                m.feature_dim,
                                m.kernel_size,
                                m.n_scales,
                                m.fusion == fopa::FusionMode::kConcat ? FOPA_FUSION_CONCAT
                                                                      : FOPA_FUSION_DYNAMIC,
                                m.onehot_bins};
}

fopa_status fopa_train_sopa(const fopa_corpus *corpus, const fopa_train_options *options,
                            fopa_epoch_fn on_epoch, void *user, fopa_model **out) {
  FOPA_REQUIRE(corpus && options && out, "null argument");
  *out = nullptr;
  return guarded([&] {
    auto h = std::make_unique<fopa_model>();
    h->model = fopa::train_sopa(corpus->corpus, train_config(*options),
                                forward_epochs(on_epoch, user));
    *out = h.release();
  });
}

fopa_status fopa_train_fopa(const fopa_corpus *corpus, const fopa_model *sopa,
                            const fopa_train_options *options, fopa_epoch_fn on_epoch,
                            void *user, fopa_model **out) {
  FOPA_REQUIRE(corpus && options && out, "null argument");
  *out = nullptr;
  if (sopa) {
    FOPA_REQUIRE(std::holds_alternative<fopa::SopaModel>(sopa->model),
                 "teacher handle is not a composite classifier");
  }
  return guarded([&] {
    const fopa::TrainConfig config = train_config(*options);
    fopa::SopaModel placeholder;
    if (!sopa) {
      if (config.transfer_prior || config.uses_mimic()) {
        throw fopa::ConfigError("prior transfer and mimicking need a composite classifier");
      }
      placeholder.config = config.model;
    }
    const fopa::SopaModel &teacher =
        sopa ? std::get<fopa::SopaModel>(sopa->model) : placeholder;
    auto h = std::make_unique<fopa_model>();
    h->model = fopa::train_fopa(corpus->corpus, teacher, config, forward_epochs(on_epoch, user));
    *out = h.release();
  });
}

fopa_status fopa_select_mimic_weight(const fopa_corpus *corpus, const fopa_train_options *options,
                                     const double *candidates, size_t n_candidates, int epochs,
                                     double validation_share, double *chosen,
                                     double *validation_bacc) {
  FOPA_REQUIRE(corpus && options && candidates && chosen, "null argument");
  return guarded([&] {
    const auto r = fopa::cross_validate_mimic_weight(
        corpus->corpus, train_config(*options), std::span(candidates, n_candidates), epochs,
        validation_share);
    *chosen = r.chosen;
    if (validation_bacc) {
      std::copy(r.validation_bacc.begin(), r.validation_bacc.end(), validation_bacc);
    }
  });
}

fopa_status fopa_model_load(const char *path, fopa_model **out) {
  FOPA_REQUIRE(path && out, "null argument");
  *out = nullptr;
  return guarded([&] {
    auto h = std::make_unique<fopa_model>();
    if (fopa::checkpoint_kind(path) == "sopa") {
      h->model = fopa::load_sopa(path);
    } else {
      h->model = fopa::load_fopa(path);
    }
    *out = h.release();
  });
}

fopa_status fopa_model_save(const fopa_model *model, const char *path) {
  FOPA_REQUIRE(model && path, "null argument");
  return guarded([&] {
    if (const auto *s = std::get_if<fopa::SopaModel>(&model->model)) {
      fopa::save_sopa(*s, path);
    } else {
      fopa::save_fopa(std::get<fopa::FopaModel>(model->model), path);
    }
  });
}

void fopa_model_free(fopa_model *model) { delete model; }

fopa_status fopa_model_describe(const fopa_model *model, fopa_model_info *out) {
  FOPA_REQUIRE(model && out, "null argument");
  return guarded([&] {
    const bool sopa = std::holds_alternative<fopa::SopaModel>(model->model);
    const fopa::ModelConfig &c = sopa ? std::get<fopa::SopaModel>(model->model).config
                                      : std::get<fopa::FopaModel>(model->model).config;
    const auto params = sopa ? std::get<fopa::SopaModel>(model->model).parameters()
                             : std::get<fopa::FopaModel>(model->model).parameters();
    *out = fopa_model_info{sopa ? FOPA_MODEL_SOPA : FOPA_MODEL_FOPA,
                           c.image_size,
                           c.stages,
                           c.base_channels,
                           c.feature_dim,
                           c.kernel_size,
                           c.n_scales,
                           c.fusion == fopa::FusionMode::kConcat ? FOPA_FUSION_CONCAT
                                                                 : FOPA_FUSION_DYNAMIC,
                           c.onehot_bins,
                           sopa ? 0 : (std::get<fopa::FopaModel>(model->model).bg_encoder_frozen ? 1 : 0),
                           fopa::parameter_count(params),
                           fopa::checksum(params)};
  });
}

// ---- evaluation ------------------------------------------------------------

fopa_status fopa_evaluate(const fopa_model *model, const fopa_corpus *corpus, const char *split,
                          double threshold, fopa_eval_result *out) {
  FOPA_REQUIRE(model && corpus && out, "null argument");
  FOPA_REQUIRE(valid_split(split), "split must be 'train' or 'test'");
  return guarded([&] {
    const fopa::SplitEvaluation e =
        std::holds_alternative<fopa::SopaModel>(model->model)
            ? fopa::evaluate_sopa(std::get<fopa::SopaModel>(model->model), corpus->corpus, split,
                                  threshold)
            : fopa::evaluate_fopa(std::get<fopa::FopaModel>(model->model), corpus->corpus, split,
                                  threshold);
    const auto u = [](std::int64_t v) { return static_cast<std::uint64_t>(v); };
    *out = fopa_eval_result{u(e.counts.tp), u(e.counts.fp), u(e.counts.tn), u(e.counts.fn),
                            e.metrics.f1, e.metrics.bacc, e.pairs};
  });
}

fopa_status fopa_score_map(const fopa_model *model, const fopa_corpus *corpus, int pair_id,
                           double *scores, size_t capacity, int *width, int *height) {
  FOPA_REQUIRE(model && corpus && scores && width && height, "null argument");
  const int side = corpus->corpus.config.image_size;
  FOPA_REQUIRE(capacity >= static_cast<size_t>(side) * side, "score buffer too small");
  return guarded([&] {
    bool test = false;
    const auto *p = find_pair(corpus->corpus, pair_id, &test);
    const auto &bg = corpus->corpus.background(p->bg_id);
    const auto &fg = corpus->corpus.foreground(p->fg_id);
    const fopa::ScoreMap map =
        std::holds_alternative<fopa::SopaModel>(model->model)
            ? fopa::sopa_enumerate_map(bg, fg, p->scale, std::get<fopa::SopaModel>(model->model))
            : fopa::fopa_score_map(std::get<fopa::FopaModel>(model->model), bg, fg, p->scale);
    std::copy(map.scores.begin(), map.scores.end(), scores);
    *width = map.width;
    *height = map.height;
  });
}

fopa_status fopa_write_heatmap(const double *scores, int width, int height, const char *path) {
  FOPA_REQUIRE(scores && path && width > 0 && height > 0, "invalid argument");
  return guarded([&] {
    const std::size_t n = static_cast<std::size_t>(width) * height;
    fopa::write_pnm(path, fopa::heatmap_image(std::span(scores, n), width, height));
  });
}

fopa_status fopa_select(const double *scores, int width, int height, fopa_selection *out) {
  FOPA_REQUIRE(scores && out && width > 0 && height > 0, "invalid argument");
  const std::size_t n = static_cast<std::size_t>(width) * height;
  std::size_t best = 0, worst = 0;
  for (std::size_t i = 1; i < n; ++i) {
    if (scores[i] > scores[best]) best = i;
    if (scores[i] < scores[worst]) worst = i;
  }
  *out = fopa_selection{static_cast<int>(best % width), static_cast<int>(best / width),
                        scores[best],
                        static_cast<int>(worst % width), static_cast<int>(worst / width),
                        scores[worst]};
  last_error.clear();
  return FOPA_OK;
}

fopa_status fopa_write_composite(const fopa_corpus *corpus, int pair_id, int x, int y,
                                 const char *path) {
  FOPA_REQUIRE(corpus && path, "null argument");
  return guarded([&] {
    bool test = false;
    const auto *p = find_pair(corpus->corpus, pair_id, &test);
    const int side = corpus->corpus.config.image_size;
    if (x < 0 || y < 0 || x >= side || y >= side) {
      throw fopa::InputError("placement (" + std::to_string(x) + ", " + std::to_string(y) +
                             ") lies outside the " + std::to_string(side) + "x" +
                             std::to_string(side) + " background");
    }
    const fopa::Composite c = fopa::compose(corpus->corpus.background(p->bg_id),
                                            corpus->corpus.foreground(p->fg_id),
                                            fopa::Placement{p->scale, x, y});
    fopa::write_pnm(path, c.rgb);
  });
}

// ---- efficiency ------------------------------------------------------------

void fopa_bench_options_default(fopa_bench_options *options) {
  if (!options) return;
  const fopa::BenchOptions d;
  *options = fopa_bench_options{d.repetitions, d.warmup, d.enumeration_repetitions,
                                d.measure_enumeration ? 1 : 0, 1};
}

fopa_status fopa_bench(const fopa_model *sopa, const fopa_model *fopa, const fopa_corpus *corpus,
                       int pair_id, const fopa_bench_options *options, char **table,
                       char **values) {
  FOPA_REQUIRE(sopa && fopa && corpus && options && table && values, "null argument");
  FOPA_REQUIRE(std::holds_alternative<fopa::SopaModel>(sopa->model),
               "first model must be a composite classifier");
  FOPA_REQUIRE(std::holds_alternative<fopa::FopaModel>(fopa->model),
               "second model must be a dense placement model");
  *table = nullptr;
  *values = nullptr;
  return guarded([&] {
    const auto &s = std::get<fopa::SopaModel>(sopa->model);
    const auto &f = std::get<fopa::FopaModel>(fopa->model);
    bool test = false;
    const auto *p = find_pair(corpus->corpus, pair_id, &test);
    fopa::BenchOptions o;
    o.repetitions = options->repetitions;
    o.warmup = options->warmup;
    o.enumeration_repetitions = options->enumeration_repetitions;
    o.measure_enumeration = options->measure_enumeration != 0;
    fopa::BenchResult r = fopa::benchmark(s, f, corpus->corpus.background(p->bg_id),
                                          corpus->corpus.foreground(p->fg_id), p->scale, o);
    if (options->with_accuracy) {
      r.sopa.has_accuracy = r.fopa.has_accuracy = true;
      r.sopa.accuracy = fopa::evaluate_sopa(s, corpus->corpus, "test").metrics;
      r.fopa.accuracy = fopa::evaluate_fopa(f, corpus->corpus, "test").metrics;
    }
    const fopa::FlopsSummary full =
        fopa::flops_summary(fopa::ModelConfig::full_scale(), fopa::ModelConfig::full_scale());
    std::string t = fopa::format_bench_table(r, full);
    std::string v = fopa::format_bench_values(r, full);
    *table = copy_string(t);
    try {
      *values = copy_string(v);
    } catch (...) {
      std::free(*table);
      *table = nullptr;
      throw;
    }
  });
}

}  // extern "C"
