// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end over the C API.

#include <CLI11.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fopa/fopa.h"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct Failure {
  int code;
  std::string message;
};

int exit_code_for(fopa_status status) {
  switch (status) {
    case FOPA_OK: return kExitOk;
    case FOPA_ERR_CONFIG:
    case FOPA_ERR_ARGUMENT: return kExitUsage;
    case FOPA_ERR_NUMERIC: return kExitNumeric;
    default: return kExitData;
  }
}

void check(fopa_status status) {
  if (status != FOPA_OK) {
    throw Failure{exit_code_for(status),
                  std::string(fopa_status_name(status)) + ": " + fopa_last_error()};
  }
}

struct CorpusDeleter {
  void operator()(fopa_corpus *c) const { fopa_corpus_free(c); }
};
struct ModelDeleter {
  void operator()(fopa_model *m) const { fopa_model_free(m); }
};
using CorpusPtr = std::unique_ptr<fopa_corpus, CorpusDeleter>;
using ModelPtr = std::unique_ptr<fopa_model, ModelDeleter>;

CorpusPtr load_corpus(const std::string &dir) {
  fopa_corpus *c = nullptr;
  check(fopa_corpus_load(dir.c_str(), &c));
  return CorpusPtr(c);
}

// A checkpoint path, or a run directory holding model.ckpt.
ModelPtr load_model(const std::string &path) {
  const fs::path p = fs::is_directory(path) ? fs::path(path) / "model.ckpt" : fs::path(path);
  fopa_model *m = nullptr;
  check(fopa_model_load(p.string().c_str(), &m));
  return ModelPtr(m);
}

void make_dir(const std::string &dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Failure{kExitData, "cannot create " + dir + ": " + ec.message()};
}

// Echoes every option of the subcommand except the output location, so runs
// with identical flags write identical files.
void write_run_config(const CLI::App &sub, const std::string &dir) {
  std::ofstream out(fs::path(dir) / "run.cfg", std::ios::binary);
  out << "command=" << sub.get_name() << "\n";
  for (const CLI::Option *opt : sub.get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string &name = opt->get_lnames().front();
    if (name == "help" || name == "out") continue;
    std::string value;
    if (opt->count() > 0) {
      value = opt->as<std::string>();
    } else {
      value = opt->get_default_str();
    }
    out << name << "=" << value << "\n";
  }
  if (!out) throw Failure{kExitData, "cannot write run.cfg in " + dir};
}

bool on_off(const std::string &v) { return v == "on"; }

struct TrainFlags {
  std::string data, out, sopa;
  int epochs = 20;
  double lr = 0.0005;
  int halving = 2;
  int batch = 4;
  std::uint64_t seed = 1;
  double lambda = 16.0;
  std::string lambda_search = "off";
  std::string freeze = "on";
  std::string transfer = "on";
  std::string fusion = "dynamic";
  int scales = 2;
  std::string mimic = "on";
  int onehot_bins = 0;
};

fopa_train_options train_options(const TrainFlags &f) {
  fopa_train_options o;
  fopa_train_options_default(&o);
  o.epochs = f.epochs;
  o.lr = f.lr;
  o.lr_halving_period = f.halving;
  o.batch_size = f.batch;
  o.seed = f.seed;
  o.lambda_mimic = f.lambda;
  o.freeze_encoder = on_off(f.freeze);
  o.transfer_prior = on_off(f.transfer);
  o.mimic_enabled = on_off(f.mimic);
  o.fusion = f.fusion == "concat" ? FOPA_FUSION_CONCAT : FOPA_FUSION_DYNAMIC;
  o.n_scales = f.scales;
  o.onehot_bins = f.onehot_bins;
  return o;
}

struct EpochLog {
  std::ofstream file;
};

void log_line(EpochLog &log, const std::string &line) {
  std::cout << line << "\n" << std::flush;
  log.file << line << "\n" << std::flush;
}

void on_epoch(const fopa_epoch_stats *s, void *user) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d\t%.6g\t%.6f\t%.6f\t%.6f\t%.4f", s->epoch, s->lr, s->bce,
                s->mimic, s->total, s->train_bacc);
  log_line(*static_cast<EpochLog *>(user), buf);
}

EpochLog open_log(const std::string &dir) {
  EpochLog log;
  log.file.open(fs::path(dir) / "train.log", std::ios::binary);
  if (!log.file) throw Failure{kExitData, "cannot write train.log in " + dir};
  log_line(log, "epoch\tlr\tL_bce\tL_mimic\tL_total\ttrain_bAcc");
  return log;
}

void save_model(const fopa_model *m, const std::string &dir) {
  check(fopa_model_save(m, (fs::path(dir) / "model.ckpt").string().c_str()));
}

int pair_or_first_test(const fopa_corpus *corpus, std::optional<int> pair) {
  if (pair) return *pair;
  fopa_pair_info info;
  check(fopa_corpus_pair_at(corpus, "test", 0, &info));
  return info.pair_id;
}

std::vector<double> score_map(const fopa_model *model, const fopa_corpus *corpus, int pair_id,
                              int *width, int *height) {
  const int side = fopa_corpus_image_size(corpus);
  std::vector<double> scores(static_cast<std::size_t>(side) * side);
  check(fopa_score_map(model, corpus, pair_id, scores.data(), scores.size(), width, height));
  return scores;
}

std::string format3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

}  // namespace

int main(int argc, char **argv) {
  // Keep large tensor buffers on the heap instead of a fresh mapping per pass.
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
  CLI::App app{"Object placement assessment: corpus generation, training, evaluation, timing"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  // gen-data
  fopa_corpus_options corpus_opts;
  fopa_corpus_options_default(&corpus_opts);
  corpus_opts.n_backgrounds = 14;
  corpus_opts.n_foregrounds = 14;
  std::string gen_out;
  CLI::App *gen = app.add_subcommand("gen-data", "Generate the synthetic annotated corpus");
  gen->add_option("--seed", corpus_opts.seed, "Generator seed");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--n-bg", corpus_opts.n_backgrounds, "Number of backgrounds")
      ->check(CLI::Range(2, 10000));
  gen->add_option("--n-fg", corpus_opts.n_foregrounds, "Number of foreground objects")
      ->check(CLI::Range(2, 10000));
  gen->add_option("--scales", corpus_opts.scales_per_pair, "Scales per pair")
      ->check(CLI::Range(1, 64));
  gen->add_option("--image-size", corpus_opts.image_size, "Background side in pixels")
      ->check(CLI::Range(16, 1024));

  // train-sopa / train-fopa
  TrainFlags sopa_flags, fopa_flags;
  const auto on_off_check = CLI::IsMember({"on", "off"});
  auto add_common = [&](CLI::App *cmd, TrainFlags &f) {
    cmd->add_option("--data", f.data, "Corpus directory")->required();
    cmd->add_option("--out", f.out, "Run directory")->required();
    cmd->add_option("--epochs", f.epochs, "Training epochs")->check(CLI::NonNegativeNumber);
    cmd->add_option("--lr", f.lr, "Initial learning rate")->check(CLI::PositiveNumber);
    cmd->add_option("--lr-halving", f.halving, "Epochs between learning-rate halvings")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--batch-size", f.batch, "Pairs per step")->check(CLI::PositiveNumber);
    cmd->add_option("--seed", f.seed, "Initialisation and shuffling seed");
  };
  CLI::App *tsopa = app.add_subcommand("train-sopa", "Train the composite classifier");
  add_common(tsopa, sopa_flags);
  CLI::App *tfopa = app.add_subcommand("train-fopa", "Train the dense placement model");
  add_common(tfopa, fopa_flags);
  tfopa->add_option("--sopa", fopa_flags.sopa, "Composite classifier checkpoint or run directory");
  tfopa->add_option("--lambda", fopa_flags.lambda, "Mimic loss weight")
      ->check(CLI::NonNegativeNumber);
  tfopa->add_option("--lambda-search", fopa_flags.lambda_search,
                    "Choose the mimic weight on held-out training pairs first")
      ->check(on_off_check);
  tfopa->add_option("--freeze-encoder", fopa_flags.freeze, "Freeze the background encoder")
      ->check(on_off_check);
  tfopa->add_option("--transfer", fopa_flags.transfer, "Copy the classifier encoder")
      ->check(on_off_check);
  tfopa->add_option("--fusion", fopa_flags.fusion, "Fusion of object and background features")
      ->check(CLI::IsMember({"dynamic", "concat"}));
  tfopa->add_option("--scales", fopa_flags.scales, "Number of fused scales")
      ->check(CLI::IsMember({1, 2}));
  tfopa->add_option("--mimic", fopa_flags.mimic, "Feature mimicking")->check(on_off_check);
  tfopa->add_option("--onehot-bins", fopa_flags.onehot_bins,
                    "0 for the centred object canvas, otherwise one-hot scale bins")
      ->check(CLI::IsMember({0, 8, 16, 32}));

  // eval
  std::string eval_model, eval_data, eval_split = "test", eval_out;
  double eval_threshold = 0.5;
  CLI::App *eval = app.add_subcommand("eval", "F1 and balanced accuracy on annotated pixels");
  eval->add_option("--model", eval_model, "Checkpoint or run directory")->required();
  eval->add_option("--data", eval_data, "Corpus directory")->required();
  eval->add_option("--split", eval_split, "Split")->check(CLI::IsMember({"train", "test"}));
  eval->add_option("--threshold", eval_threshold, "Decision threshold")
      ->check(CLI::Range(0.0, 1.0));
  eval->add_option("--out", eval_out, "Optional directory for eval.cfg and run.cfg");

  // bench
  std::string bench_sopa, bench_fopa, bench_data, bench_out;
  std::optional<int> bench_pair;
  fopa_bench_options bench_opts;
  fopa_bench_options_default(&bench_opts);
  std::string bench_enum = "on";
  CLI::App *bench = app.add_subcommand("bench", "Time enumeration against one dense pass");
  bench->add_option("--sopa", bench_sopa, "Composite classifier")->required();
  bench->add_option("--fopa", bench_fopa, "Dense placement model")->required();
  bench->add_option("--data", bench_data, "Corpus directory")->required();
  bench->add_option("--pair", bench_pair, "Pair id (first test pair by default)");
  bench->add_option("--reps", bench_opts.repetitions, "Timed repetitions")
      ->check(CLI::Range(10, 100000));
  bench->add_option("--measure-enumeration", bench_enum, "Also time whole enumeration maps")
      ->check(on_off_check);
  bench->add_option("--out", bench_out, "Optional directory for bench.cfg and run.cfg");

  // heatmap
  std::string heat_model, heat_data, heat_out;
  int heat_pair = 0;
  CLI::App *heat = app.add_subcommand("heatmap", "Write the score map of a pair as PGM");
  heat->add_option("--model", heat_model, "Checkpoint or run directory")->required();
  heat->add_option("--data", heat_data, "Corpus directory")->required();
  heat->add_option("--pair", heat_pair, "Pair id")->required();
  heat->add_option("--out", heat_out, "Output directory (heatmap.pgm)")->required();

  // compose
  std::string comp_data, comp_model, comp_out, comp_pick;
  int comp_pair = 0;
  std::optional<int> comp_x, comp_y;
  CLI::App *comp = app.add_subcommand("compose", "Render a composite at a chosen location");
  comp->add_option("--data", comp_data, "Corpus directory")->required();
  comp->add_option("--pair", comp_pair, "Pair id")->required();
  comp->add_option("--x", comp_x, "Object centre column");
  comp->add_option("--y", comp_y, "Object centre row");
  comp->add_option("--pick", comp_pick, "Pick the best or worst location from a model")
      ->check(CLI::IsMember({"best", "worst"}));
  comp->add_option("--model", comp_model, "Model used by --pick");
  comp->add_option("--out", comp_out, "Output directory (composite.ppm)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen) {
      fopa_corpus *raw = nullptr;
      check(fopa_corpus_generate(&corpus_opts, &raw));
      CorpusPtr corpus(raw);
      make_dir(gen_out);
      check(fopa_corpus_save(corpus.get(), gen_out.c_str()));
      write_run_config(*gen, gen_out);
      std::size_t n_train = 0, n_test = 0;
      check(fopa_corpus_pair_count(corpus.get(), "train", &n_train));
      check(fopa_corpus_pair_count(corpus.get(), "test", &n_test));
      std::cout << "train_pairs=" << n_train << "\ntest_pairs=" << n_test << "\n";
    } else if (*tsopa) {
      CorpusPtr corpus = load_corpus(sopa_flags.data);
      const fopa_train_options o = train_options(sopa_flags);
      make_dir(sopa_flags.out);
      write_run_config(*tsopa, sopa_flags.out);
      EpochLog log = open_log(sopa_flags.out);
      fopa_model *raw = nullptr;
      check(fopa_train_sopa(corpus.get(), &o, on_epoch, &log, &raw));
      ModelPtr model(raw);
      save_model(model.get(), sopa_flags.out);
    } else if (*tfopa) {
      CorpusPtr corpus = load_corpus(fopa_flags.data);
      fopa_train_options o = train_options(fopa_flags);
      ModelPtr teacher;
      if (!fopa_flags.sopa.empty()) {
        teacher = load_model(fopa_flags.sopa);
      } else if (o.transfer_prior || (o.mimic_enabled && o.lambda_mimic != 0.0)) {
        throw Failure{kExitUsage, "--sopa is required unless --transfer off and mimicking is off"};
      }
      make_dir(fopa_flags.out);
      EpochLog log = open_log(fopa_flags.out);
      if (on_off(fopa_flags.lambda_search)) {
        const std::vector<double> candidates{16, 4, 1, 0.25, 0.0625, 0.015625, 0.00390625};
        std::vector<double> val(candidates.size());
        double chosen = 0.0;
        check(fopa_select_mimic_weight(corpus.get(), &o, candidates.data(), candidates.size(),
                                       6, 0.2, &chosen, val.data()));
        for (std::size_t i = 0; i < candidates.size(); ++i) {
          log_line(log, "# lambda " + std::to_string(candidates[i]) + " validation bAcc " +
                            format3(val[i]));
        }
        o.lambda_mimic = chosen;
        fopa_flags.lambda = chosen;
        log_line(log, "# chosen lambda " + std::to_string(chosen));
      }
      write_run_config(*tfopa, fopa_flags.out);
      if (on_off(fopa_flags.lambda_search)) {
        std::ofstream(fs::path(fopa_flags.out) / "run.cfg", std::ios::app)
            << "chosen_lambda=" << o.lambda_mimic << "\n";
      }
      fopa_model *raw = nullptr;
      check(fopa_train_fopa(corpus.get(), teacher.get(), &o, on_epoch, &log, &raw));
      ModelPtr model(raw);
      save_model(model.get(), fopa_flags.out);
    } else if (*eval) {
      CorpusPtr corpus = load_corpus(eval_data);
      ModelPtr model = load_model(eval_model);
      fopa_eval_result r;
      check(fopa_evaluate(model.get(), corpus.get(), eval_split.c_str(), eval_threshold, &r));
      const std::string text = "split=" + eval_split + "\npairs=" + std::to_string(r.pairs) +
                               "\ntp=" + std::to_string(r.tp) + "\nfp=" + std::to_string(r.fp) +
                               "\ntn=" + std::to_string(r.tn) + "\nfn=" + std::to_string(r.fn) +
                               "\nF1=" + format3(r.f1) + "\nbAcc=" + format3(r.bacc) + "\n";
      std::cout << text;
      if (!eval_out.empty()) {
        make_dir(eval_out);
        write_run_config(*eval, eval_out);
        std::ofstream(fs::path(eval_out) / "eval.cfg", std::ios::binary) << text;
      }
    } else if (*bench) {
      CorpusPtr corpus = load_corpus(bench_data);
      ModelPtr sopa = load_model(bench_sopa);
      ModelPtr fopa = load_model(bench_fopa);
      bench_opts.measure_enumeration = on_off(bench_enum);
      const int pair_id = pair_or_first_test(corpus.get(), bench_pair);
      char *table = nullptr, *values = nullptr;
      check(fopa_bench(sopa.get(), fopa.get(), corpus.get(), pair_id, &bench_opts, &table,
                       &values));
      const std::string t = table, v = values;
      fopa_string_free(table);
      fopa_string_free(values);
      std::cout << t;
      if (!bench_out.empty()) {
        make_dir(bench_out);
        write_run_config(*bench, bench_out);
        std::ofstream(fs::path(bench_out) / "bench.cfg", std::ios::binary)
            << "pair=" << pair_id << "\n" << v;
        std::ofstream(fs::path(bench_out) / "bench.tsv", std::ios::binary) << t;
      }
    } else if (*heat) {
      CorpusPtr corpus = load_corpus(heat_data);
      ModelPtr model = load_model(heat_model);
      int w = 0, h = 0;
      const std::vector<double> scores = score_map(model.get(), corpus.get(), heat_pair, &w, &h);
      make_dir(heat_out);
      write_run_config(*heat, heat_out);
      check(fopa_write_heatmap(scores.data(), w, h,
                               (fs::path(heat_out) / "heatmap.pgm").string().c_str()));
      fopa_selection s;
      check(fopa_select(scores.data(), w, h, &s));
      std::cout << "best_x=" << s.best_x << "\nbest_y=" << s.best_y
                << "\nbest_score=" << format3(s.best_score) << "\nworst_x=" << s.worst_x
                << "\nworst_y=" << s.worst_y << "\nworst_score=" << format3(s.worst_score)
                << "\n";
    } else if (*comp) {
      CorpusPtr corpus = load_corpus(comp_data);
      int x = 0, y = 0;
      if (!comp_pick.empty()) {
        if (comp_x || comp_y) throw Failure{kExitUsage, "--pick excludes --x/--y"};
        if (comp_model.empty()) throw Failure{kExitUsage, "--pick needs --model"};
        ModelPtr model = load_model(comp_model);
        int w = 0, h = 0;
        const std::vector<double> scores =
            score_map(model.get(), corpus.get(), comp_pair, &w, &h);
        fopa_selection s;
        check(fopa_select(scores.data(), w, h, &s));
        x = comp_pick == "best" ? s.best_x : s.worst_x;
        y = comp_pick == "best" ? s.best_y : s.worst_y;
      } else {
        if (!comp_x || !comp_y) throw Failure{kExitUsage, "give --x and --y, or --pick"};
        x = *comp_x;
        y = *comp_y;
      }
      make_dir(comp_out);
      write_run_config(*comp, comp_out);
      check(fopa_write_composite(corpus.get(), comp_pair, x, y,
                                 (fs::path(comp_out) / "composite.ppm").string().c_str()));
      std::cout << "x=" << x << "\ny=" << y << "\n";
    }
  } catch (const Failure &f) {
    std::cerr << "fopa: " << f.message << "\n";
    return f.code;
  } catch (const std::exception &e) {
    std::cerr << "fopa: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}
