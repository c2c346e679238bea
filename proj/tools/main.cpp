#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gpcache/approx.hpp"
#include "gpcache/bundle_io.hpp"
#include "gpcache/calibration.hpp"
#include "gpcache/gpcache.hpp"
#include "gpcache/trainer.hpp"
#include "gpcache/tuner.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start)
      .count();
}

// GPCACHE_THREADS overrides --threads; 0 leaves the Eigen default (all
// cores) in place.
void apply_threads(int flag_threads) {
  int threads = flag_threads;
  if (const char* env = std::getenv("GPCACHE_THREADS")) {
    try {
      threads = std::stoi(env);
    } catch (const std::exception&) {
      throw gpcache::Error(gpcache::ErrorKind::kInvalidArgument,
                           "GPCACHE_THREADS must be an integer");
    }
  }
  if (threads < 0) {
    throw gpcache::Error(gpcache::ErrorKind::kInvalidArgument,
                         "thread count must be >= 0");
  }
  if (threads > 0) {
    Eigen::setNbThreads(threads);
  }
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    throw gpcache::Error(gpcache::ErrorKind::kIo,
                         dir.string() + ": cannot create directory (" +
                             ec.message() + ")");
  }
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw gpcache::Error(gpcache::ErrorKind::kIo,
                         path.string() + ": cannot open for writing");
  }
  out << j.dump(2) << "\n";
  if (!out) {
    throw gpcache::Error(gpcache::ErrorKind::kIo,
                         path.string() + ": write failed");
  }
}

void write_run_manifest(const fs::path& out_dir, const std::string& command,
                        const json& flags, const json& seeds,
                        const json& artifacts, double wall_ms) {
  json manifest;
  manifest["command"] = command;
  manifest["flags"] = flags;
  manifest["seeds"] = seeds;
  manifest["artifacts"] = artifacts;
  manifest["version"] = gpcache::kVersion;
  manifest["wall_ms"] = wall_ms;
  write_json_file(out_dir / "run_manifest.json", manifest);
}

std::vector<double> per_class_accuracy(const Eigen::VectorXi& pred,
                                       const gpcache::LabelVector& truth) {
  std::vector<int> correct(truth.num_classes, 0), total(truth.num_classes, 0);
  for (Eigen::Index i = 0; i < truth.rows(); ++i) {
    ++total[truth.labels[i]];
    if (pred[i] == truth.labels[i]) ++correct[truth.labels[i]];
  }
  std::vector<double> acc(truth.num_classes, 0.0);
  for (int c = 0; c < truth.num_classes; ++c) {
    if (total[c] > 0) acc[c] = static_cast<double>(correct[c]) / total[c];
  }
  return acc;
}

std::optional<gpcache::CalibrationLayer> load_calibration(
    const gpcache::FeatureBundle& bundle, bool requested) {
  if (!requested) return std::nullopt;
  if (!bundle.calib_proj) {
    throw gpcache::Error(
        gpcache::ErrorKind::kInvalidArgument,
        "--calibrated: the bundle has no calibration layer; run `gpcache "
        "calibrate` first");
  }
  gpcache::CalibrationLayer layer;
  layer.proj = *bundle.calib_proj;
  if (bundle.calib_bias) layer.bias = bundle.calib_bias;
  return layer;
}

void print_accuracy(const char* name, double value) {
  std::printf("%s accuracy: %.4f\n", name, value);
}

// ---------------------------------------------------------------- generate

struct GenerateArgs {
  gpcache::SyntheticSpec spec;
  std::string out;
  int threads = 0;
};

void run_generate(const GenerateArgs& a) {
  const auto t0 = Clock::now();
  apply_threads(a.threads);
  const gpcache::FeatureBundle bundle = gpcache::generate_synthetic(a.spec);
  ensure_dir(a.out);
  gpcache::write_bundle(bundle, a.out);

  json summary;
  summary["command"] = "generate";
  summary["classes"] = bundle.num_classes();
  summary["dim"] = bundle.dim();
  summary["rows"] = {{"train", bundle.train_x.rows()},
                     {"val", bundle.val_x.rows()},
                     {"test", bundle.test_x.rows()},
                     {"unlabeled",
                      bundle.unlabeled ? bundle.unlabeled->rows() : 0}};
  summary["seed"] = a.spec.seed;
  summary["out"] = a.out;
  write_json_file(fs::path(a.out) / "summary.json", summary);

  json flags;
  flags["classes"] = a.spec.classes;
  flags["shots"] = a.spec.shots;
  flags["dim"] = a.spec.dim;
  flags["spread"] = a.spec.spread;
  flags["text_noise"] = a.spec.text_noise;
  flags["seed"] = a.spec.seed;
  flags["test_per_class"] = a.spec.test_per_class;
  flags["val_per_class"] = a.spec.val_per_class;
  flags["unlabeled_per_class"] = a.spec.unlabeled_per_class;
  flags["out"] = a.out;
  flags["threads"] = a.threads;
  json artifacts;
  artifacts["bundle"] = a.out;
  artifacts["summary"] = (fs::path(a.out) / "summary.json").string();
  write_run_manifest(a.out, "generate", flags, json{{"seed", a.spec.seed}},
                     artifacts, ms_since(t0));

  std::printf("generated bundle: %d classes, dim %d, %ld/%ld/%ld "
              "train/val/test rows\n",
              bundle.num_classes(), static_cast<int>(bundle.dim()),
              static_cast<long>(bundle.train_x.rows()),
              static_cast<long>(bundle.val_x.rows()),
              static_cast<long>(bundle.test_x.rows()));
}

// --------------------------------------------------------------- calibrate

struct CalibrateArgs {
  std::string bundle;
  std::string out;
  gpcache::ContrastiveConfig cfg;
  std::string mining = "hard";
  int threads = 0;
};

void run_calibrate(const CalibrateArgs& a) {
  const auto t0 = Clock::now();
  apply_threads(a.threads);
  gpcache::FeatureBundle bundle = gpcache::read_bundle(a.bundle);
  if (!bundle.unlabeled || !bundle.unlabeled_augmented) {
    throw gpcache::Error(
        gpcache::ErrorKind::kInvalidArgument,
        "calibrate: the bundle has no unlabeled/augmented pool");
  }
  gpcache::ContrastiveConfig cfg = a.cfg;
  if (a.mining == "hard") {
    cfg.mining = gpcache::NeighborMining::kHard;
  } else if (a.mining == "random") {
    cfg.mining = gpcache::NeighborMining::kRandom;
  } else {
    throw gpcache::Error(gpcache::ErrorKind::kInvalidArgument,
                         "--mining must be 'hard' or 'random'");
  }

  std::vector<gpcache::EpochLoss> losses;
  const gpcache::CalibrationLayer layer = gpcache::train_calibration(
      *bundle.unlabeled, *bundle.unlabeled_augmented, cfg, &losses);
  gpcache::attach_calibration(a.bundle, layer.proj, layer.bias);

  ensure_dir(a.out);
  const fs::path loss_csv = fs::path(a.out) / "loss.csv";
  {
    std::ofstream out(loss_csv, std::ios::trunc);
    if (!out) {
      throw gpcache::Error(gpcache::ErrorKind::kIo,
                           loss_csv.string() + ": cannot open for writing");
    }
    out << "epoch,mean_loss\n";
    char buf[64];
    for (const gpcache::EpochLoss& e : losses) {
      std::snprintf(buf, sizeof buf, "%d,%.17g\n", e.epoch, e.mean_loss);
      out << buf;
    }
  }

  const double margin_raw =
      gpcache::similarity_margin(nullptr, bundle.val_x, bundle.val_y);
  const double margin_calibrated =
      gpcache::similarity_margin(&layer, bundle.val_x, bundle.val_y);

  json summary;
  summary["command"] = "calibrate";
  summary["bundle"] = a.bundle;
  summary["epochs"] = cfg.epochs;
  summary["final_loss"] = losses.empty() ? 0.0 : losses.back().mean_loss;
  summary["margin_raw"] = margin_raw;
  summary["margin_calibrated"] = margin_calibrated;
  write_json_file(fs::path(a.out) / "summary.json", summary);

  json flags;
  flags["bundle"] = a.bundle;
  flags["out"] = a.out;
  flags["epochs"] = cfg.epochs;
  flags["batch_size"] = cfg.batch_size;
  flags["neighbors"] = cfg.neighbors;
  flags["temperature"] = cfg.temperature;
  flags["lr"] = cfg.learning_rate;
  flags["weight_decay"] = cfg.weight_decay;
  flags["momentum"] = cfg.momentum;
  flags["seed"] = cfg.seed;
  flags["bias"] = cfg.use_bias;
  flags["mining"] = a.mining;
  flags["threads"] = a.threads;
  json artifacts;
  artifacts["calib_proj"] = (fs::path(a.bundle) / "calib_proj.gpcb").string();
  artifacts["loss_csv"] = loss_csv.string();
  artifacts["summary"] = (fs::path(a.out) / "summary.json").string();
  write_run_manifest(a.out, "calibrate", flags, json{{"seed", cfg.seed}},
                     artifacts, ms_since(t0));

  std::printf("calibration attached to %s\n", a.bundle.c_str());
  std::printf("val similarity margin: %.6f raw -> %.6f calibrated\n",
              margin_raw, margin_calibrated);
}

// ------------------------------------------------------------------- adapt

struct AdaptArgs {
  std::string bundle;
  std::string out;
  std::string mode;
  std::string train = "free";
  double alpha = 1.0, beta = 5.5, sigma2 = 1.0, eta = 0.0;
  bool alpha_set = false, beta_set = false, sigma2_set = false,
       eta_set = false;
  bool grid = false;
  bool calibrated = false;
  int groups = 0;
  std::uint64_t group_seed = 0;
  gpcache::TrainConfig tcfg;
  bool no_renormalize = false;
  int threads = 0;
};

void run_adapt(const AdaptArgs& a) {
  const auto t0 = Clock::now();
  apply_threads(a.threads);
  const gpcache::FeatureBundle bundle = gpcache::read_bundle(a.bundle);
  ensure_dir(a.out);

  const std::optional<gpcache::CalibrationLayer> calib =
      load_calibration(bundle, a.calibrated);
  std::optional<gpcache::GroupPartition> partition;
  if (a.groups > 0) {
    partition =
        gpcache::make_partition(bundle.num_classes(), a.groups, a.group_seed);
  }

  json summary;
  summary["command"] = "adapt";
  summary["mode"] = a.mode;
  summary["train"] = a.train;
  summary["calibrated"] = a.calibrated;
  summary["groups"] = a.groups;
  json artifacts;
  artifacts["summary"] = (fs::path(a.out) / "summary.json").string();

  double val_acc = 0.0, test_acc = 0.0;
  std::vector<double> per_class;

  if (a.mode == "zs") {
    if (a.train != "free") {
      throw gpcache::Error(gpcache::ErrorKind::kInvalidArgument,
                           "adapt: --mode zs does not support fine-tuning");
    }
    const Eigen::VectorXi val_pred = gpcache::detail::argmax_rows(
        gpcache::zero_shot_logits(bundle.weights, bundle.val_x));
    const Eigen::VectorXi test_pred = gpcache::detail::argmax_rows(
        gpcache::zero_shot_logits(bundle.weights, bundle.test_x));
    val_acc = gpcache::accuracy(val_pred, bundle.val_y.labels);
    test_acc = gpcache::accuracy(test_pred, bundle.test_y.labels);
    per_class = per_class_accuracy(test_pred, bundle.test_y);
  } else if (a.mode == "nw" || a.mode == "gp") {
    const gpcache::FusionMode fusion = a.mode == "gp"
                                           ? gpcache::FusionMode::kGaussianProcess
                                           : gpcache::FusionMode::kNadarayaWatson;
    gpcache::CacheHyper hyper;
    hyper.alpha = a.alpha;
    hyper.kernel.beta = a.beta;
    hyper.sigma2 = a.sigma2;
    hyper.eta = a.eta;

    const bool any_fixed =
        a.alpha_set || a.beta_set || a.sigma2_set || a.eta_set;
    const bool searched = a.grid || !any_fixed;
    if (searched) {
      const gpcache::GridResult gr =
          gpcache::grid_search(gpcache::search_view(bundle),
                               gpcache::SearchSpace{}, fusion, calib, partition);
      hyper = gr.best;
      const fs::path grid_csv = fs::path(a.out) / "grid.csv";
      gpcache::write_grid_csv(grid_csv, gr.rows);
      artifacts["grid_csv"] = grid_csv.string();
      summary["grid"] = {{"rows", gr.rows.size()},
                         {"best_val_accuracy", gr.best_val_accuracy}};
    }
    summary["hyper"] = {{"alpha", hyper.alpha},
                        {"beta", hyper.kernel.beta},
                        {"sigma2", hyper.sigma2},
                        {"eta", hyper.eta}};

    if (a.train == "free") {
      const gpcache::EvalReport report =
          gpcache::evaluate(bundle, hyper, fusion, calib, partition);
      val_acc = report.val_accuracy;
      test_acc = report.test_accuracy;
      per_class = report.per_class_accuracy;
    } else if (a.train == "finetune" || a.train == "finetune-nograd") {
      gpcache::TrainConfig cfg = a.tcfg;
      cfg.renormalize_keys = !a.no_renormalize;
      cfg.mode = a.train == "finetune-nograd" ? gpcache::GradMode::kNoGrad
                                              : gpcache::GradMode::kFullGrad;
      if (a.mode == "nw" && a.train == "finetune-nograd") {
        throw gpcache::Error(
            gpcache::ErrorKind::kInvalidArgument,
            "adapt: --mode nw has no precision matrix; use --train finetune");
      }
      std::vector<gpcache::FinetuneEpoch> tlog;
      const gpcache::CacheModel model =
          a.mode == "gp"
              ? gpcache::finetune(bundle, hyper, cfg, calib, partition, &tlog)
              : gpcache::finetune_nw_baseline(bundle, hyper, cfg, calib, &tlog);

      const fs::path train_csv = fs::path(a.out) / "train_log.csv";
      {
        std::ofstream out(train_csv, std::ios::trunc);
        if (!out) {
          throw gpcache::Error(gpcache::ErrorKind::kIo,
                               train_csv.string() +
                                   ": cannot open for writing");
        }
        out << "epoch,train_loss,val_accuracy\n";
        char buf[96];
        for (const gpcache::FinetuneEpoch& e : tlog) {
          std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", e.epoch,
                        e.train_loss, e.val_accuracy);
          out << buf;
        }
      }
      artifacts["train_log_csv"] = train_csv.string();

      const gpcache::LabelVector val_pred =
          gpcache::predict(model, bundle.weights, bundle.val_x, fusion);
      const gpcache::LabelVector test_pred =
          gpcache::predict(model, bundle.weights, bundle.test_x, fusion);
      val_acc = gpcache::accuracy(val_pred.labels, bundle.val_y.labels);
      test_acc = gpcache::accuracy(test_pred.labels, bundle.test_y.labels);
      per_class = per_class_accuracy(test_pred.labels, bundle.test_y);
    } else {
      throw gpcache::Error(
          gpcache::ErrorKind::kInvalidArgument,
          "adapt: --train must be free, finetune, or finetune-nograd");
    }
  } else {
    throw gpcache::Error(gpcache::ErrorKind::kInvalidArgument,
                         "adapt: --mode must be zs, nw, or gp");
  }

  summary["val_accuracy"] = val_acc;
  summary["test_accuracy"] = test_acc;
  summary["per_class_accuracy"] = per_class;
  write_json_file(fs::path(a.out) / "summary.json", summary);

  json flags;
  flags["bundle"] = a.bundle;
  flags["out"] = a.out;
  flags["mode"] = a.mode;
  flags["train"] = a.train;
  flags["alpha"] = a.alpha_set ? json(a.alpha) : json();
  flags["beta"] = a.beta_set ? json(a.beta) : json();
  flags["sigma2"] = a.sigma2_set ? json(a.sigma2) : json();
  flags["eta"] = a.eta_set ? json(a.eta) : json();
  flags["grid"] = a.grid;
  flags["calibrated"] = a.calibrated;
  flags["groups"] = a.groups;
  flags["group_seed"] = a.group_seed;
  flags["epochs"] = a.tcfg.epochs;
  flags["batch_size"] = a.tcfg.batch_size;
  flags["lr"] = a.tcfg.learning_rate;
  flags["momentum"] = a.tcfg.momentum;
  flags["weight_decay"] = a.tcfg.weight_decay;
  flags["rebuild_every"] = a.tcfg.rebuild_every;
  flags["train_seed"] = a.tcfg.seed;
  flags["no_renormalize"] = a.no_renormalize;
  flags["threads"] = a.threads;
  write_run_manifest(a.out, "adapt", flags,
                     json{{"group_seed", a.group_seed},
                          {"train_seed", a.tcfg.seed}},
                     artifacts, ms_since(t0));

  print_accuracy("val", val_acc);
  print_accuracy("test", test_acc);
}

// ------------------------------------------------------------------- bench

struct BenchArgs {
  std::string bundle;
  std::string out;
  std::vector<std::string> methods = {"exact"};
  int repeats = 3;
  std::uint64_t seed = 0;
  double alpha = 1.0, beta = 5.5, sigma2 = 1.0, eta = 0.0;
  int threads = 0;
};

gpcache::BenchMethod parse_method(const std::string& text,
                                  std::uint64_t seed) {
  gpcache::BenchMethod method;
  method.seed = seed;
  const auto colon = text.find(':');
  const std::string name = text.substr(0, colon);
  if (name == "exact" || name == "mean") {
    if (colon != std::string::npos) {
      throw gpcache::Error(gpcache::ErrorKind::kInvalidArgument,
                           "bench: '" + name + "' takes no parameter");
    }
    method.kind = name == "exact" ? gpcache::BenchMethod::Kind::kExact
                                  : gpcache::BenchMethod::Kind::kMean;
    return method;
  }
  if (name != "group" && name != "nystrom" && name != "rff") {
    throw gpcache::Error(gpcache::ErrorKind::kInvalidArgument,
                         "bench: unknown method '" + text +
                             "' (expected exact, mean, group:G, nystrom:L, "
                             "rff:D)");
  }
  if (colon == std::string::npos || colon + 1 >= text.size()) {
    throw gpcache::Error(gpcache::ErrorKind::kInvalidArgument,
                         "bench: '" + name + "' needs a parameter, e.g. " +
                             name + ":8");
  }
  try {
    method.param = std::stoi(text.substr(colon + 1));
  } catch (const std::exception&) {
    throw gpcache::Error(gpcache::ErrorKind::kInvalidArgument,
                         "bench: bad parameter in '" + text + "'");
  }
  method.kind = name == "group"     ? gpcache::BenchMethod::Kind::kGroup
                : name == "nystrom" ? gpcache::BenchMethod::Kind::kNystrom
                                    : gpcache::BenchMethod::Kind::kRff;
  return method;
}

void run_bench(const BenchArgs& a) {
  const auto t0 = Clock::now();
  apply_threads(a.threads);
  const gpcache::FeatureBundle bundle = gpcache::read_bundle(a.bundle);
  ensure_dir(a.out);

  gpcache::CacheHyper hyper;
  hyper.alpha = a.alpha;
  hyper.kernel.beta = a.beta;
  hyper.sigma2 = a.sigma2;
  hyper.eta = a.eta;

  std::vector<gpcache::BenchMethod> methods;
  methods.reserve(a.methods.size());
  for (const std::string& text : a.methods) {
    methods.push_back(parse_method(text, a.seed));
  }

  const std::vector<gpcache::BenchRow> rows =
      gpcache::bench_approx(bundle, hyper, methods, a.repeats);
  const fs::path bench_csv = fs::path(a.out) / "bench.csv";
  gpcache::write_bench_csv(bench_csv, rows);

  json summary;
  summary["command"] = "bench";
  summary["bundle"] = a.bundle;
  summary["repeats"] = a.repeats;
  json jrows = json::array();
  for (const gpcache::BenchRow& row : rows) {
    jrows.push_back({{"method", row.method},
                     {"param", row.param},
                     {"seed", row.seed},
                     {"accuracy", row.accuracy},
                     {"build_ms", row.build_ms},
                     {"query_ms", row.query_ms}});
  }
  summary["rows"] = jrows;
  write_json_file(fs::path(a.out) / "summary.json", summary);

  json flags;
  flags["bundle"] = a.bundle;
  flags["out"] = a.out;
  flags["methods"] = a.methods;
  flags["repeats"] = a.repeats;
  flags["seed"] = a.seed;
  flags["alpha"] = a.alpha;
  flags["beta"] = a.beta;
  flags["sigma2"] = a.sigma2;
  flags["eta"] = a.eta;
  flags["threads"] = a.threads;
  json artifacts;
  artifacts["bench_csv"] = bench_csv.string();
  artifacts["summary"] = (fs::path(a.out) / "summary.json").string();
  write_run_manifest(a.out, "bench", flags, json{{"seed", a.seed}}, artifacts,
                     ms_since(t0));

  for (const gpcache::BenchRow& row : rows) {
    std::printf("%-8s param=%-6d acc=%.4f build=%8.2fms query=%8.2fms\n",
                row.method.c_str(), row.param, row.accuracy, row.build_ms,
                row.query_ms);
  }
}

// -------------------------------------------------------------------- grid

struct GridArgs {
  std::string bundle;
  std::string out;
  std::string mode = "gp";
  bool calibrated = false;
  int groups = 0;
  std::uint64_t group_seed = 0;
  std::vector<double> alphas, betas, sigma2s, etas;
  int threads = 0;
};

void run_grid(const GridArgs& a) {
  const auto t0 = Clock::now();
  apply_threads(a.threads);
  const gpcache::FeatureBundle bundle = gpcache::read_bundle(a.bundle);
  ensure_dir(a.out);

  if (a.mode != "nw" && a.mode != "gp") {
    throw gpcache::Error(gpcache::ErrorKind::kInvalidArgument,
                         "grid: --mode must be nw or gp");
  }
  const gpcache::FusionMode fusion = a.mode == "gp"
                                         ? gpcache::FusionMode::kGaussianProcess
                                         : gpcache::FusionMode::kNadarayaWatson;
  const std::optional<gpcache::CalibrationLayer> calib =
      load_calibration(bundle, a.calibrated);
  std::optional<gpcache::GroupPartition> partition;
  if (a.groups > 0) {
    partition =
        gpcache::make_partition(bundle.num_classes(), a.groups, a.group_seed);
  }

  gpcache::SearchSpace space;
  if (!a.alphas.empty()) space.alphas = a.alphas;
  if (!a.betas.empty()) space.betas = a.betas;
  if (!a.sigma2s.empty()) space.sigma2s = a.sigma2s;
  if (!a.etas.empty()) space.etas = a.etas;

  const gpcache::GridResult gr = gpcache::grid_search(
      gpcache::search_view(bundle), space, fusion, calib, partition);
  const fs::path grid_csv = fs::path(a.out) / "grid.csv";
  gpcache::write_grid_csv(grid_csv, gr.rows);

  json summary;
  summary["command"] = "grid";
  summary["bundle"] = a.bundle;
  summary["mode"] = a.mode;
  summary["best"] = {{"alpha", gr.best.alpha},
                     {"beta", gr.best.kernel.beta},
                     {"sigma2", gr.best.sigma2},
                     {"eta", gr.best.eta}};
  summary["best_val_accuracy"] = gr.best_val_accuracy;
  summary["rows"] = gr.rows.size();
  write_json_file(fs::path(a.out) / "summary.json", summary);

  json flags;
  flags["bundle"] = a.bundle;
  flags["out"] = a.out;
  flags["mode"] = a.mode;
  flags["calibrated"] = a.calibrated;
  flags["groups"] = a.groups;
  flags["group_seed"] = a.group_seed;
  flags["alphas"] = a.alphas;
  flags["betas"] = a.betas;
  flags["sigma2s"] = a.sigma2s;
  flags["etas"] = a.etas;
  flags["threads"] = a.threads;
  json artifacts;
  artifacts["grid_csv"] = grid_csv.string();
  artifacts["summary"] = (fs::path(a.out) / "summary.json").string();
  write_run_manifest(a.out, "grid", flags, json{{"group_seed", a.group_seed}},
                     artifacts, ms_since(t0));

  std::printf("best: alpha=%g beta=%g sigma2=%g eta=%g (val accuracy %.4f)\n",
              gr.best.alpha, gr.best.kernel.beta, gr.best.sigma2, gr.best.eta,
              gr.best_val_accuracy);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gpcache: calibrated cache models for few-shot classifier "
               "adaptation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", gpcache::kVersion);

  GenerateArgs gen;
  CLI::App* cmd_gen =
      app.add_subcommand("generate", "Synthesize a feature bundle");
  cmd_gen->add_option("--classes", gen.spec.classes, "Number of classes")
      ->check(CLI::PositiveNumber);
  cmd_gen->add_option("--shots", gen.spec.shots, "Training examples per class")
      ->check(CLI::PositiveNumber);
  cmd_gen->add_option("--dim", gen.spec.dim, "Feature dimension")
      ->check(CLI::Range(2, 1 << 20));
  cmd_gen->add_option("--spread", gen.spec.spread,
                      "Within-class noise before re-normalization")
      ->check(CLI::NonNegativeNumber);
  cmd_gen->add_option("--text-noise", gen.spec.text_noise,
                      "Zero-shot weight perturbation")
      ->check(CLI::NonNegativeNumber);
  cmd_gen->add_option("--seed", gen.spec.seed, "Generator seed");
  cmd_gen->add_option("--test-per-class", gen.spec.test_per_class,
                      "Test examples per class")
      ->check(CLI::PositiveNumber);
  cmd_gen->add_option("--val-per-class", gen.spec.val_per_class,
                      "Validation examples per class (0: same as --shots)")
      ->check(CLI::NonNegativeNumber);
  cmd_gen->add_option("--unlabeled-per-class", gen.spec.unlabeled_per_class,
                      "Unlabeled examples per class (0: same as "
                      "--test-per-class)")
      ->check(CLI::NonNegativeNumber);
  cmd_gen->add_option("--out", gen.out, "Bundle output directory")->required();
  cmd_gen->add_option("--threads", gen.threads, "Thread cap (0: all cores)")
      ->check(CLI::NonNegativeNumber);
  cmd_gen->callback([&gen] { run_generate(gen); });

  CalibrateArgs cal;
  CLI::App* cmd_cal = app.add_subcommand(
      "calibrate", "Train the similarity-calibration layer on the bundle's "
                   "unlabeled pool and attach it");
  cmd_cal->add_option("--bundle", cal.bundle, "Bundle directory")->required();
  cmd_cal->add_option("--out", cal.out, "Artifact output directory")
      ->required();
  cmd_cal->add_option("--epochs", cal.cfg.epochs, "Training epochs")
      ->check(CLI::NonNegativeNumber);
  cmd_cal->add_option("--batch-size", cal.cfg.batch_size, "Anchors per step")
      ->check(CLI::PositiveNumber);
  cmd_cal->add_option("--neighbors", cal.cfg.neighbors,
                      "Neighbor set size per anchor")
      ->check(CLI::PositiveNumber);
  cmd_cal->add_option("--temperature", cal.cfg.temperature,
                      "Softmax temperature");
  cmd_cal->add_option("--lr", cal.cfg.learning_rate, "Peak learning rate")
      ->check(CLI::NonNegativeNumber);
  cmd_cal->add_option("--weight-decay", cal.cfg.weight_decay, "L2 penalty")
      ->check(CLI::NonNegativeNumber);
  cmd_cal->add_option("--momentum", cal.cfg.momentum, "SGD momentum");
  cmd_cal->add_option("--seed", cal.cfg.seed, "Shuffling/mining seed");
  cmd_cal->add_flag("--bias", cal.cfg.use_bias, "Learn a bias term too");
  cmd_cal->add_option("--mining", cal.mining,
                      "Neighbor selection: hard | random");
  cmd_cal->add_option("--threads", cal.threads, "Thread cap (0: all cores)")
      ->check(CLI::NonNegativeNumber);
  cmd_cal->callback([&cal] { run_calibrate(cal); });

  AdaptArgs ad;
  CLI::App* cmd_ad = app.add_subcommand(
      "adapt", "Adapt the zero-shot classifier with a cache model and report "
               "val/test accuracy");
  cmd_ad->add_option("--bundle", ad.bundle, "Bundle directory")->required();
  cmd_ad->add_option("--out", ad.out, "Artifact output directory")->required();
  cmd_ad->add_option("--mode", ad.mode, "zs | nw | gp")->required();
  cmd_ad->add_option("--train", ad.train,
                     "free | finetune | finetune-nograd");
  CLI::Option* opt_alpha =
      cmd_ad->add_option("--alpha", ad.alpha, "Fusion weight");
  CLI::Option* opt_beta =
      cmd_ad->add_option("--beta", ad.beta, "Kernel sharpness");
  CLI::Option* opt_sigma2 =
      cmd_ad->add_option("--sigma2", ad.sigma2, "Observation noise");
  CLI::Option* opt_eta =
      cmd_ad->add_option("--eta", ad.eta, "Confidence exponent");
  cmd_ad->add_flag("--grid", ad.grid,
                   "Grid-search hyperparameters on the validation split "
                   "(default when none are fixed)");
  cmd_ad->add_flag("--calibrated", ad.calibrated,
                   "Use the bundle's similarity-calibration layer");
  cmd_ad->add_option("--groups", ad.groups,
                     "Split classes into this many groups (0: none)")
      ->check(CLI::NonNegativeNumber);
  cmd_ad->add_option("--group-seed", ad.group_seed, "Partition seed");
  cmd_ad->add_option("--epochs", ad.tcfg.epochs, "Fine-tuning epochs")
      ->check(CLI::NonNegativeNumber);
  cmd_ad->add_option("--batch-size", ad.tcfg.batch_size,
                     "Fine-tuning batch size")
      ->check(CLI::PositiveNumber);
  cmd_ad->add_option("--lr", ad.tcfg.learning_rate,
                     "Fine-tuning learning rate")
      ->check(CLI::NonNegativeNumber);
  cmd_ad->add_option("--momentum", ad.tcfg.momentum, "Fine-tuning momentum");
  cmd_ad->add_option("--weight-decay", ad.tcfg.weight_decay,
                     "Fine-tuning weight decay")
      ->check(CLI::NonNegativeNumber);
  cmd_ad->add_option("--rebuild-every", ad.tcfg.rebuild_every,
                     "Steps between cache refactorizations")
      ->check(CLI::PositiveNumber);
  cmd_ad->add_option("--train-seed", ad.tcfg.seed, "Fine-tuning shuffle seed");
  cmd_ad->add_flag("--no-renormalize", ad.no_renormalize,
                   "Do not project keys back to the unit sphere");
  cmd_ad->add_option("--threads", ad.threads, "Thread cap (0: all cores)")
      ->check(CLI::NonNegativeNumber);
  cmd_ad->callback([&ad, opt_alpha, opt_beta, opt_sigma2, opt_eta] {
    ad.alpha_set = opt_alpha->count() > 0;
    ad.beta_set = opt_beta->count() > 0;
    ad.sigma2_set = opt_sigma2->count() > 0;
    ad.eta_set = opt_eta->count() > 0;
    run_adapt(ad);
  });

  BenchArgs be;
  CLI::App* cmd_be = app.add_subcommand(
      "bench", "Time exact and approximate cache constructions");
  cmd_be->add_option("--bundle", be.bundle, "Bundle directory")->required();
  cmd_be->add_option("--out", be.out, "Artifact output directory")->required();
  cmd_be->add_option("--methods", be.methods,
                     "Methods: exact mean group:G nystrom:L rff:D");
  cmd_be->add_option("--repeats", be.repeats, "Timing repeats per method")
      ->check(CLI::PositiveNumber);
  cmd_be->add_option("--seed", be.seed, "Seed for partition/landmarks/features");
  cmd_be->add_option("--alpha", be.alpha, "Fusion weight");
  cmd_be->add_option("--beta", be.beta, "Kernel sharpness");
  cmd_be->add_option("--sigma2", be.sigma2, "Observation noise");
  cmd_be->add_option("--eta", be.eta, "Confidence exponent (exact/group)");
  cmd_be->add_option("--threads", be.threads, "Thread cap (0: all cores)")
      ->check(CLI::NonNegativeNumber);
  cmd_be->callback([&be] { run_bench(be); });

  GridArgs gr;
  CLI::App* cmd_gr = app.add_subcommand(
      "grid", "Exhaustive hyperparameter search on the validation split");
  cmd_gr->add_option("--bundle", gr.bundle, "Bundle directory")->required();
  cmd_gr->add_option("--out", gr.out, "Artifact output directory")->required();
  cmd_gr->add_option("--mode", gr.mode, "nw | gp");
  cmd_gr->add_flag("--calibrated", gr.calibrated,
                   "Use the bundle's similarity-calibration layer");
  cmd_gr->add_option("--groups", gr.groups,
                     "Split classes into this many groups (0: none)")
      ->check(CLI::NonNegativeNumber);
  cmd_gr->add_option("--group-seed", gr.group_seed, "Partition seed");
  cmd_gr->add_option("--alphas", gr.alphas, "Override alpha values");
  cmd_gr->add_option("--betas", gr.betas, "Override beta values");
  cmd_gr->add_option("--sigma2s", gr.sigma2s, "Override sigma2 values");
  cmd_gr->add_option("--etas", gr.etas, "Override eta values");
  cmd_gr->add_option("--threads", gr.threads, "Thread cap (0: all cores)")
      ->check(CLI::NonNegativeNumber);
  cmd_gr->callback([&gr] { run_grid(gr); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const gpcache::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
