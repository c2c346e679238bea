#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>

#include "gpcache/bundle_io.hpp"
#include "gpcache/tuner.hpp"
#include "test_util.hpp"

using namespace gpcache;

namespace {

FeatureBundle tiny_bundle(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.classes = 4;
  spec.shots = 2;
  spec.dim = 12;
  spec.test_per_class = 5;
  spec.spread = 0.4;
  spec.seed = seed;
  return generate_synthetic(spec);
}

}  // namespace

TEST_CASE("accuracy counts exact matches") {
  Eigen::VectorXi pred(4), truth(4);
  pred << 0, 1, 2, 2;
  truth << 0, 1, 1, 2;
  CHECK(accuracy(pred, truth) == 0.75);
  CHECK(accuracy(truth, truth) == 1.0);
  CHECK(accuracy(Eigen::VectorXi(), Eigen::VectorXi()) == 0.0);
  Eigen::VectorXi three(3);
  three << 0, 1, 2;
  CHECK_THROWS_AS(accuracy(pred, three), Error);
}

TEST_CASE("every grid row reproduces a from-scratch evaluation") {
  const FeatureBundle bundle = tiny_bundle(7);
  SearchSpace space;
  space.alphas = {0.5, 2.0};
  space.betas = {2.0, 8.0};
  space.sigma2s = {0.1, 1.0};
  space.etas = {0.0, 1.0};

  for (FusionMode mode :
       {FusionMode::kGaussianProcess, FusionMode::kNadarayaWatson}) {
    const GridResult grid = grid_search(search_view(bundle), space, mode);
    REQUIRE(grid.rows.size() == 16);
    double best_seen = -1.0;
    for (const GridRow& row : grid.rows) {
      CacheHyper hyper;
      hyper.alpha = row.alpha;
      hyper.kernel.beta = row.beta;
      hyper.sigma2 = row.sigma2;
      hyper.eta = row.eta;
      const EvalReport report = evaluate(bundle, hyper, mode);
      CHECK(row.val_accuracy == report.val_accuracy);
      best_seen = std::max(best_seen, row.val_accuracy);
    }
    CHECK(grid.best_val_accuracy == best_seen);
    // The winning setting really scores its reported accuracy.
    const EvalReport best = evaluate(bundle, grid.best, mode);
    CHECK(best.val_accuracy == grid.best_val_accuracy);
  }
}

TEST_CASE("rows come out with alpha fastest and beta slowest") {
  const FeatureBundle bundle = tiny_bundle(9);
  SearchSpace space;
  space.alphas = {0.1, 1.0};
  space.betas = {1.0, 4.0};
  space.sigma2s = {0.5, 2.0};
  space.etas = {0.0, 0.5};
  const GridResult grid =
      grid_search(search_view(bundle), space, FusionMode::kGaussianProcess);
  REQUIRE(grid.rows.size() == 16);
  std::size_t idx = 0;
  for (double beta : space.betas) {
    for (double sigma2 : space.sigma2s) {
      for (double eta : space.etas) {
        for (double alpha : space.alphas) {
          CHECK(grid.rows[idx].alpha == alpha);
          CHECK(grid.rows[idx].beta == beta);
          CHECK(grid.rows[idx].sigma2 == sigma2);
          CHECK(grid.rows[idx].eta == eta);
          ++idx;
        }
      }
    }
  }
}

TEST_CASE("the default space enumerates the full product") {
  const FeatureBundle bundle = tiny_bundle(11);
  const GridResult grid = grid_search(search_view(bundle), SearchSpace{},
                                      FusionMode::kGaussianProcess);
  CHECK(grid.rows.size() == 6u * 5u * 5u * 5u);
}

TEST_CASE("exact ties resolve to the smallest hyperparameter tuple") {
  const FeatureBundle bundle = tiny_bundle(13);
  SearchSpace space;
  // Alphas so small the cache cannot flip any zero-shot decision: every
  // combination scores identically. Values are deliberately unsorted.
  space.alphas = {3e-12, 1e-12, 2e-12};
  space.betas = {5.0, 2.0};
  space.sigma2s = {1.0, 0.5};
  space.etas = {1.0, 0.0};
  const GridResult grid =
      grid_search(search_view(bundle), space, FusionMode::kGaussianProcess);
  for (const GridRow& row : grid.rows) {
    CHECK(row.val_accuracy == grid.best_val_accuracy);
  }
  CHECK(grid.best.alpha == 1e-12);
  CHECK(grid.best.kernel.beta == 2.0);
  CHECK(grid.best.sigma2 == 0.5);
  CHECK(grid.best.eta == 0.0);
}

TEST_CASE("the kernel-vote objective ignores sigma2 and eta") {
  const FeatureBundle bundle = tiny_bundle(17);
  SearchSpace space;
  space.alphas = {0.5, 2.0};
  space.betas = {2.0, 8.0};
  space.sigma2s = {0.01, 1.0, 100.0};
  space.etas = {0.0, 2.0};
  const GridResult grid =
      grid_search(search_view(bundle), space, FusionMode::kNadarayaWatson);
  std::map<std::pair<double, double>, double> by_alpha_beta;
  for (const GridRow& row : grid.rows) {
    const auto key = std::make_pair(row.alpha, row.beta);
    const auto found = by_alpha_beta.find(key);
    if (found == by_alpha_beta.end()) {
      by_alpha_beta[key] = row.val_accuracy;
    } else {
      CHECK(row.val_accuracy == found->second);
    }
  }
  CHECK(by_alpha_beta.size() == 4);
}

TEST_CASE("evaluation reports coherent per-class accuracies") {
  const FeatureBundle bundle = tiny_bundle(19);
  CacheHyper hyper;
  hyper.alpha = 1.0;
  hyper.eta = 0.5;
  const EvalReport report =
      evaluate(bundle, hyper, FusionMode::kGaussianProcess);
  REQUIRE(report.per_class_accuracy.size() == 4);
  double mean = 0.0;
  for (double acc : report.per_class_accuracy) {
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
    mean += acc;
  }
  // Equal-sized test classes: the plain mean is the overall accuracy.
  CHECK(mean / 4.0 == doctest::Approx(report.test_accuracy).epsilon(1e-12));
  CHECK(report.val_accuracy >= 0.0);
  CHECK(report.val_accuracy <= 1.0);
}

TEST_CASE("grid search validates its inputs") {
  const FeatureBundle bundle = tiny_bundle(23);
  SearchSpace empty;
  empty.alphas.clear();
  CHECK_THROWS_AS(grid_search(search_view(bundle), empty,
                              FusionMode::kGaussianProcess),
                  Error);
}

TEST_CASE("grid csv is written with full precision") {
  testutil::TempDir dir("grid");
  const auto csv = dir.path / "grid.csv";
  std::vector<GridRow> rows;
  rows.push_back(GridRow{1.0, 5.5, 1.0, 0.0, 0.75});
  rows.push_back(GridRow{0.1, 2.0, 0.01, 0.25, 1.0});
  write_grid_csv(csv, rows);

  std::ifstream in(csv);
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "alpha,beta,sigma2,eta,val_accuracy");
  REQUIRE(std::getline(in, line));
  CHECK(line == "1,5.5,1,0,0.75");
  REQUIRE(std::getline(in, line));
  CHECK(line == "0.10000000000000001,2,0.01,0.25,1");
  CHECK_FALSE(std::getline(in, line));
}
