#pragma once

#include <filesystem>

#include "gpcache/gpcache.hpp"
#include "gpcache/types.hpp"

namespace gpcache {

// Fraction of exact matches; 0.0 over an empty set.
double accuracy(const Eigen::VectorXi& predicted, const Eigen::VectorXi& truth);

struct SearchSpace {
  std::vector<double> alphas = {0.1, 0.3, 1.0, 3.0, 10.0, 30.0};
  std::vector<double> betas = {1.0, 2.0, 5.5, 10.0, 20.0};
  std::vector<double> sigma2s = {0.01, 0.1, 1.0, 10.0, 100.0};
  std::vector<double> etas = {0.0, 0.25, 0.5, 1.0, 2.0};
};

struct GridRow {
  double alpha = 0.0, beta = 0.0, sigma2 = 0.0, eta = 0.0;
  double val_accuracy = 0.0;
};

struct GridResult {
  CacheHyper best;
  double best_val_accuracy = 0.0;
  std::vector<GridRow> rows;  // exhaustive Cartesian product
};

// Train+val view of a bundle: the search interface never sees the test
// split.
struct SearchSplits {
  const FeatureMatrix& train_x;
  const LabelVector& train_y;
  const FeatureMatrix& val_x;
  const LabelVector& val_y;
  const ZeroShotWeights& weights;
};

SearchSplits search_view(const FeatureBundle& bundle);

// Exhaustive search over the Cartesian product, maximizing val accuracy.
// Loop order: beta outermost (kernel matrices rebuilt only on beta change),
// then sigma2 (one factorization per group), then eta and alpha (reusing
// the factorization). Ties resolve to the lexicographically smallest
// (alpha, beta, sigma2, eta) tuple.
GridResult grid_search(const SearchSplits& splits, const SearchSpace& space,
                       FusionMode mode,
                       const std::optional<CalibrationLayer>& calib = {},
                       const std::optional<GroupPartition>& partition = {});

struct EvalReport {
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::vector<double> per_class_accuracy;  // on the test split
};

// Builds the cache from the training split and scores val and test.
EvalReport evaluate(const FeatureBundle& bundle, const CacheHyper& hyper,
                    FusionMode mode,
                    const std::optional<CalibrationLayer>& calib = {},
                    const std::optional<GroupPartition>& partition = {});

// CSV columns: alpha,beta,sigma2,eta,val_accuracy
void write_grid_csv(const std::filesystem::path& path,
                    const std::vector<GridRow>& rows);

}  // namespace gpcache
