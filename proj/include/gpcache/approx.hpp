#pragma once

#include <filesystem>

#include "gpcache/gpcache.hpp"
#include "gpcache/types.hpp"

namespace gpcache {

// Shuffles the class ids with the seed and deals them into `group_count`
// contiguous slices whose sizes differ by at most one.
GroupPartition make_partition(int num_classes, int group_count,
                              std::uint64_t seed);

// Random Fourier features for the Gaussian-of-cosine kernel. On unit
// vectors exp(-beta (1 - a.b)) = exp(-beta/2 ||a - b||^2), whose spectral
// measure is N(0, beta I); z(x) = sqrt(2/D) cos(freq x + phase) then gives
// E[z(a).z(b)] = kappa(a, b).
struct RffMap {
  Eigen::MatrixXd frequencies;  // D x dim, entries ~ N(0, beta)
  Eigen::VectorXd phases;       // D, uniform [0, 2pi)
  double beta = 0.0;
  std::uint64_t seed = 0;

  int feature_count() const {
    return static_cast<int>(frequencies.rows());
  }

  static RffMap sample(Eigen::Index dim, int feature_count, double beta,
                       std::uint64_t seed);

  // rows x D feature matrix.
  Eigen::MatrixXd transform(const Eigen::MatrixXd& rows) const;
};

// Landmark sketch: K ~= z z^T with z = K_nL V diag(lambda)^{-1/2} from the
// eigendecomposition of the landmark kernel K_LL, eigenvalues truncated at
// 1e-10 relative to the largest.
struct NystromSketch {
  std::vector<int> landmark_rows;      // ascending, L/c per class
  Eigen::MatrixXd landmark_transform;  // L x rank
  Eigen::MatrixXd z;                   // n x rank
};

NystromSketch nystrom_sketch(const FeatureMatrix& keys,
                             const LabelVector& labels,
                             const KernelParams& params, int landmarks,
                             std::uint64_t seed);

// Posterior-mean cache logits under each approximation (no variance, no
// confidence scaling). Low-rank systems are solved on the smaller side via
// (sigma2 I + Z Z^T)^{-1} Z = Z (sigma2 I + Z^T Z)^{-1}.
Eigen::MatrixXd rff_logits(const FeatureMatrix& keys, const LabelVector& labels,
                           const FeatureMatrix& queries, const CacheHyper& hyper,
                           const RffMap& map);
Eigen::MatrixXd nystrom_logits(const FeatureMatrix& keys,
                               const LabelVector& labels,
                               const FeatureMatrix& queries,
                               const CacheHyper& hyper, int landmarks,
                               std::uint64_t seed);
// Class-mean prototypes (averaged then re-normalized), exact GP on the c
// prototypes.
Eigen::MatrixXd mean_prototype_logits(const FeatureMatrix& keys,
                                      const LabelVector& labels,
                                      const FeatureMatrix& queries,
                                      const CacheHyper& hyper);

struct BenchMethod {
  enum class Kind { kExact, kGroup, kMean, kNystrom, kRff };
  Kind kind = Kind::kExact;
  int param = 0;  // group count / landmarks / feature count
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::string method;
  int param = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double build_ms = 0.0;
  double query_ms = 0.0;
};

// Times the build phase (cache/sketch/map construction) and the query phase
// (test logits + fusion + argmax) of each method `repeats` times and scores
// test accuracy. Every method's cache logits are fused with the zero-shot
// logits at hyper.alpha; exact/group use the full confidence-calibrated
// path, the low-rank methods their posterior means. One row per repeat.
std::vector<BenchRow> bench_approx(const FeatureBundle& bundle,
                                   const CacheHyper& hyper,
                                   const std::vector<BenchMethod>& methods,
                                   int repeats);

// CSV columns: method,param,seed,accuracy,build_ms,query_ms
void write_bench_csv(const std::filesystem::path& path,
                     const std::vector<BenchRow>& rows);

}  // namespace gpcache
