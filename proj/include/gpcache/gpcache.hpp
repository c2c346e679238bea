#pragma once

#include "gpcache/calibration.hpp"
#include "gpcache/kernel.hpp"
#include "gpcache/types.hpp"

namespace gpcache {

struct CacheHyper {
  double alpha = 1.0;     // fusion weight (>= 0)
  KernelParams kernel{};  // beta
  double sigma2 = 1.0;    // observation noise (>= 0)
  double eta = 0.0;       // confidence-calibration exponent (>= 0)
};

enum class FusionMode { kNadarayaWatson, kGaussianProcess };

// Predictive variances below this floor are clamped before the eta power.
inline constexpr double kVarianceFloor = 1e-6;
// Added to sigma2 once if Cholesky fails with sigma2 below it.
inline constexpr double kJitter = 1e-8;

// Per-group linear system: Cholesky factor of A = K_g + sigma2 I over the
// group's keys and the precomputed weights A^{-1} Y_g.
struct GroupSolve {
  std::vector<int> class_ids;  // global class ids, column order of `weights`
  std::vector<int> key_rows;   // ascending key-row ids of this group
  Eigen::LLT<Eigen::MatrixXd> llt;
  Eigen::MatrixXd weights;     // n_g x c_g
  double applied_sigma2 = 0.0;  // includes jitter when it was needed
};

struct SolveCache {
  std::vector<GroupSolve> groups;
};

struct CacheModel {
  FeatureMatrix keys;              // raw unit-norm keys
  Eigen::MatrixXd keys_effective;  // calibrated keys (== keys.data if none)
  LabelVector labels;
  Eigen::MatrixXd values;          // one-hot labels, n x c
  CacheHyper hyper;
  std::optional<CalibrationLayer> calib;
  std::optional<GroupPartition> partition;
  SolveCache solve;

  int num_classes() const { return labels.num_classes; }
};

// queries . W  (m x c). Zero-shot side always uses raw query features.
Eigen::MatrixXd zero_shot_logits(const ZeroShotWeights& w,
                                 const FeatureMatrix& queries);

// Validates inputs, applies the calibration layer to the keys, splits them
// by the partition (one implicit group otherwise) and factors each group's
// K_g + sigma2 I, retrying once with jitter when sigma2 < 1e-8 and the
// factorization fails.
CacheModel build_cache(const FeatureMatrix& keys, const LabelVector& labels,
                       const CacheHyper& hyper,
                       std::optional<CalibrationLayer> calib = {},
                       std::optional<GroupPartition> partition = {});

// Refreshes keys_effective and the per-group factorizations from the
// model's current keys (used by the trainer after key updates; performs no
// norm enforcement).
void rebuild_solve(CacheModel& model);

// Kernel-weighted vote over ALL keys (partition ignored):
//   logits = kappa(f, F) Y.
Eigen::MatrixXd nw_cache_logits(const CacheModel& model,
                                const FeatureMatrix& queries);

struct GpResult {
  Eigen::MatrixXd logits;    // m x c
  Eigen::MatrixXd variance;  // m x num_groups, in [0, 1]
};

// Posterior-mean logits kappa(f, F_g) (K_g + sigma2 I)^{-1} Y_g per group,
// scattered back to global class columns, plus the per-group predictive
// variance 1 - kappa (K_g + sigma2 I)^{-1} kappa^T (clamped at 0 against
// rounding).
GpResult gp_cache_logits(const CacheModel& model, const FeatureMatrix& queries);

// Posterior-mean logits divided per query by max(variance, 1e-6)^eta of the
// query's group. eta = 0 reproduces gp_cache_logits exactly.
Eigen::MatrixXd confidence_calibrated_logits(const CacheModel& model,
                                             const FeatureMatrix& queries);

// zero_shot_logits + alpha * (N-W | confidence-calibrated) cache logits.
Eigen::MatrixXd fused_logits(const CacheModel& model, const ZeroShotWeights& w,
                             const FeatureMatrix& queries, FusionMode mode);

// Row-wise argmax of the fused logits; ties resolve to the lowest class id.
LabelVector predict(const CacheModel& model, const ZeroShotWeights& w,
                    const FeatureMatrix& queries, FusionMode mode);

namespace detail {

struct RegularizedFactor {
  Eigen::LLT<Eigen::MatrixXd> llt;
  double applied_sigma2 = 0.0;
};

// Cholesky of kernel + sigma2 I with the jitter retry policy; `context`
// names the system in errors/warnings.
RegularizedFactor factor_regularized(const Eigen::MatrixXd& kernel,
                                     double sigma2,
                                     const std::string& context);

struct GroupSpec {
  std::vector<int> class_ids;
  std::vector<int> key_rows;
};

// Group structure induced by a partition (or one group covering everything).
std::vector<GroupSpec> make_groups(const LabelVector& labels,
                                   const std::optional<GroupPartition>& part);

Eigen::VectorXi argmax_rows(const Eigen::MatrixXd& logits);

}  // namespace detail

}  // namespace gpcache
