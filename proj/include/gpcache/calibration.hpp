#pragma once

#include "gpcache/types.hpp"

namespace gpcache {

// Residual linear projection followed by re-normalization:
//   phi(f) = normalize(proj * f + f [+ bias])
// A zero projection (and absent bias) makes phi the identity on unit
// vectors, so freshly initialized layers leave similarities untouched.
struct CalibrationLayer {
  Eigen::MatrixXd proj;                 // dim x dim
  std::optional<Eigen::VectorXd> bias;  // dim

  Eigen::Index dim() const { return proj.rows(); }

  static CalibrationLayer identity(Eigen::Index dim, bool with_bias = false);
};

// Applies phi row-wise. Output rows are unit-norm.
FeatureMatrix apply(const CalibrationLayer& layer, const FeatureMatrix& x);

// phi(a) . phi(b), clamped to [-1, 1].
double calibrated_similarity(const CalibrationLayer& layer,
                             const Eigen::Ref<const Eigen::VectorXd>& a,
                             const Eigen::Ref<const Eigen::VectorXd>& b);

// The r rows most cosine-similar to row `anchor` in the ORIGINAL
// (uncalibrated) feature space. The anchor is always a member; remaining
// ties break toward the lower index. Returned ascending.
std::vector<int> mine_neighbors(const FeatureMatrix& unlabeled, int anchor,
                                int r);

enum class NeighborMining { kHard, kRandom };

struct ContrastiveConfig {
  int batch_size = 256;           // anchors per step
  int neighbors = 128;            // r, capped at the pool size
  double temperature = 0.07;      // tau
  int epochs = 10;
  double learning_rate = 0.01;
  double weight_decay = 5e-2;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  bool use_bias = false;
  NeighborMining mining = NeighborMining::kHard;
};

struct ContrastiveValue {
  double loss = 0.0;
  Eigen::MatrixXd grad_proj;   // dim x dim
  Eigen::VectorXd grad_bias;   // dim; empty when the layer has no bias
};

// InfoNCE over per-anchor neighbor sets. For anchor t with neighbor set I_t,
// each i in I_t contributes -log softmax_j(z_ij / tau)[j = i] where
// z_ij = phi(augmented_i) . phi(originals_j) and j ranges over I_t. The
// result is averaged over the anchors and returned together with the exact
// analytic gradient (through the re-normalization in phi).
ContrastiveValue contrastive_loss(
    const CalibrationLayer& layer, const FeatureMatrix& originals,
    const FeatureMatrix& augmented, const std::vector<int>& anchors,
    const std::vector<std::vector<int>>& neighbor_sets, double temperature);

struct EpochLoss {
  int epoch = 0;
  double mean_loss = 0.0;
};

// SGD (momentum, weight decay, cosine learning-rate decay to 0) on the
// contrastive objective. The projection starts at zero (identity phi);
// neighbor sets are mined from the original features. Deterministic given
// the config seed. Raises kNumerical if the loss turns non-finite.
CalibrationLayer train_calibration(const FeatureMatrix& unlabeled,
                                   const FeatureMatrix& augmented,
                                   const ContrastiveConfig& cfg,
                                   std::vector<EpochLoss>* log = nullptr);

// Mean within-class minus mean between-class (calibrated) similarity over a
// labeled split; `layer == nullptr` measures the raw features.
double similarity_margin(const CalibrationLayer* layer,
                         const FeatureMatrix& x, const LabelVector& y);

namespace detail {

// Forward pass of `apply` keeping quantities the backward pass needs.
struct AppliedRows {
  Eigen::MatrixXd rows;      // phi outputs (unit rows)
  Eigen::VectorXd inv_norm;  // 1 / ||proj f + f + bias|| per row
};
AppliedRows apply_forward(const CalibrationLayer& layer,
                          const Eigen::MatrixXd& x);

// Pulls a gradient w.r.t. normalized rows back through the row
// normalization: dU_i = (g_i - (f_i . g_i) f_i) * inv_norm_i.
Eigen::MatrixXd normalize_backward(const Eigen::MatrixXd& normalized,
                                   const Eigen::VectorXd& inv_norm,
                                   const Eigen::MatrixXd& grad_rows);

}  // namespace detail

}  // namespace gpcache
