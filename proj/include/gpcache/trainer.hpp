#pragma once

#include "gpcache/gpcache.hpp"
#include "gpcache/types.hpp"

namespace gpcache {

enum class GradMode {
  // Differentiates through everything, including the precision matrix
  // (K + sigma2 I)^{-1} via d(A^{-1}) = -A^{-1} dA A^{-1}.
  kFullGrad,
  // Treats the precision matrix as a constant wherever it appears; only the
  // query-key kernels stay live.
  kNoGrad,
};

struct TrainConfig {
  int epochs = 20;
  int batch_size = 256;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  GradMode mode = GradMode::kFullGrad;
  // SolveCache refresh period in optimizer steps; 1 keeps gradients exact,
  // larger values trade accuracy for speed (stale precision matrix).
  int rebuild_every = 1;
  bool renormalize_keys = true;  // project keys back to the sphere per step
};

// Mean negative log softmax of the true class, log-sum-exp stabilized.
double cross_entropy(const Eigen::MatrixXd& logits, const LabelVector& labels);

struct KeyGradient {
  double loss = 0.0;
  Eigen::MatrixXd grad_keys;  // n x dim, w.r.t. the raw keys
};

// Cross entropy of the fused (zero-shot + confidence-calibrated cache)
// logits on the batch, differentiated w.r.t. the cache keys. Kernels are
// evaluated at the model's current keys; the per-group factorizations come
// from model.solve as-is (the caller keeps them in sync; see
// TrainConfig::rebuild_every). The calibration layer, when present, is
// frozen but gradients flow through its application to the keys.
KeyGradient loss_and_grad_keys(const CacheModel& model,
                               const ZeroShotWeights& w,
                               const FeatureMatrix& batch_x,
                               const LabelVector& batch_y, GradMode mode);

// Same objective without the GP machinery: fused N-W cache logits,
// gradients through the query-key kernel only.
KeyGradient nw_loss_and_grad_keys(const CacheModel& model,
                                  const ZeroShotWeights& w,
                                  const FeatureMatrix& batch_x,
                                  const LabelVector& batch_y);

struct FinetuneEpoch {
  int epoch = 0;
  double train_loss = 0.0;    // mean batch loss
  double val_accuracy = 0.0;
};

// Unfreezes the cache keys (initialized to the training features) and runs
// minibatch SGD with momentum on the fused cross entropy over the training
// split. Keys are re-normalized after each step (unless disabled) and the
// SolveCache is refreshed every rebuild_every steps. epochs == 0 returns
// the training-free model unchanged. Raises kNumerical on divergence.
CacheModel finetune(const FeatureBundle& bundle, const CacheHyper& hyper,
                    const TrainConfig& cfg,
                    const std::optional<CalibrationLayer>& calib = {},
                    const std::optional<GroupPartition>& partition = {},
                    std::vector<FinetuneEpoch>* log = nullptr);

// The same loop on the N-W objective (no precision matrix anywhere).
CacheModel finetune_nw_baseline(const FeatureBundle& bundle,
                                const CacheHyper& hyper,
                                const TrainConfig& cfg,
                                const std::optional<CalibrationLayer>& calib = {},
                                std::vector<FinetuneEpoch>* log = nullptr);

}  // namespace gpcache
