#include "gpcache/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "gpcache/tuner.hpp"

namespace gpcache {
namespace {

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& m,
                          const std::vector<int>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  }
  return out;
}

Eigen::MatrixXd take_cols(const Eigen::MatrixXd& m,
                          const std::vector<int>& cols) {
  Eigen::MatrixXd out(m.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) {
    out.col(static_cast<Eigen::Index>(j)) = m.col(cols[j]);
  }
  return out;
}

// Kernel with the raw similarities kept around.  Gradients through the
// clamp: the upper bound only absorbs rounding overshoot of unit vectors
// (the true similarity is 1, slope beta*k), so it stays live; at or below
// the lower bound the slope is 0.
struct KernelForward {
  Eigen::MatrixXd raw;  // pre-clamp similarities
  Eigen::MatrixXd k;
};

KernelForward cross_kernel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                           double beta) {
  KernelForward kf;
  kf.raw = a * b.transpose();
  kf.k = (-beta *
          (1.0 - kf.raw.array().max(-1.0).min(1.0)))
             .exp()
             .matrix();
  return kf;
}

// d(similarity) = beta * (dK o K), masked where the lower clamp binds.
Eigen::MatrixXd kernel_backward(const KernelForward& kf,
                                const Eigen::MatrixXd& dk, double beta) {
  return (kf.raw.array() > -1.0)
      .select(beta * (dk.array() * kf.k.array()), 0.0)
      .matrix();
}

// One-hot minus softmax machinery shared by both objectives.
struct CrossEntropyValue {
  double loss = 0.0;
  Eigen::MatrixXd grad;  // d loss / d logits, rows x classes
};

CrossEntropyValue cross_entropy_with_grad(const Eigen::MatrixXd& logits,
                                          const LabelVector& labels) {
  if (labels.rows() != logits.rows()) {
    throw Error(ErrorKind::kInvalidArgument,
                "cross_entropy: feature/label row mismatch");
  }
  if (logits.rows() == 0) {
    throw Error(ErrorKind::kInvalidArgument, "cross_entropy: empty batch");
  }
  const Eigen::Index m = logits.rows();
  CrossEntropyValue value;
  value.grad.resize(m, logits.cols());
  const double inv_m = 1.0 / static_cast<double>(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const int y = labels.labels[i];
    if (y < 0 || y >= logits.cols()) {
      throw Error(ErrorKind::kInvalidArgument,
                  "cross_entropy: label out of range at row " +
                      std::to_string(i));
    }
    const double zmax = logits.row(i).maxCoeff();
    const Eigen::ArrayXd shifted = logits.row(i).array() - zmax;
    const Eigen::ArrayXd expz = shifted.exp();
    const double denom = expz.sum();
    value.loss += inv_m * (std::log(denom) - shifted[y]);
    value.grad.row(i) = (expz / denom).matrix().transpose() * inv_m;
    value.grad(i, y) -= inv_m;
  }
  return value;
}

// Effective (calibrated) rows plus what the pullback needs.
struct EffectiveRows {
  Eigen::MatrixXd rows;
  std::optional<detail::AppliedRows> fwd;  // set when a layer was applied
};

EffectiveRows effective_rows(const std::optional<CalibrationLayer>& calib,
                             const Eigen::MatrixXd& x) {
  EffectiveRows out;
  if (calib) {
    out.fwd = detail::apply_forward(*calib, x);
    out.rows = out.fwd->rows;
  } else {
    out.rows = x;
  }
  return out;
}

Eigen::MatrixXd pull_back_keys(const std::optional<CalibrationLayer>& calib,
                               const EffectiveRows& keys,
                               const Eigen::MatrixXd& grad_effective) {
  if (!calib) return grad_effective;
  const Eigen::MatrixXd du = detail::normalize_backward(
      keys.fwd->rows, keys.fwd->inv_norm, grad_effective);
  return du * (calib->proj +
               Eigen::MatrixXd::Identity(calib->dim(), calib->dim()));
}

void check_batch(const CacheModel& model, const FeatureMatrix& batch_x,
                 const LabelVector& batch_y) {
  if (batch_x.dim() != model.keys.dim()) {
    throw Error(ErrorKind::kInvalidArgument,
                "trainer: batch dim does not match key dim");
  }
  if (batch_y.rows() != batch_x.rows()) {
    throw Error(ErrorKind::kInvalidArgument,
                "trainer: batch feature/label row mismatch");
  }
  if (batch_y.num_classes != model.num_classes()) {
    throw Error(ErrorKind::kInvalidArgument,
                "trainer: batch num_classes does not match the cache");
  }
}

}  // namespace

double cross_entropy(const Eigen::MatrixXd& logits, const LabelVector& labels) {
  return cross_entropy_with_grad(logits, labels).loss;
}

KeyGradient loss_and_grad_keys(const CacheModel& model,
                               const ZeroShotWeights& w,
                               const FeatureMatrix& batch_x,
                               const LabelVector& batch_y, GradMode mode) {
  check_batch(model, batch_x, batch_y);
  const double beta = model.hyper.kernel.beta;
  const double eta = model.hyper.eta;
  const Eigen::Index m = batch_x.rows();
  const Eigen::Index n = model.keys.rows();

  const EffectiveRows keys = effective_rows(model.calib, model.keys.data);
  const EffectiveRows queries = effective_rows(model.calib, batch_x.data);

  struct GroupWork {
    const GroupSolve* solve = nullptr;
    Eigen::MatrixXd fg;       // effective group keys
    KernelForward kappa;      // queries x group keys
    Eigen::MatrixXd solved;   // (K_g + s2 I)^{-1} kappa^T
    Eigen::MatrixXd mean;     // kappa * weights
    Eigen::ArrayXd floored;   // max(variance, floor)
    Eigen::ArrayXd iden;      // floored^{-eta}
  };
  std::vector<GroupWork> work;
  work.reserve(model.solve.groups.size());

  Eigen::MatrixXd cache_logits =
      Eigen::MatrixXd::Zero(m, model.num_classes());
  for (const GroupSolve& solve : model.solve.groups) {
    if (solve.key_rows.empty()) continue;
    GroupWork gw;
    gw.solve = &solve;
    gw.fg = take_rows(keys.rows, solve.key_rows);
    gw.kappa = cross_kernel(queries.rows, gw.fg, beta);
    gw.mean = gw.kappa.k * solve.weights;
    gw.solved = solve.llt.solve(gw.kappa.k.transpose());
    gw.floored.resize(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      const double variance =
          std::max(0.0, 1.0 - gw.kappa.k.row(i).dot(gw.solved.col(i)));
      gw.floored[i] = std::max(variance, kVarianceFloor);
    }
    gw.iden = gw.floored.pow(-eta);
    for (std::size_t j = 0; j < solve.class_ids.size(); ++j) {
      cache_logits.col(solve.class_ids[j]) +=
          gw.iden.matrix().asDiagonal() *
          gw.mean.col(static_cast<Eigen::Index>(j));
    }
    work.push_back(std::move(gw));
  }

  const Eigen::MatrixXd fused =
      batch_x.data * w.matrix + model.hyper.alpha * cache_logits;
  const CrossEntropyValue ce = cross_entropy_with_grad(fused, batch_y);
  const Eigen::MatrixXd dcache = model.hyper.alpha * ce.grad;

  Eigen::MatrixXd grad_effective =
      Eigen::MatrixXd::Zero(n, model.keys.dim());
  for (const GroupWork& gw : work) {
    const GroupSolve& solve = *gw.solve;
    const Eigen::MatrixXd g = take_cols(dcache, solve.class_ids);

    // Mean path: d loss / d kappa through kappa * weights, scaled by the
    // confidence factor.
    Eigen::MatrixXd dkappa =
        (gw.iden.matrix().asDiagonal() * g) * solve.weights.transpose();
    Eigen::MatrixXd rv;  // variance path contribution to d kappa

    if (eta != 0.0) {
      // Confidence path: d iden/d variance = -eta * floored^(-eta-1),
      // cut where the floor (or the clamp at zero) binds, then
      // d variance / d kappa_i = -2 * solved_i.
      const Eigen::ArrayXd gu = (g.array() * gw.mean.array()).rowwise().sum();
      Eigen::ArrayXd cv = -eta * gu * gw.floored.pow(-eta - 1.0);
      cv = (gw.floored > kVarianceFloor).select(cv, 0.0);
      rv = (-2.0 * cv).matrix().asDiagonal() * gw.solved.transpose();
      dkappa += rv;
    }

    Eigen::MatrixXd dfg =
        kernel_backward(gw.kappa, dkappa, beta).transpose() * queries.rows;

    if (mode == GradMode::kFullGrad) {
      // Precision-matrix path: with A = K_g + s2 I,
      //   d loss / dA = -A^{-1} kappa^T (mean_path + variance_path / 2),
      // pushed into the group gram and symmetrized. The pinned diagonal is
      // constant.
      Eigen::MatrixXd inner =
          (gw.iden.matrix().asDiagonal() * g) * solve.weights.transpose();
      if (rv.size() != 0) inner += 0.5 * rv;
      const Eigen::MatrixXd abar =
          -solve.llt.solve(gw.kappa.k.transpose() * inner);
      KernelForward gram = cross_kernel(gw.fg, gw.fg, beta);
      gram.k.diagonal().setOnes();
      Eigen::MatrixXd h =
          (gram.raw.array() > -1.0)
              .select(abar.array() * gram.k.array(), 0.0)
              .matrix();
      h.diagonal().setZero();
      dfg += beta * (h + h.transpose()) * gw.fg;
    }

    for (std::size_t i = 0; i < solve.key_rows.size(); ++i) {
      grad_effective.row(solve.key_rows[i]) +=
          dfg.row(static_cast<Eigen::Index>(i));
    }
  }

  KeyGradient out;
  out.loss = ce.loss;
  out.grad_keys = pull_back_keys(model.calib, keys, grad_effective);
  return out;
}

KeyGradient nw_loss_and_grad_keys(const CacheModel& model,
                                  const ZeroShotWeights& w,
                                  const FeatureMatrix& batch_x,
                                  const LabelVector& batch_y) {
  check_batch(model, batch_x, batch_y);
  const double beta = model.hyper.kernel.beta;

  const EffectiveRows keys = effective_rows(model.calib, model.keys.data);
  const EffectiveRows queries = effective_rows(model.calib, batch_x.data);

  const KernelForward kappa = cross_kernel(queries.rows, keys.rows, beta);
  const Eigen::MatrixXd fused = batch_x.data * w.matrix +
                                model.hyper.alpha * (kappa.k * model.values);
  const CrossEntropyValue ce = cross_entropy_with_grad(fused, batch_y);

  const Eigen::MatrixXd dkappa =
      model.hyper.alpha * ce.grad * model.values.transpose();
  const Eigen::MatrixXd grad_effective =
      kernel_backward(kappa, dkappa, beta).transpose() * queries.rows;

  KeyGradient out;
  out.loss = ce.loss;
  out.grad_keys = pull_back_keys(model.calib, keys, grad_effective);
  return out;
}

namespace {

CacheModel run_finetune(const FeatureBundle& bundle, const CacheHyper& hyper,
                        const TrainConfig& cfg,
                        const std::optional<CalibrationLayer>& calib,
                        const std::optional<GroupPartition>& partition,
                        std::vector<FinetuneEpoch>* log, FusionMode eval_mode) {
  if (cfg.epochs < 0 || cfg.batch_size < 1 || cfg.rebuild_every < 1 ||
      !(cfg.learning_rate >= 0)) {
    throw Error(ErrorKind::kInvalidArgument, "finetune: invalid config");
  }
  bundle.validate();
  CacheModel model = build_cache(bundle.train_x, bundle.train_y, hyper, calib,
                                 partition);
  if (cfg.epochs == 0) return model;

  const int n = static_cast<int>(bundle.train_x.rows());
  std::mt19937_64 rng(cfg.seed);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  Eigen::MatrixXd velocity =
      Eigen::MatrixXd::Zero(n, bundle.train_x.dim());
  int steps_since_rebuild = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    int batches = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int count = std::min(cfg.batch_size, n - start);
      std::vector<int> rows(order.begin() + start,
                            order.begin() + start + count);
      FeatureMatrix batch_x{take_rows(bundle.train_x.data, rows)};
      LabelVector batch_y;
      batch_y.num_classes = bundle.num_classes();
      batch_y.labels.resize(count);
      for (int i = 0; i < count; ++i) {
        batch_y.labels[i] = bundle.train_y.labels[rows[i]];
      }

      const KeyGradient kg =
          eval_mode == FusionMode::kGaussianProcess
              ? loss_and_grad_keys(model, bundle.weights, batch_x, batch_y,
                                   cfg.mode)
              : nw_loss_and_grad_keys(model, bundle.weights, batch_x, batch_y);
      if (!std::isfinite(kg.loss)) {
        throw Error(ErrorKind::kNumerical,
                    "finetune: non-finite loss at epoch " +
                        std::to_string(epoch));
      }
      epoch_loss += kg.loss;
      ++batches;

      velocity = cfg.momentum * velocity +
                 (kg.grad_keys + cfg.weight_decay * model.keys.data);
      model.keys.data -= cfg.learning_rate * velocity;
      if (cfg.renormalize_keys) {
        normalize_rows(model.keys.data, "finetuned keys");
      }
      if (++steps_since_rebuild >= cfg.rebuild_every) {
        rebuild_solve(model);
        steps_since_rebuild = 0;
      }
    }
    if (steps_since_rebuild > 0) {
      rebuild_solve(model);
      steps_since_rebuild = 0;
    }
    if (log != nullptr) {
      const LabelVector pred =
          predict(model, bundle.weights, bundle.val_x, eval_mode);
      log->push_back(FinetuneEpoch{
          epoch, epoch_loss / batches,
          accuracy(pred.labels, bundle.val_y.labels)});
    }
  }
  return model;
}

}  // namespace

CacheModel finetune(const FeatureBundle& bundle, const CacheHyper& hyper,
                    const TrainConfig& cfg,
                    const std::optional<CalibrationLayer>& calib,
                    const std::optional<GroupPartition>& partition,
                    std::vector<FinetuneEpoch>* log) {
  return run_finetune(bundle, hyper, cfg, calib, partition, log,
                      FusionMode::kGaussianProcess);
}

CacheModel finetune_nw_baseline(const FeatureBundle& bundle,
                                const CacheHyper& hyper,
                                const TrainConfig& cfg,
                                const std::optional<CalibrationLayer>& calib,
                                std::vector<FinetuneEpoch>* log) {
  return run_finetune(bundle, hyper, cfg, calib, {}, log,
                      FusionMode::kNadarayaWatson);
}

}  // namespace gpcache
