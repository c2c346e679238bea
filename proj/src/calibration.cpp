#include "gpcache/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace gpcache {
namespace detail {

AppliedRows apply_forward(const CalibrationLayer& layer,
                          const Eigen::MatrixXd& x) {
  if (x.cols() != layer.dim()) {
    throw Error(ErrorKind::kInvalidArgument,
                "calibration: feature dim " + std::to_string(x.cols()) +
                    " does not match layer dim " +
                    std::to_string(layer.dim()));
  }
  Eigen::MatrixXd u = x * layer.proj.transpose() + x;
  if (layer.bias) {
    u.rowwise() += layer.bias->transpose();
  }
  AppliedRows out;
  out.inv_norm.resize(u.rows());
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    const double n = u.row(i).norm();
    if (!(n > 1e-12)) {
      throw Error(ErrorKind::kNumerical,
                  "calibration: output row " + std::to_string(i) +
                      " has vanishing norm");
    }
    out.inv_norm[i] = 1.0 / n;
  }
  out.rows = out.inv_norm.asDiagonal() * u;
  return out;
}

Eigen::MatrixXd normalize_backward(const Eigen::MatrixXd& normalized,
                                   const Eigen::VectorXd& inv_norm,
                                   const Eigen::MatrixXd& grad_rows) {
  const Eigen::VectorXd proj = (normalized.array() * grad_rows.array())
                                   .rowwise()
                                   .sum()
                                   .matrix();
  Eigen::MatrixXd du = grad_rows - proj.asDiagonal() * normalized;
  return inv_norm.asDiagonal() * du;
}

}  // namespace detail

CalibrationLayer CalibrationLayer::identity(Eigen::Index dim, bool with_bias) {
  CalibrationLayer layer;
  layer.proj = Eigen::MatrixXd::Zero(dim, dim);
  if (with_bias) {
    layer.bias = Eigen::VectorXd::Zero(dim);
  }
  return layer;
}

FeatureMatrix apply(const CalibrationLayer& layer, const FeatureMatrix& x) {
  return FeatureMatrix{detail::apply_forward(layer, x.data).rows};
}

double calibrated_similarity(const CalibrationLayer& layer,
                             const Eigen::Ref<const Eigen::VectorXd>& a,
                             const Eigen::Ref<const Eigen::VectorXd>& b) {
  Eigen::MatrixXd pair(2, a.size());
  pair.row(0) = a.transpose();
  pair.row(1) = b.transpose();
  const Eigen::MatrixXd rows = detail::apply_forward(layer, pair).rows;
  return std::clamp(rows.row(0).dot(rows.row(1)), -1.0, 1.0);
}

std::vector<int> mine_neighbors(const FeatureMatrix& unlabeled, int anchor,
                                int r) {
  const int n = static_cast<int>(unlabeled.rows());
  if (anchor < 0 || anchor >= n) {
    throw Error(ErrorKind::kInvalidArgument,
                "mine_neighbors: anchor " + std::to_string(anchor) +
                    " outside [0, " + std::to_string(n) + ")");
  }
  if (r < 1) {
    throw Error(ErrorKind::kInvalidArgument, "mine_neighbors: r must be >= 1");
  }
  r = std::min(r, n);

  const Eigen::VectorXd sims =
      unlabeled.data * unlabeled.data.row(anchor).transpose();
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  // Anchor first, then by similarity descending, index ascending on ties.
  std::sort(order.begin(), order.end(), [&](int lhs, int rhs) {
    if (lhs == anchor || rhs == anchor) return lhs == anchor;
    if (sims[lhs] != sims[rhs]) return sims[lhs] > sims[rhs];
    return lhs < rhs;
  });
  std::vector<int> picked(order.begin(), order.begin() + r);
  std::sort(picked.begin(), picked.end());
  return picked;
}

ContrastiveValue contrastive_loss(
    const CalibrationLayer& layer, const FeatureMatrix& originals,
    const FeatureMatrix& augmented, const std::vector<int>& anchors,
    const std::vector<std::vector<int>>& neighbor_sets, double temperature) {
  if (anchors.size() != neighbor_sets.size()) {
    throw Error(ErrorKind::kInvalidArgument,
                "contrastive_loss: one neighbor set per anchor required");
  }
  if (anchors.empty()) {
    throw Error(ErrorKind::kInvalidArgument,
                "contrastive_loss: empty anchor batch");
  }
  if (!(temperature > 0)) {
    throw Error(ErrorKind::kInvalidArgument,
                "contrastive_loss: temperature must be positive");
  }
  if (originals.rows() != augmented.rows() ||
      originals.dim() != augmented.dim()) {
    throw Error(ErrorKind::kInvalidArgument,
                "contrastive_loss: originals/augmented shape mismatch");
  }
  const int n = static_cast<int>(originals.rows());

  const detail::AppliedRows orig = detail::apply_forward(layer, originals.data);
  const detail::AppliedRows aug = detail::apply_forward(layer, augmented.data);

  Eigen::MatrixXd grad_orig = Eigen::MatrixXd::Zero(n, originals.dim());
  Eigen::MatrixXd grad_aug = Eigen::MatrixXd::Zero(n, originals.dim());
  double loss = 0.0;

  const double inv_batch = 1.0 / static_cast<double>(anchors.size());
  for (std::size_t t = 0; t < anchors.size(); ++t) {
    const std::vector<int>& members = neighbor_sets[t];
    if (members.empty()) {
      throw Error(ErrorKind::kInvalidArgument,
                  "contrastive_loss: empty neighbor set");
    }
    const int r = static_cast<int>(members.size());
    Eigen::MatrixXd ft(r, originals.dim());
    Eigen::MatrixXd gt(r, originals.dim());
    for (int i = 0; i < r; ++i) {
      const int row = members[i];
      if (row < 0 || row >= n) {
        throw Error(ErrorKind::kInvalidArgument,
                    "contrastive_loss: neighbor index " + std::to_string(row) +
                        " outside [0, " + std::to_string(n) + ")");
      }
      ft.row(i) = orig.rows.row(row);
      gt.row(i) = aug.rows.row(row);
    }

    // z_ij = phi(aug_i) . phi(orig_j) / tau over the member set; positives on
    // the diagonal. No clamping here: the loss stays smooth in the layer.
    Eigen::MatrixXd z = (gt * ft.transpose()) / temperature;
    Eigen::MatrixXd soft(r, r);
    for (int i = 0; i < r; ++i) {
      const double zmax = z.row(i).maxCoeff();
      const Eigen::ArrayXd shifted = z.row(i).array() - zmax;
      const Eigen::ArrayXd expz = shifted.exp();
      const double denom = expz.sum();
      soft.row(i) = (expz / denom).matrix().transpose();
      loss += inv_batch * (std::log(denom) - shifted[i]);
    }

    Eigen::MatrixXd coefs =
        (soft - Eigen::MatrixXd::Identity(r, r)) * (inv_batch / temperature);
    const Eigen::MatrixXd dgt = coefs * ft;
    const Eigen::MatrixXd dft = coefs.transpose() * gt;
    for (int i = 0; i < r; ++i) {
      grad_aug.row(members[i]) += dgt.row(i);
      grad_orig.row(members[i]) += dft.row(i);
    }
  }

  const Eigen::MatrixXd du_orig =
      detail::normalize_backward(orig.rows, orig.inv_norm, grad_orig);
  const Eigen::MatrixXd du_aug =
      detail::normalize_backward(aug.rows, aug.inv_norm, grad_aug);

  ContrastiveValue value;
  value.loss = loss;
  value.grad_proj = du_orig.transpose() * originals.data +
                    du_aug.transpose() * augmented.data;
  if (layer.bias) {
    value.grad_bias =
        du_orig.colwise().sum().transpose() + du_aug.colwise().sum().transpose();
  }
  return value;
}

CalibrationLayer train_calibration(const FeatureMatrix& unlabeled,
                                   const FeatureMatrix& augmented,
                                   const ContrastiveConfig& cfg,
                                   std::vector<EpochLoss>* log) {
  if (unlabeled.rows() == 0) {
    throw Error(ErrorKind::kInvalidArgument,
                "train_calibration: empty unlabeled pool");
  }
  if (unlabeled.rows() != augmented.rows() ||
      unlabeled.dim() != augmented.dim()) {
    throw Error(ErrorKind::kInvalidArgument,
                "train_calibration: originals/augmented shape mismatch");
  }
  if (cfg.batch_size < 1 || cfg.neighbors < 1 || cfg.epochs < 0 ||
      !(cfg.temperature > 0) || !(cfg.learning_rate >= 0)) {
    throw Error(ErrorKind::kInvalidArgument,
                "train_calibration: invalid config");
  }

  const int n = static_cast<int>(unlabeled.rows());
  const int r = std::min(cfg.neighbors, n);
  const Eigen::Index dim = unlabeled.dim();

  CalibrationLayer layer = CalibrationLayer::identity(dim, cfg.use_bias);
  if (cfg.epochs == 0) return layer;

  // Hard sets depend only on the fixed original features: mine once.
  std::vector<std::vector<int>> hard_sets;
  if (cfg.mining == NeighborMining::kHard) {
    hard_sets.resize(n);
    for (int i = 0; i < n; ++i) {
      hard_sets[i] = mine_neighbors(unlabeled, i, r);
    }
  }

  std::mt19937_64 rng(cfg.seed);
  const int steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int total_steps = cfg.epochs * steps_per_epoch;

  Eigen::MatrixXd vel_proj = Eigen::MatrixXd::Zero(dim, dim);
  Eigen::VectorXd vel_bias = Eigen::VectorXd::Zero(dim);

  std::vector<int> anchor_order(n);
  std::iota(anchor_order.begin(), anchor_order.end(), 0);

  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Random sets are redrawn each epoch: anchor plus r - 1 distinct others.
    std::vector<std::vector<int>> random_sets;
    if (cfg.mining == NeighborMining::kRandom) {
      random_sets.resize(n);
      std::vector<int> others(n);
      for (int i = 0; i < n; ++i) {
        others.clear();
        for (int j = 0; j < n; ++j) {
          if (j != i) others.push_back(j);
        }
        std::shuffle(others.begin(), others.end(), rng);
        std::vector<int>& set = random_sets[i];
        set.assign(others.begin(), others.begin() + (r - 1));
        set.push_back(i);
        std::sort(set.begin(), set.end());
      }
    }
    const std::vector<std::vector<int>>& sets =
        cfg.mining == NeighborMining::kHard ? hard_sets : random_sets;

    std::shuffle(anchor_order.begin(), anchor_order.end(), rng);

    double epoch_loss = 0.0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int count = std::min(cfg.batch_size, n - start);
      std::vector<int> batch(anchor_order.begin() + start,
                             anchor_order.begin() + start + count);
      std::vector<std::vector<int>> batch_sets;
      batch_sets.reserve(batch.size());
      for (int a : batch) batch_sets.push_back(sets[a]);

      const ContrastiveValue value = contrastive_loss(
          layer, unlabeled, augmented, batch, batch_sets, cfg.temperature);
      if (!std::isfinite(value.loss)) {
        throw Error(ErrorKind::kNumerical,
                    "train_calibration: non-finite loss at epoch " +
                        std::to_string(epoch));
      }
      epoch_loss += value.loss * count;

      const double lr =
          cfg.learning_rate * 0.5 *
          (1.0 + std::cos(M_PI * static_cast<double>(step) / total_steps));
      vel_proj = cfg.momentum * vel_proj +
                 (value.grad_proj + cfg.weight_decay * layer.proj);
      layer.proj -= lr * vel_proj;
      if (layer.bias) {
        vel_bias = cfg.momentum * vel_bias + value.grad_bias;
        *layer.bias -= lr * vel_bias;
      }
      ++step;
    }
    if (log != nullptr) {
      log->push_back(EpochLoss{epoch, epoch_loss / n});
    }
  }
  return layer;
}

double similarity_margin(const CalibrationLayer* layer, const FeatureMatrix& x,
                         const LabelVector& y) {
  if (y.rows() != x.rows()) {
    throw Error(ErrorKind::kInvalidArgument,
                "similarity_margin: feature/label row mismatch");
  }
  Eigen::MatrixXd rows =
      layer != nullptr ? detail::apply_forward(*layer, x.data).rows : x.data;
  Eigen::MatrixXd sims = rows * rows.transpose();
  sims = sims.cwiseMax(-1.0).cwiseMin(1.0);

  double within = 0.0, between = 0.0;
  std::int64_t n_within = 0, n_between = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < x.rows(); ++j) {
      if (y.labels[i] == y.labels[j]) {
        within += sims(i, j);
        ++n_within;
      } else {
        between += sims(i, j);
        ++n_between;
      }
    }
  }
  if (n_within == 0 || n_between == 0) {
    throw Error(ErrorKind::kInvalidArgument,
                "similarity_margin: need both within- and between-class pairs");
  }
  return within / static_cast<double>(n_within) -
         between / static_cast<double>(n_between);
}

}  // namespace gpcache
