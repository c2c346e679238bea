#include "gpcache/tuner.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>

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

std::array<double, 4> hyper_tuple(const CacheHyper& h) {
  return {h.alpha, h.kernel.beta, h.sigma2, h.eta};
}

}  // namespace

double accuracy(const Eigen::VectorXi& predicted, const Eigen::VectorXi& truth) {
  if (predicted.size() != truth.size()) {
    throw Error(ErrorKind::kInvalidArgument,
                "accuracy: prediction/truth size mismatch");
  }
  if (predicted.size() == 0) return 0.0;
  return static_cast<double>((predicted.array() == truth.array()).count()) /
         static_cast<double>(predicted.size());
}

SearchSplits search_view(const FeatureBundle& bundle) {
  return SearchSplits{bundle.train_x, bundle.train_y, bundle.val_x,
                      bundle.val_y, bundle.weights};
}

GridResult grid_search(const SearchSplits& splits, const SearchSpace& space,
                       FusionMode mode,
                       const std::optional<CalibrationLayer>& calib,
                       const std::optional<GroupPartition>& partition) {
  if (space.alphas.empty() || space.betas.empty() || space.sigma2s.empty() ||
      space.etas.empty()) {
    throw Error(ErrorKind::kInvalidArgument,
                "grid_search: every dimension needs at least one value");
  }
  if (splits.train_y.rows() != splits.train_x.rows() ||
      splits.val_y.rows() != splits.val_x.rows()) {
    throw Error(ErrorKind::kInvalidArgument,
                "grid_search: feature/label row mismatch");
  }
  const int c = splits.train_y.num_classes;
  if (splits.weights.matrix.rows() != splits.train_x.dim() ||
      splits.weights.matrix.cols() != c) {
    throw Error(ErrorKind::kInvalidArgument,
                "grid_search: weight shape does not match the splits");
  }

  // Calibration and the zero-shot logits are hyperparameter independent.
  const Eigen::MatrixXd keys =
      calib ? detail::apply_forward(*calib, splits.train_x.data).rows
            : splits.train_x.data;
  const Eigen::MatrixXd queries =
      calib ? detail::apply_forward(*calib, splits.val_x.data).rows
            : splits.val_x.data;
  const Eigen::MatrixXd zs = splits.val_x.data * splits.weights.matrix;
  const Eigen::Index m = queries.rows();

  const std::vector<detail::GroupSpec> groups =
      detail::make_groups(splits.train_y, partition);
  const Eigen::MatrixXd values = splits.train_y.one_hot();

  GridResult result;
  result.best_val_accuracy = -1.0;
  result.rows.reserve(space.betas.size() * space.sigma2s.size() *
                      space.etas.size() * space.alphas.size());

  for (double beta : space.betas) {
    // Kernels depend only on beta.
    std::vector<Eigen::MatrixXd> grams, kappas, group_values;
    grams.reserve(groups.size());
    for (const detail::GroupSpec& g : groups) {
      const Eigen::MatrixXd fg = take_rows(keys, g.key_rows);
      grams.push_back(detail::self_gaussian(fg, beta));
      kappas.push_back(detail::cross_gaussian(queries, fg, beta));
      Eigen::MatrixXd yg(fg.rows(), static_cast<Eigen::Index>(g.class_ids.size()));
      const Eigen::MatrixXd yrows = take_rows(values, g.key_rows);
      for (std::size_t j = 0; j < g.class_ids.size(); ++j) {
        yg.col(static_cast<Eigen::Index>(j)) = yrows.col(g.class_ids[j]);
      }
      group_values.push_back(std::move(yg));
    }
    Eigen::MatrixXd nw_cache;
    if (mode == FusionMode::kNadarayaWatson) {
      nw_cache = detail::cross_gaussian(queries, keys, beta) * values;
    }

    for (double sigma2 : space.sigma2s) {
      // One factorization per group per (beta, sigma2).
      std::vector<Eigen::MatrixXd> means;   // kappa * A^{-1} Y_g
      std::vector<Eigen::ArrayXd> variances;
      if (mode == FusionMode::kGaussianProcess) {
        means.reserve(groups.size());
        variances.reserve(groups.size());
        for (std::size_t g = 0; g < groups.size(); ++g) {
          if (groups[g].key_rows.empty()) {
            means.emplace_back(Eigen::MatrixXd::Zero(
                m, static_cast<Eigen::Index>(groups[g].class_ids.size())));
            variances.emplace_back(Eigen::ArrayXd::Ones(m));
            continue;
          }
          detail::RegularizedFactor factor = detail::factor_regularized(
              grams[g], sigma2, "grid group " + std::to_string(g));
          means.push_back(kappas[g] * factor.llt.solve(group_values[g]));
          const Eigen::MatrixXd solved =
              factor.llt.solve(kappas[g].transpose());
          Eigen::ArrayXd v(m);
          for (Eigen::Index i = 0; i < m; ++i) {
            v[i] = std::max(0.0, 1.0 - kappas[g].row(i).dot(solved.col(i)));
          }
          variances.push_back(std::move(v));
        }
      }

      for (double eta : space.etas) {
        Eigen::MatrixXd cache;
        if (mode == FusionMode::kGaussianProcess) {
          cache = Eigen::MatrixXd::Zero(m, c);
          for (std::size_t g = 0; g < groups.size(); ++g) {
            const Eigen::ArrayXd scale =
                variances[g].max(kVarianceFloor).pow(eta);
            for (std::size_t j = 0; j < groups[g].class_ids.size(); ++j) {
              cache.col(groups[g].class_ids[j]) +=
                  (means[g].col(static_cast<Eigen::Index>(j)).array() / scale)
                      .matrix();
            }
          }
        } else {
          cache = nw_cache;
        }

        for (double alpha : space.alphas) {
          const Eigen::MatrixXd fused = zs + alpha * cache;
          const double acc =
              accuracy(detail::argmax_rows(fused), splits.val_y.labels);
          result.rows.push_back(GridRow{alpha, beta, sigma2, eta, acc});

          CacheHyper candidate;
          candidate.alpha = alpha;
          candidate.kernel.beta = beta;
          candidate.sigma2 = sigma2;
          candidate.eta = eta;
          if (acc > result.best_val_accuracy ||
              (acc == result.best_val_accuracy &&
               hyper_tuple(candidate) < hyper_tuple(result.best))) {
            result.best = candidate;
            result.best_val_accuracy = acc;
          }
        }
      }
    }
  }
  return result;
}

EvalReport evaluate(const FeatureBundle& bundle, const CacheHyper& hyper,
                    FusionMode mode,
                    const std::optional<CalibrationLayer>& calib,
                    const std::optional<GroupPartition>& partition) {
  const CacheModel model =
      build_cache(bundle.train_x, bundle.train_y, hyper, calib, partition);
  EvalReport report;
  report.val_accuracy =
      accuracy(predict(model, bundle.weights, bundle.val_x, mode).labels,
               bundle.val_y.labels);
  const LabelVector test_pred =
      predict(model, bundle.weights, bundle.test_x, mode);
  report.test_accuracy = accuracy(test_pred.labels, bundle.test_y.labels);

  report.per_class_accuracy.assign(bundle.num_classes(), 0.0);
  std::vector<int> correct(bundle.num_classes(), 0), total(bundle.num_classes(), 0);
  for (Eigen::Index i = 0; i < bundle.test_y.rows(); ++i) {
    const int truth = bundle.test_y.labels[i];
    ++total[truth];
    if (test_pred.labels[i] == truth) ++correct[truth];
  }
  for (int cls = 0; cls < bundle.num_classes(); ++cls) {
    if (total[cls] > 0) {
      report.per_class_accuracy[cls] =
          static_cast<double>(correct[cls]) / total[cls];
    }
  }
  return report;
}

void write_grid_csv(const std::filesystem::path& path,
                    const std::vector<GridRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw Error(ErrorKind::kIo, path.string() + ": cannot open for writing");
  }
  out << "alpha,beta,sigma2,eta,val_accuracy\n";
  char buf[160];
  for (const GridRow& row : rows) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g\n", row.alpha,
                  row.beta, row.sigma2, row.eta, row.val_accuracy);
    out << buf;
  }
  if (!out) {
    throw Error(ErrorKind::kIo, path.string() + ": write failed");
  }
}

}  // namespace gpcache
