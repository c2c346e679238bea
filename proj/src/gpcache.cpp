#include "gpcache/gpcache.hpp"

#include <cmath>
#include <iostream>
#include <numeric>

namespace gpcache {
namespace detail {

RegularizedFactor factor_regularized(const Eigen::MatrixXd& kernel,
                                     double sigma2,
                                     const std::string& context) {
  if (!(sigma2 >= 0)) {
    throw Error(ErrorKind::kInvalidArgument,
                context + ": sigma2 must be >= 0, got " +
                    std::to_string(sigma2));
  }
  const Eigen::Index n = kernel.rows();
  auto attempt = [&](double s2) -> std::optional<Eigen::LLT<Eigen::MatrixXd>> {
    Eigen::MatrixXd a = kernel;
    a.diagonal().array() += s2;
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    if (llt.info() != Eigen::Success) return std::nullopt;
    const Eigen::VectorXd d = llt.matrixLLT().diagonal();
    const double dmin = d.minCoeff();
    const double dmax = d.maxCoeff();
    if (!(dmin > 0) || (dmin / dmax) * (dmin / dmax) < 1e-12) {
      return std::nullopt;
    }
    return llt;
  };

  RegularizedFactor out;
  out.applied_sigma2 = sigma2;
  if (n == 0) {
    return out;
  }
  if (auto llt = attempt(sigma2)) {
    out.llt = std::move(*llt);
    return out;
  }
  if (sigma2 < kJitter) {
    const double padded = sigma2 + kJitter;
    if (auto llt = attempt(padded)) {
      std::cerr << "warning: " << context << ": added jitter " << kJitter
                << " to sigma2=" << sigma2 << " for a stable factorization\n";
      out.llt = std::move(*llt);
      out.applied_sigma2 = padded;
      return out;
    }
  }
  throw Error(ErrorKind::kNumerical,
              context + ": kernel + sigma2 I is not positive definite "
                        "(sigma2 = " +
                  std::to_string(sigma2) + ", n = " + std::to_string(n) + ")");
}

std::vector<GroupSpec> make_groups(const LabelVector& labels,
                                   const std::optional<GroupPartition>& part) {
  const int c = labels.num_classes;
  std::vector<std::vector<int>> class_groups;
  if (part) {
    if (part->num_classes != c) {
      throw Error(ErrorKind::kInvalidArgument,
                  "partition covers " + std::to_string(part->num_classes) +
                      " classes but labels have " + std::to_string(c));
    }
    std::vector<bool> seen(c, false);
    for (const auto& g : part->groups) {
      for (int id : g) {
        if (id < 0 || id >= c || seen[id]) {
          throw Error(ErrorKind::kInvalidArgument,
                      "partition: class id " + std::to_string(id) +
                          " missing, duplicated, or out of range");
        }
        seen[id] = true;
      }
    }
    for (int id = 0; id < c; ++id) {
      if (!seen[id]) {
        throw Error(ErrorKind::kInvalidArgument,
                    "partition: class id " + std::to_string(id) +
                        " not assigned to any group");
      }
    }
    class_groups = part->groups;
  } else {
    class_groups.emplace_back(c);
    std::iota(class_groups.back().begin(), class_groups.back().end(), 0);
  }

  std::vector<GroupSpec> specs;
  specs.reserve(class_groups.size());
  for (const auto& ids : class_groups) {
    GroupSpec spec;
    spec.class_ids = ids;
    std::vector<bool> member(c, false);
    for (int id : ids) member[id] = true;
    for (Eigen::Index i = 0; i < labels.rows(); ++i) {
      if (member[labels.labels[i]]) {
        spec.key_rows.push_back(static_cast<int>(i));
      }
    }
    specs.push_back(std::move(spec));
  }
  return specs;
}

Eigen::VectorXi argmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::VectorXi out(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);
    out[i] = static_cast<int>(best);
  }
  return out;
}

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

void check_queries(const CacheModel& model, const FeatureMatrix& queries) {
  if (queries.dim() != model.keys.dim()) {
    throw Error(ErrorKind::kInvalidArgument,
                "queries have dim " + std::to_string(queries.dim()) +
                    " but the cache was built with dim " +
                    std::to_string(model.keys.dim()));
  }
}

Eigen::MatrixXd effective_queries(const CacheModel& model,
                                  const FeatureMatrix& queries) {
  if (model.calib) {
    return detail::apply_forward(*model.calib, queries.data).rows;
  }
  return queries.data;
}

}  // namespace
}  // namespace detail

Eigen::MatrixXd zero_shot_logits(const ZeroShotWeights& w,
                                 const FeatureMatrix& queries) {
  if (queries.dim() != w.matrix.rows()) {
    throw Error(ErrorKind::kInvalidArgument,
                "zero_shot_logits: query dim " + std::to_string(queries.dim()) +
                    " does not match weight rows " +
                    std::to_string(w.matrix.rows()));
  }
  return queries.data * w.matrix;
}

CacheModel build_cache(const FeatureMatrix& keys, const LabelVector& labels,
                       const CacheHyper& hyper,
                       std::optional<CalibrationLayer> calib,
                       std::optional<GroupPartition> partition) {
  if (keys.rows() == 0) {
    throw Error(ErrorKind::kInvalidArgument, "build_cache: no keys");
  }
  if (labels.rows() != keys.rows()) {
    throw Error(ErrorKind::kInvalidArgument,
                "build_cache: " + std::to_string(labels.rows()) +
                    " labels for " + std::to_string(keys.rows()) + " keys");
  }
  if (labels.num_classes < 1) {
    throw Error(ErrorKind::kInvalidArgument,
                "build_cache: num_classes must be >= 1");
  }
  for (Eigen::Index i = 0; i < labels.rows(); ++i) {
    if (labels.labels[i] < 0 || labels.labels[i] >= labels.num_classes) {
      throw Error(ErrorKind::kInvalidArgument,
                  "build_cache: label out of range at row " +
                      std::to_string(i));
    }
  }
  if (!(hyper.alpha >= 0) || !(hyper.eta >= 0)) {
    throw Error(ErrorKind::kInvalidArgument,
                "build_cache: alpha and eta must be >= 0");
  }
  if (calib && calib->dim() != keys.dim()) {
    throw Error(ErrorKind::kInvalidArgument,
                "build_cache: calibration dim does not match key dim");
  }

  CacheModel model;
  model.keys = keys;
  model.labels = labels;
  model.values = labels.one_hot();
  model.hyper = hyper;
  model.calib = std::move(calib);
  model.partition = std::move(partition);
  rebuild_solve(model);
  return model;
}

void rebuild_solve(CacheModel& model) {
  model.keys_effective =
      model.calib
          ? detail::apply_forward(*model.calib, model.keys.data).rows
          : model.keys.data;

  const std::vector<detail::GroupSpec> specs =
      detail::make_groups(model.labels, model.partition);
  model.solve.groups.clear();
  model.solve.groups.reserve(specs.size());
  for (std::size_t g = 0; g < specs.size(); ++g) {
    GroupSolve solve;
    solve.class_ids = specs[g].class_ids;
    solve.key_rows = specs[g].key_rows;
    const Eigen::MatrixXd fg =
        detail::take_rows(model.keys_effective, solve.key_rows);
    const Eigen::MatrixXd kg = detail::self_gaussian(fg, model.hyper.kernel.beta);
    if (!solve.key_rows.empty()) {
      detail::RegularizedFactor factor = detail::factor_regularized(
          kg, model.hyper.sigma2, "cache group " + std::to_string(g));
      const Eigen::MatrixXd yg = detail::take_cols(
          detail::take_rows(model.values, solve.key_rows), solve.class_ids);
      solve.weights = factor.llt.solve(yg);
      solve.llt = std::move(factor.llt);
      solve.applied_sigma2 = factor.applied_sigma2;
    } else {
      solve.applied_sigma2 = model.hyper.sigma2;
    }
    model.solve.groups.push_back(std::move(solve));
  }
}

Eigen::MatrixXd nw_cache_logits(const CacheModel& model,
                                const FeatureMatrix& queries) {
  detail::check_queries(model, queries);
  const Eigen::MatrixXd q = detail::effective_queries(model, queries);
  const Eigen::MatrixXd kappa =
      detail::cross_gaussian(q, model.keys_effective, model.hyper.kernel.beta);
  return kappa * model.values;
}

GpResult gp_cache_logits(const CacheModel& model,
                         const FeatureMatrix& queries) {
  detail::check_queries(model, queries);
  const Eigen::MatrixXd q = detail::effective_queries(model, queries);
  const Eigen::Index m = q.rows();
  const auto& groups = model.solve.groups;

  GpResult result;
  result.logits = Eigen::MatrixXd::Zero(m, model.num_classes());
  result.variance =
      Eigen::MatrixXd::Ones(m, static_cast<Eigen::Index>(groups.size()));

  for (std::size_t g = 0; g < groups.size(); ++g) {
    const GroupSolve& group = groups[g];
    if (group.key_rows.empty()) {
      continue;  // prior: zero mean, unit variance
    }
    const Eigen::MatrixXd fg =
        detail::take_rows(model.keys_effective, group.key_rows);
    const Eigen::MatrixXd kappa =
        detail::cross_gaussian(q, fg, model.hyper.kernel.beta);
    const Eigen::MatrixXd mean = kappa * group.weights;  // m x c_g
    for (std::size_t j = 0; j < group.class_ids.size(); ++j) {
      result.logits.col(group.class_ids[j]) +=
          mean.col(static_cast<Eigen::Index>(j));
    }
    // 1 - kappa A^{-1} kappa^T, diagonal only.
    const Eigen::MatrixXd solved = group.llt.solve(kappa.transpose());
    for (Eigen::Index i = 0; i < m; ++i) {
      const double explained = kappa.row(i).dot(solved.col(i));
      result.variance(i, static_cast<Eigen::Index>(g)) =
          std::max(0.0, 1.0 - explained);
    }
  }
  return result;
}

Eigen::MatrixXd confidence_calibrated_logits(const CacheModel& model,
                                             const FeatureMatrix& queries) {
  GpResult gp = gp_cache_logits(model, queries);
  if (model.hyper.eta == 0.0) {
    return std::move(gp.logits);
  }
  const auto& groups = model.solve.groups;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const GroupSolve& group = groups[g];
    const Eigen::ArrayXd scale =
        gp.variance.col(static_cast<Eigen::Index>(g))
            .array()
            .max(kVarianceFloor)
            .pow(model.hyper.eta);
    for (int class_id : group.class_ids) {
      gp.logits.col(class_id).array() /= scale;
    }
  }
  return std::move(gp.logits);
}

Eigen::MatrixXd fused_logits(const CacheModel& model, const ZeroShotWeights& w,
                             const FeatureMatrix& queries, FusionMode mode) {
  Eigen::MatrixXd zs = zero_shot_logits(w, queries);
  if (w.matrix.cols() != model.num_classes()) {
    throw Error(ErrorKind::kInvalidArgument,
                "fused_logits: weight columns do not match cache classes");
  }
  const Eigen::MatrixXd cache = mode == FusionMode::kNadarayaWatson
                                    ? nw_cache_logits(model, queries)
                                    : confidence_calibrated_logits(model, queries);
  return zs + model.hyper.alpha * cache;
}

LabelVector predict(const CacheModel& model, const ZeroShotWeights& w,
                    const FeatureMatrix& queries, FusionMode mode) {
  LabelVector out;
  out.num_classes = model.num_classes();
  out.labels = detail::argmax_rows(fused_logits(model, w, queries, mode));
  return out;
}

}  // namespace gpcache
