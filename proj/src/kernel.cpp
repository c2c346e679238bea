#include "gpcache/kernel.hpp"

#include <algorithm>
#include <cmath>

#include "gpcache/calibration.hpp"

namespace gpcache {
namespace detail {

namespace {

void check_beta(double beta) {
  if (!(beta >= 0.0)) {
    throw Error(ErrorKind::kInvalidArgument,
                "kernel: beta must be >= 0, got " + std::to_string(beta));
  }
}

Eigen::MatrixXd gaussian_of_similarity(Eigen::MatrixXd sims, double beta) {
  sims = sims.cwiseMax(-1.0).cwiseMin(1.0);
  return (-beta * (1.0 - sims.array())).exp().matrix();
}

}  // namespace

Eigen::MatrixXd self_gaussian(const Eigen::MatrixXd& rows, double beta) {
  check_beta(beta);
  Eigen::MatrixXd k = gaussian_of_similarity(rows * rows.transpose(), beta);
  k.diagonal().setOnes();
  return k;
}

Eigen::MatrixXd cross_gaussian(const Eigen::MatrixXd& a,
                               const Eigen::MatrixXd& b, double beta) {
  check_beta(beta);
  if (a.cols() != b.cols()) {
    throw Error(ErrorKind::kInvalidArgument,
                "kernel: dimension mismatch (" + std::to_string(a.cols()) +
                    " vs " + std::to_string(b.cols()) + ")");
  }
  return gaussian_of_similarity(a * b.transpose(), beta);
}

}  // namespace detail

double cosine_similarity(const Eigen::Ref<const Eigen::VectorXd>& a,
                         const Eigen::Ref<const Eigen::VectorXd>& b) {
  if (a.size() != b.size()) {
    throw Error(ErrorKind::kInvalidArgument,
                "cosine_similarity: dimension mismatch");
  }
  return std::clamp(a.dot(b), -1.0, 1.0);
}

double gaussian_kernel(double similarity, const KernelParams& params) {
  detail::check_beta(params.beta);
  return std::exp(-params.beta * (1.0 - std::clamp(similarity, -1.0, 1.0)));
}

Eigen::MatrixXd kernel_matrix(const FeatureMatrix& a, const FeatureMatrix& b,
                              const KernelParams& params,
                              const CalibrationLayer* calib) {
  const bool self = &a == &b;
  if (calib != nullptr) {
    const Eigen::MatrixXd ca = detail::apply_forward(*calib, a.data).rows;
    if (self) {
      return detail::self_gaussian(ca, params.beta);
    }
    return detail::cross_gaussian(ca, detail::apply_forward(*calib, b.data).rows,
                                  params.beta);
  }
  if (self) {
    return detail::self_gaussian(a.data, params.beta);
  }
  return detail::cross_gaussian(a.data, b.data, params.beta);
}

}  // namespace gpcache
