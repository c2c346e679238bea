#pragma once

#include "gpcache/types.hpp"

namespace gpcache {

struct CalibrationLayer;  // calibration.hpp

struct KernelParams {
  double beta = 5.5;  // inverse width of the Gaussian-of-cosine kernel
};

// Dot product of two unit vectors, clamped to [-1, 1] against rounding
// overshoot.
double cosine_similarity(const Eigen::Ref<const Eigen::VectorXd>& a,
                         const Eigen::Ref<const Eigen::VectorXd>& b);

// exp(-beta * (1 - s)) for a similarity s in [-1, 1]. Maximal (1) at s = 1,
// strictly positive everywhere.
double gaussian_kernel(double similarity, const KernelParams& params);

// Pairwise kernel between the rows of `a` and `b`: one matrix product, a
// clamp to [-1, 1], then the element-wise Gaussian transform. When `a` and
// `b` are the same object the diagonal is pinned to exactly 1 (self
// similarity of a unit vector). With `calib`, both sides are passed through
// the calibration layer first.
Eigen::MatrixXd kernel_matrix(const FeatureMatrix& a, const FeatureMatrix& b,
                              const KernelParams& params,
                              const CalibrationLayer* calib = nullptr);

namespace detail {

// Shared raw-matrix kernels (inputs already calibrated/selected).
// self_gaussian pins the diagonal to 1; both clamp similarities to [-1, 1].
Eigen::MatrixXd self_gaussian(const Eigen::MatrixXd& rows, double beta);
Eigen::MatrixXd cross_gaussian(const Eigen::MatrixXd& a,
                               const Eigen::MatrixXd& b, double beta);

}  // namespace detail

}  // namespace gpcache
