#include "gpcache/types.hpp"

#include <cmath>

namespace gpcache {

Eigen::MatrixXd LabelVector::one_hot() const {
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(labels.size(), num_classes);
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    y(i, labels[i]) = 1.0;
  }
  return y;
}

namespace {

// |norm^2 - 1| band inside which a row is considered exactly unit and its
// bits are preserved.
constexpr double kSquaredNormSkipTol = 2e-12;

void check_labels(const LabelVector& y, Eigen::Index feature_rows,
                  const std::string& name) {
  if (y.num_classes < 1) {
    throw Error(ErrorKind::kInvalidArgument,
                name + ": num_classes must be >= 1");
  }
  if (y.rows() != feature_rows) {
    throw Error(ErrorKind::kInvalidArgument,
                name + ": " + std::to_string(y.rows()) + " labels for " +
                    std::to_string(feature_rows) + " feature rows");
  }
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    if (y.labels[i] < 0 || y.labels[i] >= y.num_classes) {
      throw Error(ErrorKind::kInvalidArgument,
                  name + ": label " + std::to_string(y.labels[i]) +
                      " at row " + std::to_string(i) + " outside [0, " +
                      std::to_string(y.num_classes) + ")");
    }
  }
}

}  // namespace

void normalize_rows(Eigen::MatrixXd& m, const std::string& context) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n2 = m.row(i).squaredNorm();
    if (!(n2 > 1e-60)) {
      throw Error(ErrorKind::kNumerical,
                  context + ": cannot normalize (near-)zero row " +
                      std::to_string(i));
    }
    if (std::abs(n2 - 1.0) > kSquaredNormSkipTol) {
      m.row(i) /= std::sqrt(n2);
    }
  }
}

void enforce_unit_rows(Eigen::MatrixXd& m, const std::string& context) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double norm = m.row(i).norm();
    const double dev = std::abs(norm - 1.0);
    if (!(dev <= kNormRejectTol)) {  // also catches NaN norms
      throw Error(ErrorKind::kNormViolation,
                  context + ": row " + std::to_string(i) + " has norm " +
                      std::to_string(norm) + ", more than " +
                      std::to_string(kNormRejectTol) + " from 1");
    }
    if (dev > kNormKeepTol) {
      m.row(i) /= norm;
    }
  }
}

void FeatureBundle::validate() const {
  const Eigen::Index d = dim();
  const int c = num_classes();
  if (d < 1) {
    throw Error(ErrorKind::kInvalidArgument, "bundle: dim must be >= 1");
  }
  if (c < 1) {
    throw Error(ErrorKind::kInvalidArgument,
                "bundle: num_classes must be >= 1");
  }

  auto check_dim = [&](const FeatureMatrix& x, const char* name) {
    if (x.dim() != d) {
      throw Error(ErrorKind::kInvalidArgument,
                  std::string("bundle: ") + name + " has dim " +
                      std::to_string(x.dim()) + ", expected " +
                      std::to_string(d));
    }
  };
  check_dim(train_x, "train_x");
  check_dim(val_x, "val_x");
  check_dim(test_x, "test_x");

  check_labels(train_y, train_x.rows(), "bundle: train_y");
  check_labels(val_y, val_x.rows(), "bundle: val_y");
  check_labels(test_y, test_x.rows(), "bundle: test_y");
  if (train_y.num_classes != c || val_y.num_classes != c ||
      test_y.num_classes != c) {
    throw Error(ErrorKind::kInvalidArgument,
                "bundle: label num_classes disagrees with the weights");
  }

  if (class_names.size() != static_cast<std::size_t>(c)) {
    throw Error(ErrorKind::kInvalidArgument,
                "bundle: " + std::to_string(class_names.size()) +
                    " class names for " + std::to_string(c) + " classes");
  }

  if (unlabeled_augmented && !unlabeled) {
    throw Error(ErrorKind::kInvalidArgument,
                "bundle: augmented views without an unlabeled split");
  }
  if (unlabeled) {
    check_dim(*unlabeled, "unlabeled");
  }
  if (unlabeled_augmented) {
    check_dim(*unlabeled_augmented, "unlabeled_aug");
    if (unlabeled_augmented->rows() != unlabeled->rows()) {
      throw Error(ErrorKind::kInvalidArgument,
                  "bundle: unlabeled and augmented row counts differ");
    }
  }

  if (calib_proj &&
      (calib_proj->rows() != d || calib_proj->cols() != d)) {
    throw Error(ErrorKind::kInvalidArgument,
                "bundle: calib_proj must be dim x dim");
  }
  if (calib_bias && calib_bias->size() != d) {
    throw Error(ErrorKind::kInvalidArgument,
                "bundle: calib_bias must have length dim");
  }
}

}  // namespace gpcache
