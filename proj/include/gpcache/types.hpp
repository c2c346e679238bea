#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace gpcache {

inline constexpr const char* kVersion = "0.1.0";

enum class ErrorKind {
  kIo,               // OS-level read/write failure
  kMissingFile,      // referenced file does not exist
  kBadFormat,        // file contents violate the on-disk contract
  kNonFinite,        // NaN or infinity where finite values are required
  kNormViolation,    // row/column too far from unit norm
  kInvalidArgument,  // programmatic misuse of an interface
  kNumerical,        // factorization failure, divergence, degenerate input
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// One feature vector per row; rows are unit-norm in double precision.
struct FeatureMatrix {
  Eigen::MatrixXd data;

  Eigen::Index rows() const { return data.rows(); }
  Eigen::Index dim() const { return data.cols(); }
};

// Integer class labels aligned with the rows of a FeatureMatrix.
struct LabelVector {
  Eigen::VectorXi labels;
  int num_classes = 0;

  Eigen::Index rows() const { return labels.size(); }
  Eigen::MatrixXd one_hot() const;
};

// Text-derived zero-shot classifier: one unit-norm column per class.
struct ZeroShotWeights {
  Eigen::MatrixXd matrix;  // dim x num_classes

  Eigen::Index dim() const { return matrix.rows(); }
  Eigen::Index num_classes() const { return matrix.cols(); }
};

// Disjoint split of the class ids [0, num_classes) into near-equal groups.
struct GroupPartition {
  std::vector<std::vector<int>> groups;
  int num_classes = 0;
  std::uint64_t seed = 0;

  int group_count() const { return static_cast<int>(groups.size()); }
};

// A complete few-shot adaptation dataset: features per split, labels,
// zero-shot weights, optional unlabeled pool with augmented views, and
// optionally the parameters of a trained similarity-calibration layer
// (interpreted by the calibration module).
struct FeatureBundle {
  FeatureMatrix train_x, val_x, test_x;
  LabelVector train_y, val_y, test_y;
  ZeroShotWeights weights;
  std::vector<std::string> class_names;
  std::optional<FeatureMatrix> unlabeled;
  std::optional<FeatureMatrix> unlabeled_augmented;
  std::optional<Eigen::MatrixXd> calib_proj;  // dim x dim
  std::optional<Eigen::VectorXd> calib_bias;  // dim

  Eigen::Index dim() const { return weights.dim(); }
  int num_classes() const { return static_cast<int>(weights.num_classes()); }

  // Cross-field shape and label-range checks; throws Error on violation.
  void validate() const;
};

// Loader-side unit-norm policy: deviations up to kNormKeepTol keep their
// exact bits (absorbs f32 storage rounding of a unit row, ~6e-8), deviations
// up to kNormRejectTol are re-normalized silently, anything larger is
// rejected as corrupt.
inline constexpr double kNormKeepTol = 1e-6;
inline constexpr double kNormRejectTol = 1e-4;

// Unit-normalizes each row in place. Rows already within ~1e-12 of unit norm
// are left bit-for-bit untouched; (near-)zero rows raise kNumerical.
// `context` names the matrix in error messages.
void normalize_rows(Eigen::MatrixXd& m, const std::string& context);

// Applies the loader-side policy above; throws kNormViolation naming the
// first offending row.
void enforce_unit_rows(Eigen::MatrixXd& m, const std::string& context);

}  // namespace gpcache
