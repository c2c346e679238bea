#pragma once

#include <filesystem>

#include "gpcache/types.hpp"

namespace gpcache {

// On-disk formats (all little-endian):
//   matrix file: magic "GPCB", u32 version=1, u64 rows, u64 cols,
//                u8 dtype=1 (f32), then rows*cols f32 values row-major.
//   label file:  magic "GPCL", u32 version=1, u64 rows, u64 num_classes,
//                then rows u32 labels.
// Matrices are stored as f32 and promoted to f64 in memory.

void write_matrix_file(const std::filesystem::path& path,
                       const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix_file(const std::filesystem::path& path);

void write_label_file(const std::filesystem::path& path, const LabelVector& y);
LabelVector read_label_file(const std::filesystem::path& path);

// Rounds every entry through f32 precision. Bundles whose matrices are on
// the f32 grid round-trip through disk bit-exactly.
Eigen::MatrixXd quantize_f32(const Eigen::MatrixXd& m);

// A bundle directory holds manifest.json with keys
// {dim, num_classes, class_names, files} where files maps roles
// (train_x, train_y, val_x, val_y, test_x, test_y, weights, and optionally
// unlabeled, unlabeled_aug, calib_proj, calib_bias) to filenames.
void write_bundle(const FeatureBundle& bundle,
                  const std::filesystem::path& dir);
FeatureBundle read_bundle(const std::filesystem::path& dir);

// Saves calibration parameters into an existing bundle directory and records
// them in its manifest.
void attach_calibration(const std::filesystem::path& dir,
                        const Eigen::MatrixXd& proj,
                        const std::optional<Eigen::VectorXd>& bias);

struct SyntheticSpec {
  int classes = 10;
  int shots = 16;
  int dim = 64;
  double spread = 0.3;      // feature noise scale around each class center
  double text_noise = 0.2;  // zero-shot weight noise scale
  std::uint64_t seed = 0;
  int test_per_class = 20;
  int val_per_class = 0;        // 0 -> shots
  int unlabeled_per_class = 0;  // 0 -> test_per_class
};

// Draws unit class centers, then unit-normalized noisy samples around them
// for every split, plus noisy "text" weights and augmented views of the
// unlabeled pool. Pure function of the spec (same seed => identical bundle);
// all matrices are quantized to the f32 grid.
FeatureBundle generate_synthetic(const SyntheticSpec& spec);

}  // namespace gpcache
