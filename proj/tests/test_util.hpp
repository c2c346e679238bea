#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

#include <Eigen/Dense>
#include <unistd.h>

#include "gpcache/types.hpp"

namespace testutil {

inline Eigen::MatrixXd random_unit_rows(Eigen::Index rows, Eigen::Index dim,
                                        std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd m(rows, dim);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < dim; ++j) m(i, j) = normal(rng);
    m.row(i) /= m.row(i).norm();
  }
  return m;
}

// Class-major labels: `shots` consecutive rows per class.
inline gpcache::LabelVector block_labels(int classes, int shots) {
  gpcache::LabelVector y;
  y.num_classes = classes;
  y.labels.resize(static_cast<Eigen::Index>(classes) * shots);
  for (int c = 0; c < classes; ++c) {
    for (int s = 0; s < shots; ++s) y.labels[c * shots + s] = c;
  }
  return y;
}

// Unique scratch directory, removed on scope exit.
struct TempDir {
  std::filesystem::path path;

  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path = std::filesystem::temp_directory_path() /
           (tag + "-" + std::to_string(::getpid()) + "-" +
            std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline bool bitwise_equal(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return (a.array() == b.array()).all();
}

}  // namespace testutil
