#include "gpcache/approx.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
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

// Posterior-mean logits for the linear kernel Z Z^T, solved on the smaller
// side of the system.
Eigen::MatrixXd feature_space_gp(const Eigen::MatrixXd& zk,
                                 const Eigen::MatrixXd& zq,
                                 const Eigen::MatrixXd& values, double sigma2,
                                 const std::string& context) {
  const Eigen::Index n = zk.rows();
  const Eigen::Index d = zk.cols();
  if (n <= d) {
    Eigen::MatrixXd gram = zk * zk.transpose();
    detail::RegularizedFactor factor =
        detail::factor_regularized(gram, sigma2, context);
    return zq * (zk.transpose() * factor.llt.solve(values));
  }
  Eigen::MatrixXd gram = zk.transpose() * zk;
  detail::RegularizedFactor factor =
      detail::factor_regularized(gram, sigma2, context);
  return zq * factor.llt.solve(zk.transpose() * values);
}

std::vector<std::vector<int>> rows_by_class(const LabelVector& labels) {
  std::vector<std::vector<int>> by_class(labels.num_classes);
  for (Eigen::Index i = 0; i < labels.rows(); ++i) {
    by_class[labels.labels[i]].push_back(static_cast<int>(i));
  }
  return by_class;
}

Eigen::MatrixXd class_prototypes(const FeatureMatrix& keys,
                                 const LabelVector& labels) {
  const auto by_class = rows_by_class(labels);
  Eigen::MatrixXd protos(labels.num_classes, keys.dim());
  for (int c = 0; c < labels.num_classes; ++c) {
    if (by_class[c].empty()) {
      throw Error(ErrorKind::kInvalidArgument,
                  "mean prototypes: class " + std::to_string(c) +
                      " has no keys");
    }
    protos.row(c).setZero();
    for (int row : by_class[c]) protos.row(c) += keys.data.row(row);
    protos.row(c) /= static_cast<double>(by_class[c].size());
  }
  normalize_rows(protos, "mean prototypes");
  return protos;
}

}  // namespace

GroupPartition make_partition(int num_classes, int group_count,
                              std::uint64_t seed) {
  if (num_classes < 1 || group_count < 1 || group_count > num_classes) {
    throw Error(ErrorKind::kInvalidArgument,
                "make_partition: need 1 <= group_count <= num_classes");
  }
  std::vector<int> ids(num_classes);
  std::iota(ids.begin(), ids.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);

  GroupPartition part;
  part.num_classes = num_classes;
  part.seed = seed;
  part.groups.resize(group_count);
  const int base = num_classes / group_count;
  const int extra = num_classes % group_count;
  int cursor = 0;
  for (int g = 0; g < group_count; ++g) {
    const int size = base + (g < extra ? 1 : 0);
    part.groups[g].assign(ids.begin() + cursor, ids.begin() + cursor + size);
    cursor += size;
  }
  return part;
}

RffMap RffMap::sample(Eigen::Index dim, int feature_count, double beta,
                      std::uint64_t seed) {
  if (dim < 1 || feature_count < 1) {
    throw Error(ErrorKind::kInvalidArgument,
                "RffMap: dim and feature_count must be >= 1");
  }
  if (!(beta >= 0)) {
    throw Error(ErrorKind::kInvalidArgument, "RffMap: beta must be >= 0");
  }
  RffMap map;
  map.beta = beta;
  map.seed = seed;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, std::sqrt(beta));
  map.frequencies.resize(feature_count, dim);
  for (int i = 0; i < feature_count; ++i) {
    for (Eigen::Index j = 0; j < dim; ++j) {
      map.frequencies(i, j) = normal(rng);
    }
  }
  std::uniform_real_distribution<double> uniform(0.0, 2.0 * M_PI);
  map.phases.resize(feature_count);
  for (int i = 0; i < feature_count; ++i) {
    map.phases[i] = uniform(rng);
  }
  return map;
}

Eigen::MatrixXd RffMap::transform(const Eigen::MatrixXd& rows) const {
  if (rows.cols() != frequencies.cols()) {
    throw Error(ErrorKind::kInvalidArgument,
                "RffMap: feature dim " + std::to_string(rows.cols()) +
                    " does not match map dim " +
                    std::to_string(frequencies.cols()));
  }
  Eigen::MatrixXd proj = rows * frequencies.transpose();
  proj.rowwise() += phases.transpose();
  const double scale = std::sqrt(2.0 / feature_count());
  return scale * proj.array().cos().matrix();
}

NystromSketch nystrom_sketch(const FeatureMatrix& keys,
                             const LabelVector& labels,
                             const KernelParams& params, int landmarks,
                             std::uint64_t seed) {
  const int c = labels.num_classes;
  if (landmarks < 1 || landmarks % c != 0) {
    throw Error(ErrorKind::kInvalidArgument,
                "nystrom_sketch: landmark count " + std::to_string(landmarks) +
                    " must be a positive multiple of num_classes " +
                    std::to_string(c));
  }
  const int per_class = landmarks / c;
  const auto by_class = rows_by_class(labels);
  std::mt19937_64 rng(seed);

  NystromSketch sketch;
  sketch.landmark_rows.reserve(landmarks);
  for (int cls = 0; cls < c; ++cls) {
    if (static_cast<int>(by_class[cls].size()) < per_class) {
      throw Error(ErrorKind::kInvalidArgument,
                  "nystrom_sketch: class " + std::to_string(cls) + " has " +
                      std::to_string(by_class[cls].size()) + " keys, need " +
                      std::to_string(per_class));
    }
    std::vector<int> pool = by_class[cls];
    std::shuffle(pool.begin(), pool.end(), rng);
    sketch.landmark_rows.insert(sketch.landmark_rows.end(), pool.begin(),
                                pool.begin() + per_class);
  }
  std::sort(sketch.landmark_rows.begin(), sketch.landmark_rows.end());

  const Eigen::MatrixXd fl = take_rows(keys.data, sketch.landmark_rows);
  const Eigen::MatrixXd kll = detail::self_gaussian(fl, params.beta);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(kll);
  if (eig.info() != Eigen::Success) {
    throw Error(ErrorKind::kNumerical,
                "nystrom_sketch: eigendecomposition failed");
  }
  const Eigen::VectorXd evals = eig.eigenvalues();  // ascending
  const double cutoff = 1e-10 * evals[evals.size() - 1];
  Eigen::Index first_kept = evals.size();
  for (Eigen::Index i = 0; i < evals.size(); ++i) {
    if (evals[i] > cutoff) {
      first_kept = i;
      break;
    }
  }
  const Eigen::Index rank = evals.size() - first_kept;
  if (rank == 0) {
    throw Error(ErrorKind::kNumerical,
                "nystrom_sketch: landmark kernel has no usable spectrum");
  }
  sketch.landmark_transform =
      eig.eigenvectors().rightCols(rank) *
      evals.tail(rank).cwiseSqrt().cwiseInverse().asDiagonal();
  sketch.z = detail::cross_gaussian(keys.data, fl, params.beta) *
             sketch.landmark_transform;
  return sketch;
}

Eigen::MatrixXd rff_logits(const FeatureMatrix& keys, const LabelVector& labels,
                           const FeatureMatrix& queries, const CacheHyper& hyper,
                           const RffMap& map) {
  const Eigen::MatrixXd zk = map.transform(keys.data);
  const Eigen::MatrixXd zq = map.transform(queries.data);
  return feature_space_gp(zk, zq, labels.one_hot(), hyper.sigma2,
                          "rff system");
}

Eigen::MatrixXd nystrom_logits(const FeatureMatrix& keys,
                               const LabelVector& labels,
                               const FeatureMatrix& queries,
                               const CacheHyper& hyper, int landmarks,
                               std::uint64_t seed) {
  const NystromSketch sketch =
      nystrom_sketch(keys, labels, hyper.kernel, landmarks, seed);
  const Eigen::MatrixXd fl = take_rows(keys.data, sketch.landmark_rows);
  const Eigen::MatrixXd zq =
      detail::cross_gaussian(queries.data, fl, hyper.kernel.beta) *
      sketch.landmark_transform;
  return feature_space_gp(sketch.z, zq, labels.one_hot(), hyper.sigma2,
                          "nystrom system");
}

Eigen::MatrixXd mean_prototype_logits(const FeatureMatrix& keys,
                                      const LabelVector& labels,
                                      const FeatureMatrix& queries,
                                      const CacheHyper& hyper) {
  const Eigen::MatrixXd protos = class_prototypes(keys, labels);
  const Eigen::MatrixXd k = detail::self_gaussian(protos, hyper.kernel.beta);
  detail::RegularizedFactor factor =
      detail::factor_regularized(k, hyper.sigma2, "prototype system");
  const Eigen::MatrixXd weights = factor.llt.solve(
      Eigen::MatrixXd::Identity(labels.num_classes, labels.num_classes));
  return detail::cross_gaussian(queries.data, protos, hyper.kernel.beta) *
         weights;
}

std::vector<BenchRow> bench_approx(const FeatureBundle& bundle,
                                   const CacheHyper& hyper,
                                   const std::vector<BenchMethod>& methods,
                                   int repeats) {
  if (repeats < 1) {
    throw Error(ErrorKind::kInvalidArgument, "bench_approx: repeats must be >= 1");
  }
  bundle.validate();
  using Clock = std::chrono::steady_clock;
  auto ms_since = [](Clock::time_point start) {
    return std::chrono::duration<double, std::milli>(Clock::now() - start)
        .count();
  };
  const Eigen::MatrixXd zs = zero_shot_logits(bundle.weights, bundle.test_x);
  auto score = [&](const Eigen::MatrixXd& cache_logits) {
    const Eigen::MatrixXd fused = zs + hyper.alpha * cache_logits;
    return accuracy(detail::argmax_rows(fused), bundle.test_y.labels);
  };

  std::vector<BenchRow> rows;
  for (const BenchMethod& method : methods) {
    for (int rep = 0; rep < repeats; ++rep) {
      BenchRow row;
      row.param = method.param;
      row.seed = method.seed;
      switch (method.kind) {
        case BenchMethod::Kind::kExact: {
          row.method = "exact";
          const auto t0 = Clock::now();
          const CacheModel model =
              build_cache(bundle.train_x, bundle.train_y, hyper);
          row.build_ms = ms_since(t0);
          const auto t1 = Clock::now();
          const Eigen::MatrixXd logits =
              confidence_calibrated_logits(model, bundle.test_x);
          row.accuracy = score(logits);
          row.query_ms = ms_since(t1);
          break;
        }
        case BenchMethod::Kind::kGroup: {
          row.method = "group";
          const auto t0 = Clock::now();
          GroupPartition part = make_partition(bundle.num_classes(),
                                               method.param, method.seed);
          const CacheModel model = build_cache(
              bundle.train_x, bundle.train_y, hyper, {}, std::move(part));
          row.build_ms = ms_since(t0);
          const auto t1 = Clock::now();
          const Eigen::MatrixXd logits =
              confidence_calibrated_logits(model, bundle.test_x);
          row.accuracy = score(logits);
          row.query_ms = ms_since(t1);
          break;
        }
        case BenchMethod::Kind::kMean: {
          row.method = "mean";
          const auto t0 = Clock::now();
          const Eigen::MatrixXd protos =
              class_prototypes(bundle.train_x, bundle.train_y);
          const Eigen::MatrixXd k =
              detail::self_gaussian(protos, hyper.kernel.beta);
          detail::RegularizedFactor factor = detail::factor_regularized(
              k, hyper.sigma2, "prototype system");
          const Eigen::MatrixXd weights =
              factor.llt.solve(Eigen::MatrixXd::Identity(
                  bundle.num_classes(), bundle.num_classes()));
          row.build_ms = ms_since(t0);
          const auto t1 = Clock::now();
          const Eigen::MatrixXd logits =
              detail::cross_gaussian(bundle.test_x.data, protos,
                                     hyper.kernel.beta) *
              weights;
          row.accuracy = score(logits);
          row.query_ms = ms_since(t1);
          break;
        }
        case BenchMethod::Kind::kNystrom: {
          row.method = "nystrom";
          const auto t0 = Clock::now();
          const NystromSketch sketch =
              nystrom_sketch(bundle.train_x, bundle.train_y, hyper.kernel,
                             method.param, method.seed);
          const Eigen::MatrixXd fl =
              take_rows(bundle.train_x.data, sketch.landmark_rows);
          row.build_ms = ms_since(t0);
          const auto t1 = Clock::now();
          const Eigen::MatrixXd zq =
              detail::cross_gaussian(bundle.test_x.data, fl,
                                     hyper.kernel.beta) *
              sketch.landmark_transform;
          const Eigen::MatrixXd logits =
              feature_space_gp(sketch.z, zq, bundle.train_y.one_hot(),
                               hyper.sigma2, "nystrom system");
          row.accuracy = score(logits);
          row.query_ms = ms_since(t1);
          break;
        }
        case BenchMethod::Kind::kRff: {
          row.method = "rff";
          const auto t0 = Clock::now();
          const RffMap map = RffMap::sample(bundle.dim(), method.param,
                                            hyper.kernel.beta, method.seed);
          const Eigen::MatrixXd zk = map.transform(bundle.train_x.data);
          row.build_ms = ms_since(t0);
          const auto t1 = Clock::now();
          const Eigen::MatrixXd zq = map.transform(bundle.test_x.data);
          const Eigen::MatrixXd logits =
              feature_space_gp(zk, zq, bundle.train_y.one_hot(), hyper.sigma2,
                               "rff system");
          row.accuracy = score(logits);
          row.query_ms = ms_since(t1);
          break;
        }
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

void write_bench_csv(const std::filesystem::path& path,
                     const std::vector<BenchRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw Error(ErrorKind::kIo, path.string() + ": cannot open for writing");
  }
  out << "method,param,seed,accuracy,build_ms,query_ms\n";
  char buf[160];
  for (const BenchRow& row : rows) {
    std::snprintf(buf, sizeof buf, "%s,%d,%llu,%.17g,%.6f,%.6f\n",
                  row.method.c_str(), row.param,
                  static_cast<unsigned long long>(row.seed), row.accuracy,
                  row.build_ms, row.query_ms);
    out << buf;
  }
  if (!out) {
    throw Error(ErrorKind::kIo, path.string() + ": write failed");
  }
}

}  // namespace gpcache
