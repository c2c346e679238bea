#include <doctest.h>

#include <cmath>
#include <random>

#include "gpcache/gpcache.hpp"
#include "test_util.hpp"

using namespace gpcache;

namespace {

struct Instance {
  FeatureMatrix keys;
  LabelVector labels;
  FeatureMatrix queries;
  ZeroShotWeights weights;
};

Instance random_instance(int classes, int shots, int dim, int queries,
                         std::mt19937_64& rng) {
  Instance inst;
  inst.keys.data = testutil::random_unit_rows(classes * shots, dim, rng);
  inst.labels = testutil::block_labels(classes, shots);
  inst.queries.data = testutil::random_unit_rows(queries, dim, rng);
  inst.weights.matrix =
      testutil::random_unit_rows(classes, dim, rng).transpose();
  return inst;
}

GroupPartition even_partition(int classes, int groups) {
  GroupPartition part;
  part.num_classes = classes;
  part.groups.resize(groups);
  for (int c = 0; c < classes; ++c) part.groups[c % groups].push_back(c);
  return part;
}

// Straightforward dense reference: per group invert K_g + sigma2 I outright.
GpResult dense_reference(const Instance& inst, const CacheHyper& hyper,
                         const GroupPartition& part) {
  const Eigen::Index m = inst.queries.rows();
  GpResult ref;
  ref.logits = Eigen::MatrixXd::Zero(m, inst.labels.num_classes);
  ref.variance = Eigen::MatrixXd::Ones(m, part.group_count());
  const Eigen::MatrixXd onehot = inst.labels.one_hot();
  for (int g = 0; g < part.group_count(); ++g) {
    std::vector<int> rows;
    for (Eigen::Index i = 0; i < inst.labels.rows(); ++i) {
      for (int id : part.groups[g]) {
        if (inst.labels.labels[i] == id) rows.push_back(static_cast<int>(i));
      }
    }
    std::sort(rows.begin(), rows.end());
    if (rows.empty()) continue;
    const auto n = static_cast<Eigen::Index>(rows.size());
    Eigen::MatrixXd fg(n, inst.keys.dim());
    for (Eigen::Index i = 0; i < n; ++i) fg.row(i) = inst.keys.data.row(rows[i]);
    Eigen::MatrixXd kg(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        kg(i, j) = i == j ? 1.0
                          : gaussian_kernel(
                                cosine_similarity(fg.row(i), fg.row(j)),
                                hyper.kernel);
      }
    }
    Eigen::MatrixXd a = kg;
    a.diagonal().array() += hyper.sigma2;
    const Eigen::MatrixXd a_inv = a.inverse();
    Eigen::MatrixXd kappa(m, n);
    for (Eigen::Index i = 0; i < m; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        kappa(i, j) = gaussian_kernel(
            cosine_similarity(inst.queries.data.row(i), fg.row(j)),
            hyper.kernel);
      }
    }
    Eigen::MatrixXd yg(n, static_cast<Eigen::Index>(part.groups[g].size()));
    for (std::size_t j = 0; j < part.groups[g].size(); ++j) {
      for (Eigen::Index i = 0; i < n; ++i) {
        yg(i, static_cast<Eigen::Index>(j)) = onehot(rows[i], part.groups[g][j]);
      }
    }
    const Eigen::MatrixXd mean = kappa * a_inv * yg;
    for (std::size_t j = 0; j < part.groups[g].size(); ++j) {
      ref.logits.col(part.groups[g][j]) += mean.col(static_cast<Eigen::Index>(j));
    }
    const Eigen::MatrixXd explained = kappa * a_inv * kappa.transpose();
    for (Eigen::Index i = 0; i < m; ++i) {
      ref.variance(i, g) = std::max(0.0, 1.0 - explained(i, i));
    }
  }
  return ref;
}

}  // namespace

TEST_CASE("zero-shot logits are the plain linear scores") {
  ZeroShotWeights w;
  w.matrix = Eigen::MatrixXd::Identity(3, 3);
  FeatureMatrix q{Eigen::MatrixXd::Identity(3, 3)};
  const Eigen::MatrixXd logits = zero_shot_logits(w, q);
  CHECK(testutil::bitwise_equal(logits, Eigen::MatrixXd::Identity(3, 3)));

  FeatureMatrix bad{Eigen::MatrixXd::Identity(4, 4)};
  CHECK_THROWS_AS(zero_shot_logits(w, bad), Error);
}

TEST_CASE("posterior mean and variance on a two-key instance") {
  Eigen::MatrixXd keys(2, 3);
  keys << 1.0, 0.0, 0.0,
          0.6, 0.8, 0.0;
  LabelVector labels;
  labels.num_classes = 2;
  labels.labels.resize(2);
  labels.labels << 0, 1;
  CacheHyper hyper;
  hyper.kernel.beta = 2.0;
  hyper.sigma2 = 0.5;

  CacheModel model = build_cache(FeatureMatrix{keys}, labels, hyper);
  Eigen::MatrixXd q(1, 3);
  q << 0.0, 0.6, 0.8;
  const GpResult gp = gp_cache_logits(model, FeatureMatrix{q});
  CHECK(gp.logits(0, 0) ==
        doctest::Approx(0.021573860469557605).epsilon(1e-13));
  CHECK(gp.logits(0, 1) ==
        doctest::Approx(0.22917394772132291).epsilon(1e-13));
  REQUIRE(gp.variance.cols() == 1);
  CHECK(gp.variance(0, 0) ==
        doctest::Approx(0.91607769067776701).epsilon(1e-13));

  model.hyper.eta = 0.75;
  const Eigen::MatrixXd scaled =
      confidence_calibrated_logits(model, FeatureMatrix{q});
  CHECK(scaled(0, 0) == doctest::Approx(0.023039796319065751).epsilon(1e-13));
  CHECK(scaled(0, 1) == doctest::Approx(0.2447462328119793).epsilon(1e-13));
}

TEST_CASE("grouped posterior matches a dense-inverse reference") {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 10; ++trial) {
    const int classes = 4 + trial % 3;
    const Instance inst = random_instance(classes, 2 + trial % 2, 10, 7, rng);
    CacheHyper hyper;
    hyper.kernel.beta = 3.0 + trial;
    hyper.sigma2 = 0.2 + 0.1 * trial;
    hyper.eta = 0.5;
    const GroupPartition part = even_partition(classes, trial % 2 ? 2 : 3);

    const CacheModel model =
        build_cache(inst.keys, inst.labels, hyper, {}, part);
    const GpResult got = gp_cache_logits(model, inst.queries);
    const GpResult ref = dense_reference(inst, hyper, part);
    CHECK((got.logits - ref.logits).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((got.variance - ref.variance).cwiseAbs().maxCoeff() < 1e-10);

    // Confidence scaling against the same reference.
    Eigen::MatrixXd expected = ref.logits;
    for (int g = 0; g < part.group_count(); ++g) {
      for (int class_id : part.groups[g]) {
        for (Eigen::Index i = 0; i < expected.rows(); ++i) {
          expected(i, class_id) /=
              std::pow(std::max(ref.variance(i, g), kVarianceFloor),
                       hyper.eta);
        }
      }
    }
    const Eigen::MatrixXd scaled =
        confidence_calibrated_logits(model, inst.queries);
    CHECK((scaled - expected).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("predictive variance stays within [0, 1]") {
  std::mt19937_64 rng(202);
  for (int trial = 0; trial < 6; ++trial) {
    const Instance inst = random_instance(6, 4, 8, 25, rng);
    CacheHyper hyper;
    hyper.kernel.beta = 1.0 + 3.0 * trial;
    hyper.sigma2 = trial % 2 ? 1e-3 : 2.0;
    const CacheModel model = build_cache(
        inst.keys, inst.labels, hyper, {}, even_partition(6, 1 + trial % 3));
    const GpResult gp = gp_cache_logits(model, inst.queries);
    CHECK(gp.variance.minCoeff() >= 0.0);
    CHECK(gp.variance.maxCoeff() <= 1.0 + 1e-12);
  }
}

TEST_CASE("eta = 0 leaves the posterior mean untouched bit for bit") {
  std::mt19937_64 rng(303);
  const Instance inst = random_instance(5, 3, 12, 9, rng);
  CacheHyper hyper;
  hyper.eta = 0.0;
  const CacheModel model = build_cache(inst.keys, inst.labels, hyper);
  CHECK(testutil::bitwise_equal(
      confidence_calibrated_logits(model, inst.queries),
      gp_cache_logits(model, inst.queries).logits));
}

TEST_CASE("kernel-vote logits multiply the kernel into the one-hot values") {
  std::mt19937_64 rng(404);
  const Instance inst = random_instance(4, 3, 9, 6, rng);
  CacheHyper hyper;
  hyper.kernel.beta = 4.0;
  const CacheModel flat = build_cache(inst.keys, inst.labels, hyper);
  const Eigen::MatrixXd expected =
      kernel_matrix(inst.queries, inst.keys, hyper.kernel) *
      inst.labels.one_hot();
  const Eigen::MatrixXd got = nw_cache_logits(flat, inst.queries);
  CHECK((got - expected).cwiseAbs().maxCoeff() < 1e-14);

  // The vote runs over all keys regardless of any partition.
  const CacheModel grouped = build_cache(inst.keys, inst.labels, hyper, {},
                                         even_partition(4, 2));
  CHECK(testutil::bitwise_equal(got, nw_cache_logits(grouped, inst.queries)));
}

TEST_CASE("alpha = 0 reduces fusion to the zero-shot scores") {
  std::mt19937_64 rng(505);
  const Instance inst = random_instance(5, 2, 8, 11, rng);
  CacheHyper hyper;
  hyper.alpha = 0.0;
  hyper.eta = 1.0;
  const CacheModel model = build_cache(inst.keys, inst.labels, hyper);
  const Eigen::MatrixXd zs = zero_shot_logits(inst.weights, inst.queries);
  for (FusionMode mode :
       {FusionMode::kNadarayaWatson, FusionMode::kGaussianProcess}) {
    const Eigen::MatrixXd fused =
        fused_logits(model, inst.weights, inst.queries, mode);
    CHECK((fused.array() == zs.array()).all());
  }
}

TEST_CASE("a single all-class group behaves exactly like no partition") {
  std::mt19937_64 rng(606);
  const Instance inst = random_instance(6, 3, 10, 8, rng);
  CacheHyper hyper;
  hyper.eta = 1.2;
  hyper.sigma2 = 0.3;
  const CacheModel flat = build_cache(inst.keys, inst.labels, hyper);
  const CacheModel one_group = build_cache(inst.keys, inst.labels, hyper, {},
                                           even_partition(6, 1));
  CHECK(testutil::bitwise_equal(
      fused_logits(flat, inst.weights, inst.queries,
                   FusionMode::kGaussianProcess),
      fused_logits(one_group, inst.weights, inst.queries,
                   FusionMode::kGaussianProcess)));
  const GpResult a = gp_cache_logits(flat, inst.queries);
  const GpResult b = gp_cache_logits(one_group, inst.queries);
  CHECK(testutil::bitwise_equal(a.logits, b.logits));
  CHECK(testutil::bitwise_equal(a.variance, b.variance));
}

TEST_CASE("groups without keys fall back to the prior") {
  std::mt19937_64 rng(707);
  // Four classes but keys only for classes 0 and 1.
  FeatureMatrix keys{testutil::random_unit_rows(6, 8, rng)};
  LabelVector labels;
  labels.num_classes = 4;
  labels.labels.resize(6);
  labels.labels << 0, 0, 0, 1, 1, 1;
  GroupPartition part;
  part.num_classes = 4;
  part.groups = {{0, 1}, {2, 3}};

  CacheHyper hyper;
  const CacheModel model = build_cache(keys, labels, hyper, {}, part);
  FeatureMatrix q{testutil::random_unit_rows(5, 8, rng)};
  const GpResult gp = gp_cache_logits(model, q);
  CHECK((gp.variance.col(1).array() == 1.0).all());
  CHECK(gp.logits.col(2).isZero(0.0));
  CHECK(gp.logits.col(3).isZero(0.0));
  CHECK_FALSE(gp.logits.col(0).isZero(0.0));
  CHECK(model.solve.groups[1].applied_sigma2 == hyper.sigma2);
}

TEST_CASE("duplicate keys at sigma2 = 0 trigger the jitter retry") {
  Eigen::MatrixXd keys(2, 3);
  keys << 1.0, 0.0, 0.0,
          1.0, 0.0, 0.0;
  LabelVector labels;
  labels.num_classes = 2;
  labels.labels.resize(2);
  labels.labels << 0, 1;
  CacheHyper hyper;
  hyper.sigma2 = 0.0;
  const CacheModel model = build_cache(FeatureMatrix{keys}, labels, hyper);
  REQUIRE(model.solve.groups.size() == 1);
  CHECK(model.solve.groups[0].applied_sigma2 == kJitter);

  FeatureMatrix q(FeatureMatrix{Eigen::MatrixXd::Identity(1, 3)});
  const GpResult gp = gp_cache_logits(model, q);
  CHECK(std::isfinite(gp.logits(0, 0)));
  CHECK(std::isfinite(gp.variance(0, 0)));
}

TEST_CASE("an unfixable system raises a numerical error naming its context") {
  Eigen::MatrixXd indefinite(2, 2);
  indefinite << 1.0, 2.0,
                2.0, 1.0;
  try {
    detail::factor_regularized(indefinite, 1.0, "unit-test system");
    FAIL("expected a numerical error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kNumerical);
    CHECK(std::string(e.what()).find("unit-test system") != std::string::npos);
  }

  const detail::RegularizedFactor jittered =
      detail::factor_regularized(Eigen::MatrixXd::Ones(2, 2), 0.0, "ones");
  CHECK(jittered.applied_sigma2 == kJitter);
}

TEST_CASE("huge observation noise recovers the kernel-vote ranking") {
  // With sigma2 >> 1 the solve approaches kappa Y / sigma2: same argmax as
  // the plain kernel vote over one group.
  std::mt19937_64 rng(808);
  for (int trial = 0; trial < 5; ++trial) {
    const Instance inst = random_instance(6, 3, 16, 20, rng);
    CacheHyper hyper;
    hyper.sigma2 = 1e8;
    hyper.eta = 0.0;
    const CacheModel model = build_cache(inst.keys, inst.labels, hyper);
    const Eigen::VectorXi gp =
        detail::argmax_rows(gp_cache_logits(model, inst.queries).logits);
    const Eigen::VectorXi nw =
        detail::argmax_rows(nw_cache_logits(model, inst.queries));
    CHECK((gp.array() == nw.array()).all());
  }
}

TEST_CASE("argmax ties resolve to the lowest class id") {
  Eigen::MatrixXd logits(2, 3);
  logits << 1.0, 3.0, 3.0,
            2.0, 2.0, 2.0;
  const Eigen::VectorXi ids = detail::argmax_rows(logits);
  CHECK(ids[0] == 1);
  CHECK(ids[1] == 0);
}

TEST_CASE("prediction reports labels with the model's class count") {
  std::mt19937_64 rng(909);
  const Instance inst = random_instance(4, 2, 6, 10, rng);
  CacheHyper hyper;
  const CacheModel model = build_cache(inst.keys, inst.labels, hyper);
  const LabelVector pred =
      predict(model, inst.weights, inst.queries, FusionMode::kGaussianProcess);
  CHECK(pred.num_classes == 4);
  CHECK(pred.rows() == 10);
  CHECK(pred.labels.minCoeff() >= 0);
  CHECK(pred.labels.maxCoeff() < 4);
}

TEST_CASE("a calibration layer reshapes both keys and queries") {
  std::mt19937_64 rng(1010);
  const Instance inst = random_instance(4, 3, 8, 6, rng);
  CalibrationLayer layer;
  layer.proj = 0.4 * testutil::random_unit_rows(8, 8, rng);

  CacheHyper hyper;
  hyper.sigma2 = 0.4;
  const CacheModel model =
      build_cache(inst.keys, inst.labels, hyper, layer);
  const FeatureMatrix keys_cal = apply(layer, inst.keys);
  CHECK(testutil::bitwise_equal(model.keys_effective, keys_cal.data));

  // Identical to building an uncalibrated cache on pre-calibrated features.
  const CacheModel pre = build_cache(keys_cal, inst.labels, hyper);
  const FeatureMatrix queries_cal = apply(layer, inst.queries);
  const GpResult got = gp_cache_logits(model, inst.queries);
  const GpResult expected = gp_cache_logits(pre, queries_cal);
  CHECK((got.logits - expected.logits).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((got.variance - expected.variance).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("cache construction rejects malformed inputs") {
  std::mt19937_64 rng(1111);
  const Instance inst = random_instance(3, 2, 5, 2, rng);
  const CacheHyper ok;

  CHECK_THROWS_AS(
      build_cache(FeatureMatrix{Eigen::MatrixXd(0, 5)}, inst.labels, ok),
      Error);

  LabelVector short_labels = inst.labels;
  short_labels.labels.conservativeResize(3);
  CHECK_THROWS_AS(build_cache(inst.keys, short_labels, ok), Error);

  LabelVector bad_range = inst.labels;
  bad_range.labels[0] = 3;
  CHECK_THROWS_AS(build_cache(inst.keys, bad_range, ok), Error);

  CacheHyper bad = ok;
  bad.alpha = -0.5;
  CHECK_THROWS_AS(build_cache(inst.keys, inst.labels, bad), Error);
  bad = ok;
  bad.eta = -1.0;
  CHECK_THROWS_AS(build_cache(inst.keys, inst.labels, bad), Error);
  bad = ok;
  bad.kernel.beta = -2.0;
  CHECK_THROWS_AS(build_cache(inst.keys, inst.labels, bad), Error);
  bad = ok;
  bad.sigma2 = -1e-9;
  CHECK_THROWS_AS(build_cache(inst.keys, inst.labels, bad), Error);

  CHECK_THROWS_AS(
      build_cache(inst.keys, inst.labels, ok, CalibrationLayer::identity(7)),
      Error);

  GroupPartition missing;
  missing.num_classes = 3;
  missing.groups = {{0, 1}};  // class 2 unassigned
  CHECK_THROWS_AS(build_cache(inst.keys, inst.labels, ok, {}, missing), Error);

  GroupPartition duplicated;
  duplicated.num_classes = 3;
  duplicated.groups = {{0, 1}, {1, 2}};
  CHECK_THROWS_AS(build_cache(inst.keys, inst.labels, ok, {}, duplicated),
                  Error);

  GroupPartition wrong_count;
  wrong_count.num_classes = 4;
  wrong_count.groups = {{0, 1, 2, 3}};
  CHECK_THROWS_AS(build_cache(inst.keys, inst.labels, ok, {}, wrong_count),
                  Error);

  const CacheModel model = build_cache(inst.keys, inst.labels, ok);
  FeatureMatrix bad_queries{testutil::random_unit_rows(2, 6, rng)};
  CHECK_THROWS_AS(gp_cache_logits(model, bad_queries), Error);
  ZeroShotWeights bad_weights;
  bad_weights.matrix = testutil::random_unit_rows(2, 5, rng).transpose();
  CHECK_THROWS_AS(
      fused_logits(model, bad_weights, inst.queries, FusionMode::kGaussianProcess),
      Error);
}
