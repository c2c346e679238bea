#include <doctest.h>

#include <cmath>
#include <random>

#include "gpcache/approx.hpp"
#include "gpcache/bundle_io.hpp"
#include "gpcache/trainer.hpp"
#include "test_util.hpp"

using namespace gpcache;

namespace {

struct Setup {
  CacheModel model;
  ZeroShotWeights weights;
  FeatureMatrix batch_x;
  LabelVector batch_y;
};

Setup make_setup(std::mt19937_64& rng, double eta,
                 std::optional<CalibrationLayer> calib = {},
                 std::optional<GroupPartition> partition = {}) {
  const int classes = 4, shots = 2, dim = 8, m = 5;
  Setup s;
  FeatureMatrix keys{testutil::random_unit_rows(classes * shots, dim, rng)};
  CacheHyper hyper;
  hyper.alpha = 1.2;
  hyper.kernel.beta = 3.0;
  hyper.sigma2 = 0.25;
  hyper.eta = eta;
  s.model = build_cache(keys, testutil::block_labels(classes, shots), hyper,
                        std::move(calib), std::move(partition));
  s.weights.matrix = testutil::random_unit_rows(classes, dim, rng).transpose();
  s.batch_x.data = testutil::random_unit_rows(m, dim, rng);
  s.batch_y.num_classes = classes;
  s.batch_y.labels.resize(m);
  for (int i = 0; i < m; ++i) s.batch_y.labels[i] = i % classes;
  return s;
}

// Loss as the exact function each gradient mode differentiates: the full
// mode re-solves the per-group systems from the perturbed keys, the
// detached mode keeps the model's factorizations frozen.
double loss_at(const Setup& s, const Eigen::MatrixXd& keys, GradMode mode) {
  CacheModel probe = s.model;
  probe.keys.data = keys;
  if (mode == GradMode::kFullGrad) rebuild_solve(probe);
  return loss_and_grad_keys(probe, s.weights, s.batch_x, s.batch_y, mode).loss;
}

double nw_loss_at(const Setup& s, const Eigen::MatrixXd& keys) {
  CacheModel probe = s.model;
  probe.keys.data = keys;
  return nw_loss_and_grad_keys(probe, s.weights, s.batch_x, s.batch_y).loss;
}

void check_gradient(const Setup& s, GradMode mode) {
  const KeyGradient kg =
      loss_and_grad_keys(s.model, s.weights, s.batch_x, s.batch_y, mode);
  CHECK(std::isfinite(kg.loss));
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < s.model.keys.rows(); ++i) {
    for (Eigen::Index j = 0; j < s.model.keys.dim(); ++j) {
      Eigen::MatrixXd up = s.model.keys.data, down = s.model.keys.data;
      up(i, j) += h;
      down(i, j) -= h;
      const double fd = (loss_at(s, up, mode) - loss_at(s, down, mode)) /
                        (2.0 * h);
      const double an = kg.grad_keys(i, j);
      CHECK(std::abs(fd - an) <=
            1e-8 + 1e-4 * std::max(std::abs(fd), std::abs(an)));
    }
  }
}

FeatureBundle small_bundle(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.classes = 5;
  spec.shots = 4;
  spec.dim = 16;
  spec.test_per_class = 6;
  spec.spread = 0.35;
  spec.seed = seed;
  return generate_synthetic(spec);
}

}  // namespace

TEST_CASE("cross entropy on a fixed instance and the uniform case") {
  Eigen::MatrixXd logits(2, 3);
  logits << 2.0, -1.0, 0.5,
            0.0, 0.0, 3.0;
  LabelVector y;
  y.num_classes = 3;
  y.labels.resize(2);
  y.labels << 0, 1;
  CHECK(cross_entropy(logits, y) ==
        doctest::Approx(1.6681171265390591).epsilon(1e-14));

  const Eigen::MatrixXd uniform = Eigen::MatrixXd::Constant(4, 5, 0.7);
  LabelVector u;
  u.num_classes = 5;
  u.labels = Eigen::VectorXi::Zero(4);
  CHECK(cross_entropy(uniform, u) ==
        doctest::Approx(std::log(5.0)).epsilon(1e-14));

  // Shifting all logits by a large constant must not change the value.
  CHECK(cross_entropy(logits.array() + 1e4, y) ==
        doctest::Approx(1.6681171265390591).epsilon(1e-9));

  LabelVector bad = y;
  bad.labels[0] = 3;
  CHECK_THROWS_AS(cross_entropy(logits, bad), Error);
  bad.labels.conservativeResize(1);
  CHECK_THROWS_AS(cross_entropy(logits, bad), Error);
  CHECK_THROWS_AS(cross_entropy(Eigen::MatrixXd(0, 3), LabelVector{}), Error);
}

TEST_CASE("full gradient matches finite differences with a re-solved system") {
  std::mt19937_64 rng(51);
  for (double eta : {0.0, 0.7}) {
    for (int trial = 0; trial < 3; ++trial) {
      check_gradient(make_setup(rng, eta), GradMode::kFullGrad);
    }
  }
}

TEST_CASE("detached gradient matches finite differences with frozen systems") {
  std::mt19937_64 rng(52);
  for (double eta : {0.0, 0.7}) {
    for (int trial = 0; trial < 3; ++trial) {
      check_gradient(make_setup(rng, eta), GradMode::kNoGrad);
    }
  }
}

TEST_CASE("gradients stay correct under a partition") {
  std::mt19937_64 rng(53);
  GroupPartition part;
  part.num_classes = 4;
  part.groups = {{2, 0}, {1, 3}};
  check_gradient(make_setup(rng, 0.7, {}, part), GradMode::kFullGrad);
  check_gradient(make_setup(rng, 0.7, {}, part), GradMode::kNoGrad);
}

TEST_CASE("gradients flow through a frozen calibration layer") {
  std::mt19937_64 rng(54);
  CalibrationLayer layer;
  layer.proj = 0.3 * testutil::random_unit_rows(8, 8, rng);
  layer.bias = 0.05 * Eigen::VectorXd::Ones(8);
  check_gradient(make_setup(rng, 0.7, layer), GradMode::kFullGrad);
  check_gradient(make_setup(rng, 0.0, layer), GradMode::kNoGrad);
}

TEST_CASE("kernel-vote gradient matches finite differences") {
  std::mt19937_64 rng(55);
  for (int trial = 0; trial < 3; ++trial) {
    const Setup s = make_setup(rng, 0.0);
    const KeyGradient kg =
        nw_loss_and_grad_keys(s.model, s.weights, s.batch_x, s.batch_y);
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < s.model.keys.rows(); ++i) {
      for (Eigen::Index j = 0; j < s.model.keys.dim(); ++j) {
        Eigen::MatrixXd up = s.model.keys.data, down = s.model.keys.data;
        up(i, j) += h;
        down(i, j) -= h;
        const double fd = (nw_loss_at(s, up) - nw_loss_at(s, down)) / (2.0 * h);
        CHECK(std::abs(fd - kg.grad_keys(i, j)) <=
              1e-8 + 1e-4 * std::max(std::abs(fd),
                                     std::abs(kg.grad_keys(i, j))));
      }
    }
  }
}

TEST_CASE("the two modes disagree exactly on the precision-matrix path") {
  std::mt19937_64 rng(56);
  const Setup s = make_setup(rng, 0.7);
  const KeyGradient full =
      loss_and_grad_keys(s.model, s.weights, s.batch_x, s.batch_y,
                         GradMode::kFullGrad);
  const KeyGradient detached =
      loss_and_grad_keys(s.model, s.weights, s.batch_x, s.batch_y,
                         GradMode::kNoGrad);
  CHECK(full.loss == detached.loss);  // identical forward pass
  CHECK_FALSE(testutil::bitwise_equal(full.grad_keys, detached.grad_keys));
}

TEST_CASE("gradient entry points validate the batch") {
  std::mt19937_64 rng(57);
  const Setup s = make_setup(rng, 0.0);
  FeatureMatrix bad_x{testutil::random_unit_rows(5, 9, rng)};
  CHECK_THROWS_AS(loss_and_grad_keys(s.model, s.weights, bad_x, s.batch_y,
                                     GradMode::kFullGrad),
                  Error);
  LabelVector bad_y = s.batch_y;
  bad_y.num_classes = 3;
  for (int i = 0; i < bad_y.labels.size(); ++i) bad_y.labels[i] = 0;
  CHECK_THROWS_AS(nw_loss_and_grad_keys(s.model, s.weights, s.batch_x, bad_y),
                  Error);
}

TEST_CASE("zero epochs return the training-free cache unchanged") {
  const FeatureBundle bundle = small_bundle(61);
  CacheHyper hyper;
  hyper.eta = 0.5;
  TrainConfig cfg;
  cfg.epochs = 0;
  const CacheModel tuned = finetune(bundle, hyper, cfg);
  const CacheModel fresh = build_cache(bundle.train_x, bundle.train_y, hyper);
  CHECK(testutil::bitwise_equal(tuned.keys.data, fresh.keys.data));
  CHECK(testutil::bitwise_equal(
      gp_cache_logits(tuned, bundle.test_x).logits,
      gp_cache_logits(fresh, bundle.test_x).logits));

  const CacheModel nw = finetune_nw_baseline(bundle, hyper, cfg);
  CHECK(testutil::bitwise_equal(nw.keys.data, fresh.keys.data));
}

TEST_CASE("finetuning is deterministic and keeps keys on the sphere") {
  const FeatureBundle bundle = small_bundle(62);
  CacheHyper hyper;
  hyper.eta = 0.5;
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.learning_rate = 0.02;

  std::vector<FinetuneEpoch> log_a, log_b;
  const CacheModel a = finetune(bundle, hyper, cfg, {}, {}, &log_a);
  const CacheModel b = finetune(bundle, hyper, cfg, {}, {}, &log_b);
  CHECK(testutil::bitwise_equal(a.keys.data, b.keys.data));
  REQUIRE(log_a.size() == 3);
  REQUIRE(log_b.size() == 3);
  CHECK(log_a[2].train_loss == log_b[2].train_loss);
  for (int e = 0; e < 3; ++e) {
    CHECK(log_a[e].epoch == e);
    CHECK(log_a[e].val_accuracy >= 0.0);
    CHECK(log_a[e].val_accuracy <= 1.0);
    CHECK(std::isfinite(log_a[e].train_loss));
  }
  for (Eigen::Index i = 0; i < a.keys.rows(); ++i) {
    CHECK(std::abs(a.keys.data.row(i).norm() - 1.0) < 1e-12);
  }

  TrainConfig other = cfg;
  other.seed = 17;
  const CacheModel c = finetune(bundle, hyper, other, {}, {}, nullptr);
  CHECK_FALSE(testutil::bitwise_equal(a.keys.data, c.keys.data));

  // The keys actually moved.
  CHECK_FALSE(testutil::bitwise_equal(a.keys.data, bundle.train_x.data));
}

TEST_CASE("finetuning lowers the training loss") {
  const FeatureBundle bundle = small_bundle(63);
  CacheHyper hyper;
  hyper.eta = 0.5;
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 10;
  cfg.learning_rate = 0.05;
  std::vector<FinetuneEpoch> log;
  finetune(bundle, hyper, cfg, {}, {}, &log);
  REQUIRE(log.size() == 8);
  CHECK(log.back().train_loss < log.front().train_loss);

  std::vector<FinetuneEpoch> nw_log;
  finetune_nw_baseline(bundle, hyper, cfg, {}, &nw_log);
  REQUIRE(nw_log.size() == 8);
  CHECK(nw_log.back().train_loss < nw_log.front().train_loss);
}

TEST_CASE("stale-system training still runs and stays normalized") {
  const FeatureBundle bundle = small_bundle(64);
  CacheHyper hyper;
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.rebuild_every = 3;
  cfg.mode = GradMode::kNoGrad;
  std::vector<FinetuneEpoch> log;
  const CacheModel model = finetune(bundle, hyper, cfg, {}, {}, &log);
  REQUIRE(log.size() == 2);
  for (const FinetuneEpoch& e : log) CHECK(std::isfinite(e.train_loss));
  for (Eigen::Index i = 0; i < model.keys.rows(); ++i) {
    CHECK(std::abs(model.keys.data.row(i).norm() - 1.0) < 1e-12);
  }
}

TEST_CASE("finetune validates its config") {
  const FeatureBundle bundle = small_bundle(65);
  const CacheHyper hyper;
  TrainConfig cfg;
  cfg.epochs = -1;
  CHECK_THROWS_AS(finetune(bundle, hyper, cfg), Error);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(finetune(bundle, hyper, cfg), Error);
  cfg = TrainConfig{};
  cfg.rebuild_every = 0;
  CHECK_THROWS_AS(finetune(bundle, hyper, cfg), Error);
  cfg = TrainConfig{};
  cfg.learning_rate = -0.1;
  CHECK_THROWS_AS(finetune(bundle, hyper, cfg), Error);
}
