#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "endoev/heads.hpp"
#include "endoev/metrics.hpp"
#include "endoev/util.hpp"

using namespace endoev;

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

LossSpec bce_spec(double w = 1.0) {
  LossSpec spec;
  spec.kind = LossKind::bce_pos_weight;
  if (w != 1.0) spec.pos_weight = {w};
  return spec;
}

}  // namespace

TEST_CASE("loss closed forms at z = 0") {
  // bce with pos_weight 2, y = 1: loss = 2 ln 2
  auto [bce, bce_grad] = loss_value_and_gradient(bce_spec(2.0), {0.0}, {1});
  CHECK(bce == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
  CHECK(bce_grad[0] == doctest::Approx(2.0 * (0.5 - 1.0)).epsilon(1e-12));

  // focal gamma 2, y = 1: (1 - 0.5)^2 ln 2 = 0.25 ln 2
  LossSpec focal;
  focal.kind = LossKind::focal;
  focal.gamma = 2.0;
  auto [fl, fl_grad] = loss_value_and_gradient(focal, {0.0}, {1});
  CHECK(fl == doctest::Approx(0.25 * std::log(2.0)).epsilon(1e-12));

  // asymmetric gamma- = 1, clip 0.05, y = 0: p_m = 0.45, loss = -0.45 ln 0.55
  LossSpec asym;
  asym.kind = LossKind::asymmetric;
  asym.gamma_pos = 0.0;
  asym.gamma_neg = 1.0;
  asym.clip = 0.05;
  auto [al, al_grad] = loss_value_and_gradient(asym, {0.0}, {0});
  CHECK(al == doctest::Approx(-0.45 * std::log(0.55)).epsilon(1e-12));
  CHECK(al == doctest::Approx(0.2690).epsilon(1e-3));
}

TEST_CASE("analytic gradients match central finite differences for all losses") {
  std::mt19937 rng(71);
  std::uniform_real_distribution<double> z_dist(-4.0, 4.0);
  std::bernoulli_distribution coin(0.5);
  const double step = 1e-5;

  auto check_loss = [&](const LossSpec& spec, bool avoid_clip_kink) {
    int checked = 0;
    while (checked < 200) {
      double z = z_dist(rng);
      // the asymmetric loss has a subgradient kink at p = clip; keep finite
      // differences away from it
      if (avoid_clip_kink && std::abs(sigmoid(z) - spec.clip) < 1e-3) continue;
      std::vector<std::uint8_t> y = {static_cast<std::uint8_t>(coin(rng) ? 1 : 0)};
      auto [loss, grad] = loss_value_and_gradient(spec, {z}, y);
      auto [lp, gp] = loss_value_and_gradient(spec, {z + step}, y);
      auto [lm, gm] = loss_value_and_gradient(spec, {z - step}, y);
      double fd = (lp - lm) / (2.0 * step);
      double rel = std::abs(grad[0] - fd) / std::max({std::abs(grad[0]), std::abs(fd), 1e-6});
      CHECK(rel < 1e-4);
      ++checked;
    }
  };

  check_loss(bce_spec(3.0), false);

  LossSpec focal;
  focal.kind = LossKind::focal;
  focal.gamma = 2.0;
  check_loss(focal, false);

  LossSpec asym;
  asym.kind = LossKind::asymmetric;
  asym.gamma_pos = 0.0;
  asym.gamma_neg = 4.0;
  asym.clip = 0.05;
  check_loss(asym, true);

  LossSpec asym_frac;
  asym_frac.kind = LossKind::asymmetric;
  asym_frac.gamma_pos = 1.0;
  asym_frac.gamma_neg = 0.5;
  asym_frac.clip = 0.1;
  check_loss(asym_frac, true);
}

TEST_CASE("reduction identities: focal(0) and asymmetric(0,0,0) equal plain bce") {
  std::mt19937 rng(73);
  std::uniform_real_distribution<double> z_dist(-5.0, 5.0);
  LossSpec bce = bce_spec();
  LossSpec focal0;
  focal0.kind = LossKind::focal;
  focal0.gamma = 0.0;
  LossSpec asym0;
  asym0.kind = LossKind::asymmetric;
  asym0.gamma_pos = 0.0;
  asym0.gamma_neg = 0.0;
  asym0.clip = 0.0;

  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> z = {z_dist(rng), z_dist(rng)};
    std::vector<std::uint8_t> y = {static_cast<std::uint8_t>(trial % 2),
                                   static_cast<std::uint8_t>((trial / 2) % 2)};
    auto [l0, g0] = loss_value_and_gradient(bce, z, y);
    auto [l1, g1] = loss_value_and_gradient(focal0, z, y);
    auto [l2, g2] = loss_value_and_gradient(asym0, z, y);
    CHECK(std::abs(l1 - l0) <= 1e-12 * std::max(1.0, std::abs(l0)));
    CHECK(std::abs(l2 - l0) <= 1e-12 * std::max(1.0, std::abs(l0)));
    for (std::size_t c = 0; c < z.size(); ++c) {
      CHECK(std::abs(g1[c] - g0[c]) <= 1e-12 * std::max(1.0, std::abs(g0[c])));
      CHECK(std::abs(g2[c] - g0[c]) <= 1e-12 * std::max(1.0, std::abs(g0[c])));
    }
  }
}

TEST_CASE("pos_weight scales the positive loss monotonically") {
  double last = 0.0;
  for (double w : {1.0, 2.0, 5.0, 20.0}) {
    auto [loss, grad] = loss_value_and_gradient(bce_spec(w), {-1.0}, {1});
    CHECK(loss > last);
    last = loss;
  }
  // negative samples are unaffected by pos_weight
  auto [l1, g1] = loss_value_and_gradient(bce_spec(1.0), {-1.0}, {0});
  auto [l9, g9] = loss_value_and_gradient(bce_spec(9.0), {-1.0}, {0});
  CHECK(l1 == doctest::Approx(l9).epsilon(1e-15));
}

TEST_CASE("loss rejects malformed inputs") {
  CHECK_THROWS_AS(loss_value_and_gradient(bce_spec(), {0.0, 1.0}, {1}), InputError);
  CHECK_THROWS_AS(
      loss_value_and_gradient(bce_spec(), {std::numeric_limits<double>::infinity()}, {1}),
      InputError);
}

namespace {

// two linearly separable blobs in 2-D, labels on class 0/1
void toy_problem(FeatureMatrix& features, LabelMatrix& labels) {
  std::mt19937 rng(7);
  std::normal_distribution<double> noise(0.0, 0.3);
  const std::size_t n = 60;
  features = FeatureMatrix(n, 2);
  labels = LabelMatrix(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    bool first = i % 2 == 0;
    features.at(i, 0) = (first ? 2.0 : -2.0) + noise(rng);
    features.at(i, 1) = (first ? -1.5 : 1.5) + noise(rng);
    labels.at(i, first ? 0 : 1) = 1;
  }
}

}  // namespace

TEST_CASE("training loss decreases monotonically on a separable toy set") {
  FeatureMatrix features;
  LabelMatrix labels;
  toy_problem(features, labels);
  HeadSpec spec;
  spec.arch = HeadArch::linear;
  spec.learning_rate = 0.5;
  spec.epochs = 60;
  spec.seed = 5;
  TrainResult result = train_head(features, labels, spec);
  REQUIRE(result.loss_history.size() == 60);
  for (std::size_t e = 1; e < result.loss_history.size(); ++e) {
    CHECK(result.loss_history[e] < result.loss_history[e - 1]);
  }
}

TEST_CASE("zero epochs returns the seeded initialization unchanged") {
  FeatureMatrix features;
  LabelMatrix labels;
  toy_problem(features, labels);
  HeadSpec spec;
  spec.epochs = 0;
  spec.seed = 9;
  TrainResult a = train_head(features, labels, spec);
  TrainResult b = train_head(features, labels, spec);
  CHECK(a.params.w2 == b.params.w2);
  CHECK(a.loss_history.empty());
  CHECK(a.final_loss > 0.0);
}

TEST_CASE("training is bit-identical for a fixed seed") {
  FeatureMatrix features;
  LabelMatrix labels;
  toy_problem(features, labels);
  HeadSpec spec;
  spec.arch = HeadArch::mlp;
  spec.hidden = 8;
  spec.epochs = 40;
  spec.seed = 21;
  TrainResult a = train_head(features, labels, spec);
  TrainResult b = train_head(features, labels, spec);
  CHECK(a.params.w1 == b.params.w1);
  CHECK(a.params.b1 == b.params.b1);
  CHECK(a.params.w2 == b.params.w2);
  CHECK(a.params.b2 == b.params.b2);
  CHECK(a.final_loss == b.final_loss);
}

TEST_CASE("classes without positives are skipped with a report") {
  FeatureMatrix features(10, 2, 0.5);
  LabelMatrix labels(10, 3);
  for (std::size_t i = 0; i < 10; ++i) labels.at(i, 0) = i % 2;
  HeadSpec spec;
  spec.epochs = 3;
  TrainResult result = train_head(features, labels, spec);
  CHECK(result.skipped_classes == std::vector<int>{1, 2});
}

TEST_CASE("predict_head: zero weights give 0.5 and outputs stay in (0,1)") {
  HeadParams params;
  params.arch = HeadArch::linear;
  params.input_dim = 3;
  params.output_dim = 2;
  params.w2.assign(6, 0.0);
  params.b2.assign(2, 0.0);
  FeatureMatrix features(4, 3, 1.7);
  ProbMatrix probs = predict_head(params, features);
  for (double p : probs.data()) CHECK(p == doctest::Approx(0.5));

  std::mt19937 rng(55);
  std::normal_distribution<double> any(0.0, 2.0);
  for (double& w : params.w2) w = any(rng);
  for (double& f : features.data()) f = any(rng);
  probs = predict_head(params, features);
  for (double p : probs.data()) {
    CHECK(p > 0.0);
    CHECK(p < 1.0);
    CHECK(std::isfinite(p));
  }
}

TEST_CASE("a trained head beats a constant predictor on its training data") {
  FeatureMatrix features;
  LabelMatrix labels;
  toy_problem(features, labels);
  HeadSpec spec;
  spec.epochs = 80;
  spec.seed = 2;
  TrainResult result = train_head(features, labels, spec);
  ProbMatrix probs = predict_head(result.params, features);

  std::vector<double> scores, constant;
  std::vector<int> truth;
  for (std::size_t i = 0; i < features.rows(); ++i) {
    scores.push_back(probs.at(i, 0));
    constant.push_back(0.5);
    truth.push_back(labels.at(i, 0));
  }
  CHECK(*frame_ap(scores, truth) > *frame_ap(constant, truth));
}

TEST_CASE("auto_pos_weight clamps #neg/#pos into [1, 100]") {
  LabelMatrix labels(400, 3);
  for (std::size_t i = 0; i < 400; ++i) labels.at(i, 0) = 1;      // all positive
  labels.at(0, 1) = 1;                                            // 1 pos, 399 neg
  for (std::size_t i = 0; i < 200; ++i) labels.at(i, 2) = 1;      // balanced
  auto weights = auto_pos_weight(labels);
  CHECK(weights[0] == doctest::Approx(1.0));    // clamped up
  CHECK(weights[1] == doctest::Approx(100.0));  // clamped down from 399
  CHECK(weights[2] == doctest::Approx(1.0));
}

TEST_CASE("feature container round trip") {
  FeatureMatrix features(5, 3);
  std::mt19937 rng(77);
  std::uniform_real_distribution<double> uniform(-2.0, 2.0);
  for (double& v : features.data()) v = uniform(rng);
  auto path = (std::filesystem::temp_directory_path() / "endoev_features.bin").string();
  save_features(features, path);
  FeatureMatrix reloaded = load_features(path);
  REQUIRE(reloaded.rows() == 5);
  REQUIRE(reloaded.cols() == 3);
  for (std::size_t i = 0; i < features.data().size(); ++i) {
    CHECK(reloaded.data()[i] == doctest::Approx(features.data()[i]).epsilon(1e-6));
  }
  CHECK_THROWS_AS(load_features("/nonexistent/features.bin"), InputError);
}
