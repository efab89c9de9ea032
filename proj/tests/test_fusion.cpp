#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "endoev/fusion.hpp"
#include "endoev/util.hpp"

using namespace endoev;

namespace {

ProbStream random_stream(std::mt19937& rng, const std::string& video, StreamSource source,
                         std::size_t frames, std::size_t classes) {
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  ProbStream s;
  s.video_id = video;
  s.source = source;
  s.probs = ProbMatrix(frames, classes);
  for (double& p : s.probs.data()) p = uniform(rng);
  return s;
}

}  // namespace

TEST_CASE("compute_model_weights normalizes APs per (backbone, class)") {
  ValidationAps aps;
  aps[{0, 0}] = {0.2};
  aps[{0, 1}] = {0.3};
  aps[{0, 2}] = {0.5};
  ModelWeights alpha = compute_model_weights(aps, 1);
  CHECK(alpha.at({0, 0})[0] == doctest::Approx(0.2));
  CHECK(alpha.at({0, 1})[0] == doctest::Approx(0.3));
  CHECK(alpha.at({0, 2})[0] == doctest::Approx(0.5));
}

TEST_CASE("compute_model_weights: equal APs across five models give 0.2 each") {
  ValidationAps aps;
  for (int m = 0; m < 5; ++m) aps[{0, m}] = {0.4};
  ModelWeights alpha = compute_model_weights(aps, 1);
  for (int m = 0; m < 5; ++m) CHECK(alpha.at({0, m})[0] == doctest::Approx(0.2));
}

TEST_CASE("compute_model_weights: all-zero or absent APs fall back to uniform") {
  ValidationAps aps;
  for (int m = 0; m < 5; ++m) aps[{0, m}] = {0.0, std::nullopt};
  ModelWeights alpha = compute_model_weights(aps, 2);
  for (int m = 0; m < 5; ++m) {
    CHECK(alpha.at({0, m})[0] == doctest::Approx(0.2));
    CHECK(alpha.at({0, m})[1] == doctest::Approx(0.2));
  }
}

TEST_CASE("compute_model_weights rejects negative APs") {
  ValidationAps aps;
  aps[{0, 0}] = {-0.1};
  CHECK_THROWS_AS(compute_model_weights(aps, 1), InputError);
}

TEST_CASE("fuse_models: single model with weight one is the identity") {
  std::mt19937 rng(5);
  ProbStream s = random_stream(rng, "v", {0, 0, false}, 10, 3);
  ModelWeights alpha;
  alpha[{0, 0}] = {1.0, 1.0, 1.0};
  ProbStream fused = fuse_models({&s}, alpha, 0);
  CHECK(fused.probs.data() == s.probs.data());
  CHECK(fused.source.backbone_id == 0);
  CHECK(fused.source.model_id == StreamSource::kFusedId);
}

TEST_CASE("fuse_models: two models under equal weights average") {
  ProbStream a, b;
  a.video_id = b.video_id = "v";
  a.source = {0, 0, false};
  b.source = {0, 1, false};
  a.probs = ProbMatrix(1, 1, 0.2);
  b.probs = ProbMatrix(1, 1, 0.6);
  ModelWeights alpha;
  alpha[{0, 0}] = {0.5};
  alpha[{0, 1}] = {0.5};
  CHECK(fuse_models({&a, &b}, alpha, 0).probs.at(0, 0) == doctest::Approx(0.4));
}

TEST_CASE("fuse_models errors on a missing model referenced by alpha") {
  ProbStream a;
  a.video_id = "v";
  a.source = {0, 0, false};
  a.probs = ProbMatrix(1, 1, 0.2);
  ModelWeights alpha;
  alpha[{0, 0}] = {0.5};
  alpha[{0, 1}] = {0.5};
  CHECK_THROWS_WITH_AS(fuse_models({&a}, alpha, 0), doctest::Contains("missing model"),
                       InputError);
}

TEST_CASE("hierarchical fusion stays inside the per-(t,c) envelope of its sources") {
  std::mt19937 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<ProbStream> models;
    for (int m = 0; m < 4; ++m) {
      models.push_back(random_stream(rng, "v", {0, m, false}, 12, 3));
    }
    // random normalized weights per class
    ModelWeights alpha;
    for (std::size_t c = 0; c < 3; ++c) {
      std::vector<double> raw(4);
      double sum = 0.0;
      for (double& w : raw) {
        w = std::uniform_real_distribution<double>(0.01, 1.0)(rng);
        sum += w;
      }
      for (int m = 0; m < 4; ++m) {
        auto& row = alpha[{0, m}];
        if (row.empty()) row.assign(3, 0.0);
        row[c] = raw[static_cast<std::size_t>(m)] / sum;
      }
    }
    std::vector<const ProbStream*> ptrs;
    for (const auto& s : models) ptrs.push_back(&s);
    ProbStream fused = fuse_models(ptrs, alpha, 0);
    for (std::size_t t = 0; t < 12; ++t) {
      for (std::size_t c = 0; c < 3; ++c) {
        double lo = 1.0, hi = 0.0;
        for (const auto& s : models) {
          lo = std::min(lo, s.probs.at(t, c));
          hi = std::max(hi, s.probs.at(t, c));
        }
        CHECK(fused.probs.at(t, c) >= lo - 1e-12);
        CHECK(fused.probs.at(t, c) <= hi + 1e-12);
      }
    }
  }
}

TEST_CASE("compute_backbone_weights") {
  std::map<int, double> maps{{0, 0.6}, {1, 0.4}};
  auto beta = compute_backbone_weights(maps);
  CHECK(beta.at(0) == doctest::Approx(0.6));
  CHECK(beta.at(1) == doctest::Approx(0.4));

  CHECK(compute_backbone_weights({{0, 0.37}}).at(0) == doctest::Approx(1.0));

  auto equal = compute_backbone_weights({{0, 0.5}, {1, 0.5}});
  CHECK(equal.at(0) == doctest::Approx(0.5));
  CHECK(equal.at(1) == doctest::Approx(0.5));

  auto fallback = compute_backbone_weights({{0, 0.0}, {1, 0.0}});
  CHECK(fallback.at(0) == doctest::Approx(0.5));

  CHECK_THROWS_AS(compute_backbone_weights({{0, -0.1}}), InputError);
}

TEST_CASE("fuse_backbones basics") {
  ProbStream a, b;
  a.video_id = b.video_id = "v";
  a.source = {0, StreamSource::kFusedId, false};
  b.source = {1, StreamSource::kFusedId, false};
  a.probs = ProbMatrix(1, 1, 0.8);
  b.probs = ProbMatrix(1, 1, 0.2);
  CHECK(fuse_backbones({&a, &b}, {{0, 1.0}, {1, 0.0}}).probs.at(0, 0) == doctest::Approx(0.8));
  CHECK(fuse_backbones({&a, &b}, {{0, 0.75}, {1, 0.25}}).probs.at(0, 0) == doctest::Approx(0.65));
}

TEST_CASE("calibrate: closed-form values") {
  // T = 2, p = 0.8: sigma(ln 4 / 2) = 2/3 exactly
  CHECK(calibrate_prob(0.8, 2.0) == doctest::Approx(2.0 / 3.0).epsilon(1e-13));
  for (double t : {0.25, 0.5, 1.0, 3.0, 10.0}) {
    CHECK(calibrate_prob(0.5, t) == doctest::Approx(0.5).epsilon(1e-13));
  }
}

TEST_CASE("calibrate with T = 1 is the identity away from the clamp") {
  for (double p : {1e-5, 1e-3, 0.1, 0.5, 0.9, 1.0 - 1e-5}) {
    CHECK(std::abs(calibrate_prob(p, 1.0) - p) < 1e-9);
  }
}

TEST_CASE("calibrate preserves per-frame class ranking") {
  std::mt19937 rng(23);
  ProbStream s = random_stream(rng, "v", {0, 0, false}, 30, 6);
  for (double t : {0.5, 2.0, 5.0}) {
    ProbStream out = calibrate(s, t);
    for (std::size_t frame = 0; frame < 30; ++frame) {
      std::vector<std::size_t> order_in(6), order_out(6);
      std::iota(order_in.begin(), order_in.end(), 0);
      std::iota(order_out.begin(), order_out.end(), 0);
      std::sort(order_in.begin(), order_in.end(), [&](std::size_t a, std::size_t b) {
        return s.probs.at(frame, a) < s.probs.at(frame, b);
      });
      std::sort(order_out.begin(), order_out.end(), [&](std::size_t a, std::size_t b) {
        return out.probs.at(frame, a) < out.probs.at(frame, b);
      });
      CHECK(order_in == order_out);
    }
  }
}

TEST_CASE("calibrate rejects non-positive temperatures") {
  ProbStream s;
  s.video_id = "v";
  s.probs = ProbMatrix(1, 1, 0.5);
  CHECK_THROWS_AS(calibrate(s, 0.0), InputError);
  CHECK_THROWS_AS(calibrate(s, -1.0), InputError);
}

TEST_CASE("uniform weights reduce hierarchical fusion to the plain mean") {
  std::mt19937 rng(31);
  std::vector<ProbStream> all;
  for (int b = 0; b < 2; ++b) {
    for (int m = 0; m < 5; ++m) {
      all.push_back(random_stream(rng, "v", {b, m, false}, 25, 4));
    }
  }
  StreamSet set(all);
  FusionWeights weights = uniform_weights(set, 4);
  weights.validate();
  ProbStream fused = fuse_video(set, "v", weights);  // T = 1

  for (std::size_t t = 0; t < 25; ++t) {
    for (std::size_t c = 0; c < 4; ++c) {
      double mean = 0.0;
      for (const auto& s : all) mean += s.probs.at(t, c);
      mean /= static_cast<double>(all.size());
      // calibration at T = 1 round-trips through logit; allow only tiny noise
      CHECK(std::abs(fused.probs.at(t, c) - mean) < 1e-12);
    }
  }
}

TEST_CASE("weights validate sums and serialize round trip") {
  FusionWeights weights;
  weights.alpha[{0, 0}] = {0.25, 0.5};
  weights.alpha[{0, 1}] = {0.75, 0.5};
  weights.beta[{0}] = 1.0;
  weights.temperature = 1.5;
  weights.validate();

  FusionWeights reloaded = parse_weights(serialize_weights(weights));
  CHECK(reloaded.alpha == weights.alpha);
  CHECK(reloaded.beta == weights.beta);
  CHECK(reloaded.temperature == doctest::Approx(1.5));

  FusionWeights bad = weights;
  bad.alpha[{0, 0}] = {0.3, 0.5};
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("sums to"), InputError);
  bad = weights;
  bad.temperature = 0.0;
  CHECK_THROWS_AS(bad.validate(), InputError);
  bad = weights;
  bad.beta[0] = 0.9;
  CHECK_THROWS_AS(bad.validate(), InputError);
}

TEST_CASE("seeded random weight configurations keep the convex-combination invariants") {
  std::mt19937 rng(91);
  for (int config = 0; config < 10; ++config) {
    ValidationAps aps;
    int models = 3 + config % 3;
    for (int b = 0; b < 2; ++b) {
      for (int m = 0; m < models; ++m) {
        std::vector<std::optional<double>> row(3);
        for (auto& ap : row) {
          double v = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
          ap = v < 0.15 ? std::nullopt : std::optional<double>(v);
        }
        aps[{b, m}] = std::move(row);
      }
    }
    ModelWeights alpha = compute_model_weights(aps, 3);
    for (int b = 0; b < 2; ++b) {
      for (std::size_t c = 0; c < 3; ++c) {
        double sum = 0.0;
        for (int m = 0; m < models; ++m) sum += alpha.at({b, m})[c];
        CHECK(std::abs(sum - 1.0) <= 1e-9);
      }
    }
    std::map<int, double> maps;
    for (int b = 0; b < 2; ++b) {
      maps[b] = std::uniform_real_distribution<double>(0.0, 0.9)(rng);
    }
    auto beta = compute_backbone_weights(maps);
    double beta_sum = 0.0;
    for (const auto& [b, w] : beta) beta_sum += w;
    CHECK(std::abs(beta_sum - 1.0) <= 1e-9);
  }
}
