#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "endoev/fusion.hpp"
#include "endoev/tuning.hpp"
#include "endoev/util.hpp"

using namespace endoev;

namespace {

LabelSpace toy_space() {
  return parse_taxonomy(
      "[classes]\n0 region gut\n1 pathology lesion\n[region_order]\n0\n[landmark_rules]\n");
}

ProbStream stream_of(const std::string& video, std::size_t frames,
                     const std::vector<std::pair<std::size_t, double>>& pathology_spans,
                     double background) {
  ProbStream s;
  s.video_id = video;
  s.probs = ProbMatrix(frames, 2);
  for (std::size_t t = 0; t < frames; ++t) {
    s.probs.at(t, 0) = 0.99;  // single region everywhere
    s.probs.at(t, 1) = background;
  }
  for (std::size_t i = 0; i + 1 < pathology_spans.size(); i += 2) {
    for (std::size_t t = pathology_spans[i].first; t < pathology_spans[i + 1].first; ++t) {
      s.probs.at(t, 1) = pathology_spans[i].second;
    }
  }
  return s;
}

GroundTruth gt_with_event(const std::string& video, std::size_t frames, std::size_t start,
                          std::size_t end) {
  GroundTruth gt;
  gt.video_id = video;
  gt.labels = LabelMatrix(frames, 2);
  for (std::size_t t = 0; t < frames; ++t) gt.labels.at(t, 0) = 1;
  for (std::size_t t = start; t < end; ++t) gt.labels.at(t, 1) = 1;
  return gt;
}

}  // namespace

TEST_CASE("grid_search_temperature: singleton grid returns its element") {
  LabelSpace space = toy_space();
  ProbStream s = stream_of("v", 50, {{10, 0.8}, {20, 0.0}}, 0.2);
  GroundTruth gt = gt_with_event("v", 50, 10, 20);
  CHECK(grid_search_temperature({s}, {gt}, space, {1.0}, {0.5, 0.5}) == doctest::Approx(1.0));
  CHECK_THROWS_AS(grid_search_temperature({s}, {gt}, space, {}, {0.5, 0.5}), InputError);
  CHECK_THROWS_AS(grid_search_temperature({s}, {gt}, space, {0.0}, {0.5, 0.5}), InputError);
}

TEST_CASE("frame-mAP objective is temperature-invariant, so the smallest T wins the tie") {
  LabelSpace space = toy_space();
  std::mt19937 rng(3);
  ProbStream s;
  s.video_id = "v";
  s.probs = ProbMatrix(60, 2);
  std::uniform_real_distribution<double> uniform(0.05, 0.95);
  for (double& p : s.probs.data()) p = uniform(rng);
  GroundTruth gt = gt_with_event("v", 60, 15, 40);

  double best = grid_search_temperature({s}, {gt}, space, {2.0, 0.5, 1.0}, {0.5, 0.5},
                                        TemperatureObjective::frame_map);
  CHECK(best == doctest::Approx(0.5));
}

TEST_CASE("F1 objective picks the temperature aligning probabilities with the threshold") {
  LabelSpace space = toy_space();
  // positives sit at 0.6, negatives at 0.3, threshold fixed at 0.7: only a
  // sharpening temperature pushes positives over the threshold
  ProbStream s = stream_of("v", 40, {{10, 0.6}, {30, 0.0}}, 0.3);
  GroundTruth gt = gt_with_event("v", 40, 10, 30);
  std::vector<double> thresholds = {0.5, 0.7};
  std::vector<double> grid = {0.25, 1.0, 2.0};

  // oracle: evaluate the three candidates directly
  double best_t = 0.0, best_f1 = -1.0;
  for (double t : grid) {
    long long tp = 0, fp = 0, fn = 0;
    for (std::size_t frame = 0; frame < 40; ++frame) {
      bool label = gt.labels.at(frame, 1) != 0;
      bool pred = calibrate_prob(s.probs.at(frame, 1), t) >= 0.7;
      tp += pred && label;
      fp += pred && !label;
      fn += !pred && label;
    }
    double f1 = tp + fp + fn == 0 ? 0.0 : 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
    // class 0 (always positive, always predicted at 0.5) contributes F1 = 1
    double mean_f1 = (1.0 + f1) / 2.0;
    if (mean_f1 > best_f1) {
      best_f1 = mean_f1;
      best_t = t;
    }
  }
  CHECK(best_t == doctest::Approx(0.25));

  double chosen = grid_search_temperature({s}, {gt}, space, grid, thresholds);
  CHECK(chosen == doctest::Approx(best_t));
}

TEST_CASE("init_thresholds_f1 picks the F1-optimal observed score") {
  LabelSpace space = toy_space();
  // class 1 scores [0.9, 0.6, 0.4, 0.2] with labels [1, 1, 0, 0]
  ProbStream s;
  s.video_id = "v";
  s.probs = ProbMatrix(4, 2);
  double scores[4] = {0.9, 0.6, 0.4, 0.2};
  for (std::size_t t = 0; t < 4; ++t) {
    s.probs.at(t, 0) = 0.9;
    s.probs.at(t, 1) = scores[t];
  }
  GroundTruth gt = gt_with_event("v", 4, 0, 2);

  // oracle: evaluate every candidate threshold
  double best_theta = 0.0, best_f1 = -1.0;
  for (double theta : scores) {
    long long tp = 0, fp = 0, fn = 0;
    for (std::size_t t = 0; t < 4; ++t) {
      bool label = t < 2;
      bool pred = scores[t] >= theta;
      tp += pred && label;
      fp += pred && !label;
      fn += !pred && label;
    }
    double f1 = 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
    if (f1 > best_f1 || (f1 == best_f1 && theta > best_theta)) {
      best_f1 = f1;
      best_theta = theta;
    }
  }
  CHECK(best_theta == doctest::Approx(0.6));
  CHECK(best_f1 == doctest::Approx(1.0));

  auto thresholds = init_thresholds_f1({s}, {gt}, space);
  CHECK(thresholds[1] == doctest::Approx(0.6));
}

TEST_CASE("init_thresholds_f1: all-positive class takes the minimum score") {
  LabelSpace space = toy_space();
  ProbStream s;
  s.video_id = "v";
  s.probs = ProbMatrix(3, 2);
  double scores[3] = {0.9, 0.7, 0.3};
  for (std::size_t t = 0; t < 3; ++t) {
    s.probs.at(t, 0) = 0.9;
    s.probs.at(t, 1) = scores[t];
  }
  GroundTruth gt = gt_with_event("v", 3, 0, 3);  // every frame positive
  auto thresholds = init_thresholds_f1({s}, {gt}, space);
  CHECK(thresholds[1] == doctest::Approx(0.3));
}

TEST_CASE("init_thresholds_f1: class without positives defaults to 0.5") {
  LabelSpace space = toy_space();
  ProbStream s;
  s.video_id = "v";
  s.probs = ProbMatrix(3, 2, 0.4);
  GroundTruth gt = gt_with_event("v", 3, 0, 0);  // no pathology positives
  auto thresholds = init_thresholds_f1({s}, {gt}, space);
  CHECK(thresholds[1] == doctest::Approx(0.5));
}

namespace {

// the staircase instance: objective(theta) is 0 above 0.58, 0.5 in
// (0.5, 0.58], 1.0 in (0.38, 0.5], and 0 at or below the background
struct StaircaseInstance {
  LabelSpace space = toy_space();
  std::vector<ProbStream> streams;
  std::vector<EventRecord> gt_events;
  DecodeConfig cfg;

  StaircaseInstance() {
    ProbStream s;
    s.video_id = "v";
    s.probs = ProbMatrix(300, 2);
    for (std::size_t t = 0; t < 300; ++t) {
      s.probs.at(t, 0) = 0.99;
      double p = 0.38;
      if (t >= 100 && t < 120) p = 0.5;
      if (t >= 120 && t < 180) p = 0.58;
      if (t >= 180 && t < 200) p = 0.5;
      s.probs.at(t, 1) = p;
    }
    streams.push_back(std::move(s));
    gt_events.push_back({"v", 1, 100, 200, 1.0});
    cfg.thresholds = {0.5, 0.6};
  }
};

}  // namespace

TEST_CASE("local search descends the staircase and matches the exhaustive sweep") {
  StaircaseInstance inst;
  std::vector<double> theta0 = {0.5, 0.6};

  // exhaustive 0.005-resolution sweep over the pathology threshold (oracle)
  double sweep_best = -1.0;
  for (double theta = 0.005; theta < 1.0; theta += 0.005) {
    DecodeConfig cfg = inst.cfg;
    cfg.thresholds = {0.5, theta};
    double value = decode_objective(inst.streams, inst.gt_events, inst.space, cfg,
                                    TuneObjective::mean_both);
    sweep_best = std::max(sweep_best, value);
  }
  CHECK(sweep_best == doctest::Approx(1.0));

  LocalSearchResult result = local_search_thresholds(theta0, inst.cfg, inst.streams,
                                                     inst.gt_events, inst.space,
                                                     TuneObjective::mean_both);
  CHECK(result.objective_value == doctest::Approx(sweep_best));
  CHECK(result.thresholds[1] == doctest::Approx(0.5));
  REQUIRE(result.trace.size() >= 3);
  CHECK(result.trace.front().second == doctest::Approx(0.0));
  CHECK(result.trace.back().second == doctest::Approx(1.0));
  for (std::size_t i = 1; i < result.trace.size(); ++i) {
    CHECK(result.trace[i].second >= result.trace[i - 1].second);
  }
}

TEST_CASE("local search at a fixed point returns theta0 with a single trace entry") {
  LabelSpace space = toy_space();
  ProbStream s = stream_of("v", 300, {{100, 0.9}, {200, 0.0}}, 0.1);
  std::vector<EventRecord> gt_events = {{"v", 1, 100, 200, 1.0}};
  DecodeConfig cfg;
  cfg.thresholds = {0.5, 0.5};

  LocalSearchResult result = local_search_thresholds({0.5, 0.5}, cfg, {s}, gt_events, space,
                                                     TuneObjective::mean_both);
  CHECK(result.thresholds[0] == doctest::Approx(0.5));
  CHECK(result.thresholds[1] == doctest::Approx(0.5));
  CHECK(result.trace.size() == 1);
  CHECK(result.objective_value == doctest::Approx(1.0));
}

TEST_CASE("local search trace is non-decreasing on seeded random instances") {
  LabelSpace space = toy_space();
  for (std::uint32_t seed : {1u, 2u, 3u, 4u, 5u}) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> noise(-0.25, 0.25);
    ProbStream s;
    s.video_id = "v";
    s.probs = ProbMatrix(200, 2);
    GroundTruth gt;
    gt.video_id = "v";
    gt.labels = LabelMatrix(200, 2);
    for (std::size_t t = 0; t < 200; ++t) {
      gt.labels.at(t, 0) = 1;
      bool inside = (t >= 40 && t < 90) || (t >= 140 && t < 170);
      gt.labels.at(t, 1) = inside;
      s.probs.at(t, 0) = 0.99;
      s.probs.at(t, 1) = std::clamp((inside ? 0.62 : 0.3) + noise(rng), 0.0, 1.0);
    }
    std::vector<EventRecord> gt_events = ground_truth_to_events(gt);
    DecodeConfig cfg;
    cfg.smoothing_window.pathology = 5;
    cfg.open_len.pathology = 3;
    cfg.close_len.pathology = 5;
    cfg.thresholds = {0.5, 0.55};
    LocalSearchOptions options;
    options.max_cycles = 12;
    LocalSearchResult result = local_search_thresholds(cfg.thresholds, cfg, {s}, gt_events,
                                                       space, TuneObjective::mean_both, options);
    REQUIRE(!result.trace.empty());
    for (std::size_t i = 1; i < result.trace.size(); ++i) {
      CHECK(result.trace[i].second >= result.trace[i - 1].second);
    }
    CHECK(result.objective_value >= result.trace.front().second);
  }
}

TEST_CASE("tune_decode_params: singleton grid returns that configuration") {
  StaircaseInstance inst;
  DecodeParamGrid grid;
  grid.region_windows = {7};
  grid.pathology_windows = {3};
  grid.open_lens = {3};
  grid.close_lens = {5};
  DecodeConfig best = tune_decode_params(grid, inst.cfg, inst.streams, inst.gt_events,
                                         inst.space, TuneObjective::mean_both);
  CHECK(best.smoothing_window.region == 7);
  CHECK(best.smoothing_window.pathology == 3);
  CHECK(best.open_len.pathology == 3);
  CHECK(best.close_len.pathology == 5);
  DecodeParamGrid empty;
  empty.open_lens.clear();
  CHECK_THROWS_AS(tune_decode_params(empty, inst.cfg, inst.streams, inst.gt_events, inst.space,
                                     TuneObjective::mean_both),
                  InputError);
}

TEST_CASE("tune_decode_params: ties break toward the smaller window") {
  // noise-free stream: both window 1 and window 9 decode perfectly
  LabelSpace space = toy_space();
  ProbStream s = stream_of("v", 200, {{60, 0.92}, {120, 0.0}}, 0.08);
  std::vector<EventRecord> gt_events = {{"v", 1, 60, 120, 1.0}};
  DecodeConfig base;
  base.thresholds = {0.5, 0.5};

  DecodeParamGrid grid;
  grid.region_windows = {1};
  grid.pathology_windows = {1, 9};
  grid.open_lens = {1};
  grid.close_lens = {1};
  DecodeConfig best = tune_decode_params(grid, base, {s}, gt_events, space,
                                         TuneObjective::mean_both);
  // both candidates reach objective 1; explicit check, then the tie-break
  DecodeConfig with9 = base;
  with9.smoothing_window.pathology = 9;
  with9.smoothing_window.landmark = 9;
  CHECK(decode_objective({s}, gt_events, space, with9, TuneObjective::mean_both) ==
        doctest::Approx(1.0));
  CHECK(decode_objective({s}, gt_events, space, base, TuneObjective::mean_both) ==
        doctest::Approx(1.0));
  CHECK(best.smoothing_window.pathology == 1);
}

TEST_CASE("tune_decode_params selects the strictly best smoothing window") {
  LabelSpace space = toy_space();
  // alternating 0.9 / 0.45 inside the event: window 1 fragments, window 5
  // recovers the span exactly
  ProbStream s;
  s.video_id = "v";
  s.probs = ProbMatrix(160, 2);
  for (std::size_t t = 0; t < 160; ++t) {
    s.probs.at(t, 0) = 0.99;
    s.probs.at(t, 1) = 0.2;
  }
  for (std::size_t t = 50; t < 81; ++t) {
    s.probs.at(t, 1) = (t - 50) % 2 == 0 ? 0.9 : 0.45;
  }
  std::vector<EventRecord> gt_events = {{"v", 1, 50, 81, 1.0}};
  DecodeConfig base;
  base.thresholds = {0.5, 0.5};

  DecodeParamGrid grid;
  grid.region_windows = {1};
  grid.pathology_windows = {1, 5};
  grid.open_lens = {1};
  grid.close_lens = {1};
  DecodeConfig best = tune_decode_params(grid, base, {s}, gt_events, space,
                                         TuneObjective::mean_both);
  CHECK(best.smoothing_window.pathology == 5);

  DecodeConfig with5 = base;
  with5.smoothing_window.pathology = 5;
  with5.smoothing_window.landmark = 5;
  CHECK(decode_objective({s}, gt_events, space, with5, TuneObjective::mean_both) >
        decode_objective({s}, gt_events, space, base, TuneObjective::mean_both));
}

TEST_CASE("tune report serializes and validates") {
  LabelSpace space = toy_space();
  TuneReport report;
  report.temperature = 1.25;
  report.thresholds = {0.4, 0.55};
  report.objective = TuneObjective::mean_both;
  report.decode.thresholds = report.thresholds;
  report.decode.smoothing_window.pathology = 5;
  report.trace = {{1, 0.2}, {5, 0.4}};

  TuneReport reloaded = parse_tune_report(serialize_tune_report(report), space);
  CHECK(reloaded.temperature == doctest::Approx(1.25));
  CHECK(reloaded.thresholds == report.thresholds);
  CHECK(reloaded.decode.smoothing_window.pathology == 5);
  REQUIRE(reloaded.trace.size() == 2);
  CHECK(reloaded.trace[1].second == doctest::Approx(0.4));

  TuneReport bad = report;
  bad.thresholds = {0.4};
  CHECK_THROWS_AS(parse_tune_report(serialize_tune_report(bad), space), InputError);
}
