#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>

#include "endoev/metrics.hpp"
#include "endoev/synth.hpp"
#include "endoev/util.hpp"

using namespace endoev;

namespace {

SynthConfig small_config(const LabelSpace& space, std::uint64_t seed) {
  SynthConfig cfg = default_synth_config(space);
  cfg.seed = seed;
  cfg.videos = 6;
  cfg.min_frames = 400;
  cfg.max_frames = 600;
  cfg.train_videos = 3;
  cfg.val_videos = 2;
  cfg.test_videos = 1;
  return cfg;
}

}  // namespace

TEST_CASE("the same seed reproduces the corpus byte for byte") {
  LabelSpace space = default_label_space();
  SynthConfig cfg = small_config(space, 99);
  SynthCorpus a = generate_corpus(cfg, space);
  SynthCorpus b = generate_corpus(cfg, space, 4);  // worker count must not matter
  REQUIRE(a.streams.size() == b.streams.size());
  for (std::size_t i = 0; i < a.streams.size(); ++i) {
    CHECK(a.streams[i].video_id == b.streams[i].video_id);
    CHECK(a.streams[i].source == b.streams[i].source);
    CHECK(a.streams[i].probs.data() == b.streams[i].probs.data());
  }
  REQUIRE(a.ground_truth.size() == b.ground_truth.size());
  for (std::size_t i = 0; i < a.ground_truth.size(); ++i) {
    CHECK(a.ground_truth[i].labels.data() == b.ground_truth[i].labels.data());
  }
  CHECK(serialize_events_csv(a.gt_events) == serialize_events_csv(b.gt_events));

  SynthConfig other = cfg;
  other.seed = 100;
  SynthCorpus c = generate_corpus(other, space);
  CHECK(serialize_events_csv(a.gt_events) != serialize_events_csv(c.gt_events));
}

TEST_CASE("region ranks are non-decreasing and cover 0..R-1 in every video") {
  LabelSpace space = default_label_space();
  int videos_checked = 0;
  for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
    SynthConfig cfg = small_config(space, seed);
    cfg.videos = 20;
    cfg.train_videos = 20;
    cfg.val_videos = 0;
    cfg.test_videos = 0;
    auto [gts, events] = generate_ground_truth(cfg, space);
    for (const GroundTruth& gt : gts) {
      int last_rank = -1;
      std::vector<bool> seen(static_cast<std::size_t>(space.num_regions()), false);
      for (std::size_t t = 0; t < gt.frame_count(); ++t) {
        int region = -1;
        for (int id : space.region_order()) {
          if (gt.labels.at(t, static_cast<std::size_t>(id))) {
            REQUIRE(region == -1);
            region = id;
          }
        }
        REQUIRE(region >= 0);  // full coverage
        int rank = *space.region_rank(region);
        CHECK(rank >= last_rank);
        last_rank = rank;
        seen[static_cast<std::size_t>(rank)] = true;
      }
      for (bool s : seen) CHECK(s);
      ++videos_checked;
    }
  }
  CHECK(videos_checked == 100);
}

TEST_CASE("a pathology with rate zero produces no events of that class") {
  LabelSpace space = default_label_space();
  SynthConfig cfg = small_config(space, 3);
  cfg.pathology_profiles[8].rate_per_1000 = 0.0;
  cfg.pathology_profiles[9].rate_per_1000 = 2.0;  // keep at least one positive rate
  auto [gts, events] = generate_ground_truth(cfg, space);
  for (const EventRecord& ev : events) CHECK(ev.class_id != 8);
}

TEST_CASE("landmark events straddle boundaries of their valid regions") {
  LabelSpace space = default_label_space();
  SynthConfig cfg = small_config(space, 4);
  auto [gts, events] = generate_ground_truth(cfg, space);
  int landmark_events = 0;
  std::map<std::string, const GroundTruth*> by_video;
  for (const GroundTruth& gt : gts) by_video[gt.video_id] = &gt;
  for (const EventRecord& ev : events) {
    auto it = space.landmark_rules().find(ev.class_id);
    if (it == space.landmark_rules().end()) continue;
    ++landmark_events;
    const GroundTruth& gt = *by_video.at(ev.video_id);
    // some frame within tolerance of the event lies in a valid region
    bool near_valid = false;
    long long tol = it->second.tolerance_frames;
    long long lo = std::max<long long>(0, ev.start_frame - tol);
    long long hi = std::min<long long>(static_cast<long long>(gt.frame_count()), ev.end_frame + tol);
    for (long long t = lo; t < hi && !near_valid; ++t) {
      for (int region : it->second.valid_regions) {
        if (gt.labels.at(static_cast<std::size_t>(t), static_cast<std::size_t>(region))) {
          near_valid = true;
          break;
        }
      }
    }
    CHECK(near_valid);
  }
  CHECK(landmark_events >= 6);  // one per landmark per video
}

TEST_CASE("noise-free streams threshold back to the ground truth at 0.5") {
  LabelSpace space = default_label_space();
  SynthConfig cfg = small_config(space, 5);
  cfg.videos = 2;
  cfg.train_videos = 2;
  cfg.val_videos = 0;
  cfg.test_videos = 0;
  for (auto& backbone : cfg.backbones) {
    backbone.shared_std = 0.0;
    backbone.head_std = 0.0;
  }
  auto [gts, events] = generate_ground_truth(cfg, space);
  auto streams = generate_predictions(gts, cfg, space);
  REQUIRE(streams.size() == gts.size() * 10);
  std::map<std::string, const GroundTruth*> by_video;
  for (const GroundTruth& gt : gts) by_video[gt.video_id] = &gt;
  for (const ProbStream& s : streams) {
    const GroundTruth& gt = *by_video.at(s.video_id);
    for (std::size_t t = 0; t < s.frame_count(); ++t) {
      for (std::size_t c = 0; c < s.class_count(); ++c) {
        CHECK((s.probs.at(t, c) >= 0.5) == (gt.labels.at(t, c) != 0));
      }
    }
  }
}

TEST_CASE("every generated head ranks its ground truth above a label-shuffled control") {
  LabelSpace space = default_label_space();
  SynthConfig cfg = small_config(space, 6);
  cfg.videos = 3;
  cfg.train_videos = 3;
  cfg.val_videos = 0;
  cfg.test_videos = 0;
  auto [gts, events] = generate_ground_truth(cfg, space);
  auto streams = generate_predictions(gts, cfg, space);

  // shuffled control: permute the frame axis of the labels per video
  std::mt19937 rng(123);
  std::vector<GroundTruth> shuffled = gts;
  for (GroundTruth& gt : shuffled) {
    std::vector<std::size_t> perm(gt.frame_count());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    LabelMatrix moved(gt.frame_count(), gt.class_count());
    for (std::size_t t = 0; t < perm.size(); ++t) {
      for (std::size_t c = 0; c < gt.class_count(); ++c) {
        moved.at(t, c) = gt.labels.at(perm[t], c);
      }
    }
    gt.labels = std::move(moved);
  }

  StreamSet set(streams);
  for (int b : set.backbone_ids()) {
    for (int m : set.model_ids(b)) {
      std::vector<ProbStream> head;
      for (const GroundTruth& gt : gts) head.push_back(set.get(gt.video_id, {b, m, false}));
      double real = frame_map(head, gts, space).map.value();
      double control = frame_map(head, shuffled, space).map.value();
      CHECK(real > control);
    }
  }
}

TEST_CASE("split manifest carries the configured partition and round-trips") {
  LabelSpace space = default_label_space();
  SynthConfig cfg = small_config(space, 7);
  SynthCorpus corpus = generate_corpus(cfg, space);
  CHECK(corpus.split.train.size() == 3);
  CHECK(corpus.split.val.size() == 2);
  CHECK(corpus.split.test.size() == 1);
  SplitManifest reloaded = parse_split(serialize_split(corpus.split));
  CHECK(reloaded.train == corpus.split.train);
  CHECK(reloaded.val == corpus.split.val);
  CHECK(reloaded.test == corpus.split.test);
}

TEST_CASE("synth config validation catches bad parameters") {
  LabelSpace space = default_label_space();
  SynthConfig cfg = small_config(space, 8);
  cfg.min_frames = 2;
  CHECK_THROWS_AS(cfg.validate(space), InputError);

  cfg = small_config(space, 8);
  cfg.backbones[0].rho = 1.0;
  CHECK_THROWS_AS(cfg.validate(space), InputError);

  cfg = small_config(space, 8);
  for (auto& [id, profile] : cfg.pathology_profiles) profile.rate_per_1000 = 0.0;
  CHECK_THROWS_AS(cfg.validate(space), InputError);

  cfg = small_config(space, 8);
  cfg.test_videos = 99;
  CHECK_THROWS_AS(cfg.validate(space), InputError);
}

TEST_CASE("synth config JSON round trip") {
  LabelSpace space = default_label_space();
  SynthConfig cfg = small_config(space, 12);
  cfg.backbones[1].pathology_scale = 0.4;
  SynthConfig reloaded = parse_synth_config(serialize_synth_config(cfg));
  CHECK(reloaded.seed == cfg.seed);
  CHECK(reloaded.videos == cfg.videos);
  CHECK(reloaded.stick_fractions == cfg.stick_fractions);
  CHECK(reloaded.backbones.size() == cfg.backbones.size());
  CHECK(reloaded.backbones[1].pathology_scale == doctest::Approx(0.4));
  CHECK(reloaded.pathology_profiles.at(8).rate_per_1000 ==
        doctest::Approx(cfg.pathology_profiles.at(8).rate_per_1000));
}
