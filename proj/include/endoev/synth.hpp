#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "endoev/streams.hpp"
#include "endoev/taxonomy.hpp"

namespace endoev {

// Noise family of one simulated backbone. The shared component is drawn once
// per (video, class) and corrupts every head of the backbone identically, so
// head fusion cannot average it away; the head component is drawn per head.
// Per-kind scales shape where the backbone is weak, which is what makes the
// two backbones complementary.
struct BackboneNoise {
  double shared_std = 2.0;
  double head_std = 1.0;
  double rho = 0.0;  // AR(1) temporal correlation of the shared part, in [0,1)
  double region_scale = 1.0;
  double landmark_scale = 1.0;
  double pathology_scale = 1.0;

  double kind_scale(ClassKind kind) const {
    switch (kind) {
      case ClassKind::region: return region_scale;
      case ClassKind::landmark: return landmark_scale;
      case ClassKind::pathology: return pathology_scale;
    }
    return 1.0;
  }
};

struct PathologyProfile {
  double rate_per_1000 = 0.5;  // expected events per 1000 frames
  int min_len = 40;
  int max_len = 260;
};

struct SynthConfig {
  std::uint64_t seed = 7;
  int videos = 20;
  int min_frames = 2600;
  int max_frames = 3400;

  // Region blocks come from stick-breaking: fraction r of the remaining
  // frames goes to region rank r; the last region takes the remainder.
  std::vector<double> stick_fractions;  // size R-1; empty = even split
  double stick_jitter = 0.35;           // per-video multiplicative jitter

  std::map<int, PathologyProfile> pathology_profiles;  // by class id
  int landmark_min_len = 20;
  int landmark_max_len = 60;

  double ideal_logit = 2.5;
  // backbone 0: temporally smooth errors, weak on pathologies;
  // backbone 1: near-iid errors, weak on regions
  std::vector<BackboneNoise> backbones{{2.4, 1.0, 0.90, 0.5, 0.7, 1.3},
                                       {2.4, 1.0, 0.25, 1.3, 1.0, 0.5}};
  int heads_per_backbone = 5;
  double head_scale_min = 0.3;
  double head_scale_max = 1.7;
  double head_bias_min = -0.35;
  double head_bias_max = 0.35;

  int train_videos = 12;
  int val_videos = 4;
  int test_videos = 4;

  void validate(const LabelSpace& space) const;
};

struct SplitManifest {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

struct SynthCorpus {
  LabelSpace space;
  std::vector<GroundTruth> ground_truth;
  std::vector<EventRecord> gt_events;
  std::vector<ProbStream> streams;
  SplitManifest split;
};

// Fills pathology profiles for every pathology class that has none, with
// rates decreasing by class id (imbalanced tail).
SynthConfig default_synth_config(const LabelSpace& space);

// Ground truth for all videos: contiguous region blocks in transit order
// covering every frame, one landmark segment straddling a valid boundary per
// landmark class, and per-class pathology events at the configured rates.
std::pair<std::vector<GroundTruth>, std::vector<EventRecord>> generate_ground_truth(
    const SynthConfig& cfg, const LabelSpace& space, std::size_t workers = 1);

// Noisy head probability streams (backbones x heads) for the given ground
// truth. The ideal logit L*(2y-1) is scaled per (backbone, head, class),
// corrupted with the backbone's noise family and shifted per head.
std::vector<ProbStream> generate_predictions(const std::vector<GroundTruth>& gts,
                                             const SynthConfig& cfg, const LabelSpace& space,
                                             std::size_t workers = 1);

// End-to-end corpus; every output is run through the ingestion validators.
SynthCorpus generate_corpus(const SynthConfig& cfg, const LabelSpace& space,
                            std::size_t workers = 1);

std::string serialize_split(const SplitManifest& split);
SplitManifest parse_split(const std::string& text);
void save_split(const SplitManifest& split, const std::string& path);
SplitManifest load_split(const std::string& path);

std::string serialize_synth_config(const SynthConfig& cfg);
SynthConfig parse_synth_config(const std::string& text);

}  // namespace endoev
