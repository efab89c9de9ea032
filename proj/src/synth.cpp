#include "endoev/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include <json.hpp>

#include "endoev/parallel.hpp"
#include "endoev/util.hpp"

namespace endoev {

void SynthConfig::validate(const LabelSpace& space) const {
  if (videos < 1) throw InputError("synth config: need at least one video");
  if (min_frames < space.num_regions() || max_frames < min_frames) {
    throw InputError("synth config: frame-length range too small for region count");
  }
  if (!stick_fractions.empty() &&
      static_cast<int>(stick_fractions.size()) != space.num_regions() - 1) {
    throw InputError("synth config: stick_fractions must have R-1 entries");
  }
  for (double f : stick_fractions) {
    if (!(f > 0.0 && f < 1.0)) throw InputError("synth config: stick fraction outside (0,1)");
  }
  bool any_rate = false;
  for (const auto& [class_id, profile] : pathology_profiles) {
    if (space.kind(class_id) != ClassKind::pathology) {
      throw InputError("synth config: pathology profile for non-pathology class " +
                       std::to_string(class_id));
    }
    if (profile.rate_per_1000 < 0.0 || profile.min_len < 1 ||
        profile.max_len < profile.min_len) {
      throw InputError("synth config: bad pathology profile for class " +
                       std::to_string(class_id));
    }
    if (profile.rate_per_1000 > 0.0) any_rate = true;
  }
  if (!pathology_profiles.empty() && !any_rate) {
    throw InputError("synth config: at least one pathology rate must be positive");
  }
  if (landmark_min_len < 1 || landmark_max_len < landmark_min_len) {
    throw InputError("synth config: bad landmark duration range");
  }
  if (backbones.empty()) throw InputError("synth config: need at least one backbone");
  for (const BackboneNoise& noise : backbones) {
    if (noise.shared_std < 0.0 || noise.head_std < 0.0 || noise.rho < 0.0 || noise.rho >= 1.0 ||
        noise.region_scale < 0.0 || noise.landmark_scale < 0.0 || noise.pathology_scale < 0.0) {
      throw InputError("synth config: bad backbone noise (stds >= 0, rho in [0,1))");
    }
  }
  if (heads_per_backbone < 1) throw InputError("synth config: heads_per_backbone must be >= 1");
  if (head_scale_min <= 0.0 || head_scale_max < head_scale_min) {
    throw InputError("synth config: bad head scale range");
  }
  if (head_bias_max < head_bias_min) throw InputError("synth config: bad head bias range");
  if (train_videos + val_videos + test_videos != videos) {
    throw InputError("synth config: split sizes must sum to the video count");
  }
}

SynthConfig default_synth_config(const LabelSpace& space) {
  SynthConfig cfg;
  if (space.num_regions() == 5) {
    // short mouth/esophagus, long small intestine
    cfg.stick_fractions = {0.02, 0.051, 0.215, 0.616};
  }
  double rate = 0.9;
  for (const ClassInfo& info : space.classes()) {
    if (info.kind != ClassKind::pathology) continue;
    if (!cfg.pathology_profiles.count(info.id)) {
      cfg.pathology_profiles[info.id] = {rate, 40, 260};
      rate = std::max(0.2, rate - 0.22);
    }
  }
  return cfg;
}

namespace {

std::string video_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "v%03d", index);
  return std::string(buf);
}

// One video's ground truth. All draws come from a per-video engine in a fixed
// order: frame count, stick fractions, landmarks (by class id), pathology
// events (by class id).
GroundTruth generate_video_gt(const SynthConfig& cfg, const LabelSpace& space, int video_index) {
  std::mt19937_64 rng(mix_seed(cfg.seed, 1, static_cast<std::uint64_t>(video_index)));
  const int num_regions = space.num_regions();
  const int num_classes = space.num_classes();

  std::uniform_int_distribution<int> frames_dist(cfg.min_frames, cfg.max_frames);
  const int frames = frames_dist(rng);
  if (frames < num_regions) {
    throw InputError("synth: video too short for region count");
  }

  // region lengths via jittered stick-breaking
  std::vector<double> fractions = cfg.stick_fractions;
  if (fractions.empty()) {
    fractions.assign(static_cast<std::size_t>(num_regions - 1), 0.0);
    for (int r = 0; r + 1 < num_regions; ++r) {
      fractions[static_cast<std::size_t>(r)] = 1.0 / static_cast<double>(num_regions - r);
    }
  }
  std::uniform_real_distribution<double> jitter(1.0 - cfg.stick_jitter, 1.0 + cfg.stick_jitter);
  std::vector<double> weights(static_cast<std::size_t>(num_regions), 0.0);
  double remaining = 1.0;
  for (int r = 0; r + 1 < num_regions; ++r) {
    double v = std::clamp(fractions[static_cast<std::size_t>(r)] * jitter(rng), 0.004, 0.95);
    weights[static_cast<std::size_t>(r)] = remaining * v;
    remaining *= 1.0 - v;
  }
  weights[static_cast<std::size_t>(num_regions - 1)] = remaining;

  std::vector<int> lengths(static_cast<std::size_t>(num_regions), 0);
  int assigned = 0;
  std::size_t largest = 0;
  for (int r = 0; r < num_regions; ++r) {
    int len = std::max(1, static_cast<int>(std::lround(weights[static_cast<std::size_t>(r)] *
                                                       static_cast<double>(frames))));
    lengths[static_cast<std::size_t>(r)] = len;
    assigned += len;
    if (weights[static_cast<std::size_t>(r)] > weights[largest]) largest = static_cast<std::size_t>(r);
  }
  lengths[largest] += frames - assigned;  // absorb rounding drift
  if (lengths[largest] < 1) throw InputError("synth: video too short for region count");

  GroundTruth gt;
  gt.video_id = video_name(video_index);
  gt.labels = LabelMatrix(static_cast<std::size_t>(frames), static_cast<std::size_t>(num_classes));

  std::vector<int> block_start(static_cast<std::size_t>(num_regions), 0);
  int cursor = 0;
  for (int r = 0; r < num_regions; ++r) {
    block_start[static_cast<std::size_t>(r)] = cursor;
    int region_id = space.region_order()[static_cast<std::size_t>(r)];
    for (int t = cursor; t < cursor + lengths[static_cast<std::size_t>(r)]; ++t) {
      gt.labels.at(static_cast<std::size_t>(t), static_cast<std::size_t>(region_id)) = 1;
    }
    cursor += lengths[static_cast<std::size_t>(r)];
  }

  // landmarks: one short segment straddling a boundary adjacent to the
  // landmark's valid regions (boundaries with both sides valid preferred)
  for (const auto& [landmark_id, rule] : space.landmark_rules()) {
    int chosen = -1;
    for (int pass = 0; pass < 2 && chosen < 0; ++pass) {
      for (int b = 1; b < num_regions; ++b) {
        int before = space.region_order()[static_cast<std::size_t>(b - 1)];
        int after = space.region_order()[static_cast<std::size_t>(b)];
        bool before_ok = rule.valid_regions.count(before) > 0;
        bool after_ok = rule.valid_regions.count(after) > 0;
        bool ok = pass == 0 ? (before_ok && after_ok) : (before_ok || after_ok);
        if (ok) {
          chosen = b;
          break;
        }
      }
    }
    if (chosen < 0) continue;
    std::uniform_int_distribution<int> len_dist(cfg.landmark_min_len, cfg.landmark_max_len);
    int len = std::min(len_dist(rng), frames);
    int boundary = block_start[static_cast<std::size_t>(chosen)];
    std::uniform_int_distribution<int> offset_dist(-len / 3, len / 3);
    int start = boundary - len / 2 + offset_dist(rng);
    start = std::clamp(start, 0, frames - len);
    for (int t = start; t < start + len; ++t) {
      gt.labels.at(static_cast<std::size_t>(t), static_cast<std::size_t>(landmark_id)) = 1;
    }
  }

  // pathologies: Poisson counts at the configured rate, disjoint per class
  for (const auto& [class_id, profile] : cfg.pathology_profiles) {
    if (profile.rate_per_1000 <= 0.0) continue;
    double lambda = profile.rate_per_1000 * static_cast<double>(frames) / 1000.0;
    std::poisson_distribution<int> count_dist(lambda);
    int count = count_dist(rng);
    std::vector<std::pair<int, int>> placed;
    for (int e = 0; e < count; ++e) {
      std::uniform_int_distribution<int> len_dist(profile.min_len,
                                                  std::min(profile.max_len, frames));
      for (int attempt = 0; attempt < 30; ++attempt) {
        int len = len_dist(rng);
        if (len > frames) len = frames;
        std::uniform_int_distribution<int> start_dist(0, frames - len);
        int start = start_dist(rng);
        bool overlaps = false;
        for (const auto& [s, t] : placed) {
          if (start < t && s < start + len) {
            overlaps = true;
            break;
          }
        }
        if (!overlaps) {
          placed.emplace_back(start, start + len);
          break;
        }
      }
    }
    for (const auto& [s, t] : placed) {
      for (int u = s; u < t; ++u) {
        gt.labels.at(static_cast<std::size_t>(u), static_cast<std::size_t>(class_id)) = 1;
      }
    }
  }
  return gt;
}

// Stationary AR(1) (or iid when rho == 0) noise sequence with std sigma.
void fill_noise(std::mt19937_64& rng, double sigma, double rho, std::vector<double>& out) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  if (sigma <= 0.0) {
    std::fill(out.begin(), out.end(), 0.0);
    return;
  }
  if (rho <= 0.0) {
    for (double& v : out) v = sigma * gauss(rng);
    return;
  }
  const double innovation = sigma * std::sqrt(std::max(0.0, 1.0 - rho * rho));
  double state = sigma * gauss(rng);
  for (double& v : out) {
    v = state;
    state = rho * state + innovation * gauss(rng);
  }
}

// One head stream. The shared backbone error is regenerated from its own
// (video, backbone) seed so heads agree on it without cross-thread state;
// the head error and the per-(backbone, head, class) scale/bias come from
// head-keyed engines. Per engine, classes are drawn in id order.
ProbStream generate_head_stream(const GroundTruth& gt, const SynthConfig& cfg,
                                const LabelSpace& space, int video_index, int backbone_id,
                                int model_id) {
  const std::size_t frames = gt.frame_count();
  const int num_classes = space.num_classes();
  const BackboneNoise& noise_cfg = cfg.backbones[static_cast<std::size_t>(backbone_id)];

  std::mt19937_64 head_rng(
      mix_seed(cfg.seed, 2, static_cast<std::uint64_t>(backbone_id),
               static_cast<std::uint64_t>(model_id)));
  std::uniform_real_distribution<double> scale_dist(cfg.head_scale_min, cfg.head_scale_max);
  std::uniform_real_distribution<double> bias_dist(cfg.head_bias_min, cfg.head_bias_max);
  std::vector<double> scales(static_cast<std::size_t>(num_classes));
  std::vector<double> biases(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    scales[static_cast<std::size_t>(c)] = scale_dist(head_rng);
    biases[static_cast<std::size_t>(c)] = bias_dist(head_rng);
  }

  std::mt19937_64 shared_rng(mix_seed(cfg.seed, 3 + static_cast<std::uint64_t>(video_index),
                                      static_cast<std::uint64_t>(backbone_id), 1000));
  std::mt19937_64 rng(mix_seed(cfg.seed, 3 + static_cast<std::uint64_t>(video_index),
                               static_cast<std::uint64_t>(backbone_id),
                               static_cast<std::uint64_t>(model_id)));

  ProbStream stream;
  stream.video_id = gt.video_id;
  stream.source = {backbone_id, model_id, false};
  stream.probs = ProbMatrix(frames, static_cast<std::size_t>(num_classes));

  std::vector<double> shared(frames);
  std::vector<double> own(frames);
  for (int c = 0; c < num_classes; ++c) {
    const double kind_scale = noise_cfg.kind_scale(space.kind(c));
    fill_noise(shared_rng, noise_cfg.shared_std * kind_scale, noise_cfg.rho, shared);
    fill_noise(rng, noise_cfg.head_std * kind_scale, 0.0, own);
    const double scale = scales[static_cast<std::size_t>(c)];
    const double bias = biases[static_cast<std::size_t>(c)];
    for (std::size_t t = 0; t < frames; ++t) {
      double y = gt.labels.at(t, static_cast<std::size_t>(c)) ? 1.0 : -1.0;
      double z = scale * cfg.ideal_logit * y + shared[t] + own[t] + bias;
      stream.probs.at(t, static_cast<std::size_t>(c)) = 1.0 / (1.0 + std::exp(-z));
    }
  }
  return stream;
}

}  // namespace

std::pair<std::vector<GroundTruth>, std::vector<EventRecord>> generate_ground_truth(
    const SynthConfig& cfg, const LabelSpace& space, std::size_t workers) {
  cfg.validate(space);
  std::vector<GroundTruth> gts(static_cast<std::size_t>(cfg.videos));
  parallel_for(static_cast<std::size_t>(cfg.videos), workers, [&](std::size_t i) {
    gts[i] = generate_video_gt(cfg, space, static_cast<int>(i));
  });
  std::vector<EventRecord> events;
  for (const GroundTruth& gt : gts) {
    auto video_events = ground_truth_to_events(gt);
    events.insert(events.end(), video_events.begin(), video_events.end());
  }
  return {std::move(gts), std::move(events)};
}

std::vector<ProbStream> generate_predictions(const std::vector<GroundTruth>& gts,
                                             const SynthConfig& cfg, const LabelSpace& space,
                                             std::size_t workers) {
  const int num_backbones = static_cast<int>(cfg.backbones.size());
  const int num_heads = cfg.heads_per_backbone;
  const std::size_t streams_per_video = static_cast<std::size_t>(num_backbones * num_heads);
  std::vector<ProbStream> streams(gts.size() * streams_per_video);
  parallel_for(streams.size(), workers, [&](std::size_t i) {
    std::size_t video_index = i / streams_per_video;
    std::size_t within = i % streams_per_video;
    int backbone_id = static_cast<int>(within) / num_heads;
    int model_id = static_cast<int>(within) % num_heads;
    streams[i] = generate_head_stream(gts[video_index], cfg, space,
                                      static_cast<int>(video_index), backbone_id, model_id);
  });
  return streams;
}

SynthCorpus generate_corpus(const SynthConfig& cfg, const LabelSpace& space,
                            std::size_t workers) {
  SynthCorpus corpus;
  corpus.space = space;
  auto [gts, events] = generate_ground_truth(cfg, space, workers);
  corpus.ground_truth = std::move(gts);
  corpus.gt_events = std::move(events);
  corpus.streams = generate_predictions(corpus.ground_truth, cfg, space, workers);

  for (int i = 0; i < cfg.videos; ++i) {
    std::string name = video_name(i);
    if (i < cfg.train_videos) corpus.split.train.push_back(name);
    else if (i < cfg.train_videos + cfg.val_videos) corpus.split.val.push_back(name);
    else corpus.split.test.push_back(name);
  }

  // same validators as external data
  for (const GroundTruth& gt : corpus.ground_truth) validate_ground_truth(gt, space);
  for (const ProbStream& stream : corpus.streams) validate_stream(stream);
  validate_events(corpus.gt_events);
  return corpus;
}

std::string serialize_split(const SplitManifest& split) {
  nlohmann::ordered_json j;
  j["train"] = split.train;
  j["val"] = split.val;
  j["test"] = split.test;
  return j.dump(2) + "\n";
}

SplitManifest parse_split(const std::string& text) {
  SplitManifest split;
  try {
    nlohmann::json j = nlohmann::json::parse(text);
    split.train = j.at("train").get<std::vector<std::string>>();
    split.val = j.at("val").get<std::vector<std::string>>();
    split.test = j.at("test").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("split manifest: ") + e.what());
  }
  return split;
}

void save_split(const SplitManifest& split, const std::string& path) {
  write_text_file(path, serialize_split(split));
}

SplitManifest load_split(const std::string& path) {
  return parse_split(read_text_file(path));
}

std::string serialize_synth_config(const SynthConfig& cfg) {
  nlohmann::ordered_json j;
  j["seed"] = cfg.seed;
  j["videos"] = cfg.videos;
  j["min_frames"] = cfg.min_frames;
  j["max_frames"] = cfg.max_frames;
  j["stick_fractions"] = cfg.stick_fractions;
  j["stick_jitter"] = cfg.stick_jitter;
  nlohmann::ordered_json profiles(nlohmann::json::value_t::object);
  for (const auto& [class_id, profile] : cfg.pathology_profiles) {
    nlohmann::ordered_json p;
    p["rate_per_1000"] = profile.rate_per_1000;
    p["min_len"] = profile.min_len;
    p["max_len"] = profile.max_len;
    profiles[std::to_string(class_id)] = std::move(p);
  }
  j["pathology_profiles"] = std::move(profiles);
  j["landmark_min_len"] = cfg.landmark_min_len;
  j["landmark_max_len"] = cfg.landmark_max_len;
  j["ideal_logit"] = cfg.ideal_logit;
  nlohmann::ordered_json backbones(nlohmann::json::value_t::array);
  for (const BackboneNoise& noise : cfg.backbones) {
    nlohmann::ordered_json b;
    b["shared_std"] = noise.shared_std;
    b["head_std"] = noise.head_std;
    b["rho"] = noise.rho;
    b["region_scale"] = noise.region_scale;
    b["landmark_scale"] = noise.landmark_scale;
    b["pathology_scale"] = noise.pathology_scale;
    backbones.push_back(std::move(b));
  }
  j["backbones"] = std::move(backbones);
  j["heads_per_backbone"] = cfg.heads_per_backbone;
  j["head_scale_min"] = cfg.head_scale_min;
  j["head_scale_max"] = cfg.head_scale_max;
  j["head_bias_min"] = cfg.head_bias_min;
  j["head_bias_max"] = cfg.head_bias_max;
  j["train_videos"] = cfg.train_videos;
  j["val_videos"] = cfg.val_videos;
  j["test_videos"] = cfg.test_videos;
  return j.dump(2) + "\n";
}

SynthConfig parse_synth_config(const std::string& text) {
  SynthConfig cfg;
  try {
    nlohmann::json j = nlohmann::json::parse(text);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.videos = j.value("videos", cfg.videos);
    cfg.min_frames = j.value("min_frames", cfg.min_frames);
    cfg.max_frames = j.value("max_frames", cfg.max_frames);
    if (j.contains("stick_fractions")) {
      cfg.stick_fractions = j.at("stick_fractions").get<std::vector<double>>();
    }
    cfg.stick_jitter = j.value("stick_jitter", cfg.stick_jitter);
    if (j.contains("pathology_profiles")) {
      cfg.pathology_profiles.clear();
      for (const auto& [key, p] : j.at("pathology_profiles").items()) {
        PathologyProfile profile;
        profile.rate_per_1000 = p.value("rate_per_1000", profile.rate_per_1000);
        profile.min_len = p.value("min_len", profile.min_len);
        profile.max_len = p.value("max_len", profile.max_len);
        cfg.pathology_profiles[std::stoi(key)] = profile;
      }
    }
    cfg.landmark_min_len = j.value("landmark_min_len", cfg.landmark_min_len);
    cfg.landmark_max_len = j.value("landmark_max_len", cfg.landmark_max_len);
    cfg.ideal_logit = j.value("ideal_logit", cfg.ideal_logit);
    if (j.contains("backbones")) {
      std::vector<BackboneNoise> parsed;
      for (const auto& b : j.at("backbones")) {
        BackboneNoise noise = parsed.size() < cfg.backbones.size()
                                  ? cfg.backbones[parsed.size()]
                                  : BackboneNoise{};
        noise.shared_std = b.value("shared_std", noise.shared_std);
        noise.head_std = b.value("head_std", noise.head_std);
        noise.rho = b.value("rho", noise.rho);
        noise.region_scale = b.value("region_scale", noise.region_scale);
        noise.landmark_scale = b.value("landmark_scale", noise.landmark_scale);
        noise.pathology_scale = b.value("pathology_scale", noise.pathology_scale);
        parsed.push_back(noise);
      }
      cfg.backbones = std::move(parsed);
    }
    cfg.heads_per_backbone = j.value("heads_per_backbone", cfg.heads_per_backbone);
    cfg.head_scale_min = j.value("head_scale_min", cfg.head_scale_min);
    cfg.head_scale_max = j.value("head_scale_max", cfg.head_scale_max);
    cfg.head_bias_min = j.value("head_bias_min", cfg.head_bias_min);
    cfg.head_bias_max = j.value("head_bias_max", cfg.head_bias_max);
    cfg.train_videos = j.value("train_videos", cfg.train_videos);
    cfg.val_videos = j.value("val_videos", cfg.val_videos);
    cfg.test_videos = j.value("test_videos", cfg.test_videos);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("synth config: ") + e.what());
  }
  return cfg;
}

}  // namespace endoev
