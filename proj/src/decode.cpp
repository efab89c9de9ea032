#include "endoev/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "endoev/parallel.hpp"
#include "endoev/util.hpp"

namespace endoev {

namespace {

constexpr double kLogClamp = 1e-12;

}  // namespace

int KindParam::for_class(const LabelSpace& space, int class_id) const {
  if (auto it = overrides.find(class_id); it != overrides.end()) return it->second;
  switch (space.kind(class_id)) {
    case ClassKind::region: return region;
    case ClassKind::landmark: return landmark;
    case ClassKind::pathology: return pathology;
  }
  return 1;
}

double DecodeConfig::threshold_for(int class_id) const {
  if (thresholds.empty()) return 0.5;
  return thresholds[static_cast<std::size_t>(class_id)];
}

void DecodeConfig::validate(const LabelSpace& space) const {
  for (int c = 0; c < space.num_classes(); ++c) {
    int window = smoothing_window.for_class(space, c);
    if (window < 1 || window % 2 == 0) {
      throw InputError("decode config: smoothing window for class " + std::to_string(c) +
                       " must be odd and >= 1, got " + std::to_string(window));
    }
    if (open_len.for_class(space, c) < 1 || close_len.for_class(space, c) < 1) {
      throw InputError("decode config: morphology lengths must be >= 1");
    }
    double theta = threshold_for(c);
    if (!(theta > 0.0 && theta < 1.0)) {
      throw InputError("decode config: threshold for class " + std::to_string(c) +
                       " must lie in (0,1)");
    }
  }
  if (!thresholds.empty() &&
      thresholds.size() != static_cast<std::size_t>(space.num_classes())) {
    throw InputError("decode config: threshold vector length mismatch");
  }
  if (min_region_run < 1) throw InputError("decode config: min_region_run must be >= 1");
}

ProbStream smooth(const ProbStream& stream, const LabelSpace& space, const DecodeConfig& cfg) {
  const std::size_t frames = stream.frame_count();
  const std::size_t classes = stream.class_count();
  ProbStream out = stream;
  std::vector<double> prefix(frames + 1, 0.0);
  for (std::size_t c = 0; c < classes; ++c) {
    int window = cfg.smoothing_window.for_class(space, static_cast<int>(c));
    if (window % 2 == 0) {
      throw InputError("smooth: window for class " + std::to_string(c) + " is even");
    }
    if (window == 1) continue;
    const int half = window / 2;
    for (std::size_t t = 0; t < frames; ++t) {
      prefix[t + 1] = prefix[t] + stream.probs.at(t, c);
    }
    for (std::size_t t = 0; t < frames; ++t) {
      std::size_t lo = t >= static_cast<std::size_t>(half) ? t - half : 0;
      std::size_t hi = std::min(frames - 1, t + static_cast<std::size_t>(half));
      out.probs.at(t, c) = (prefix[hi + 1] - prefix[lo]) / static_cast<double>(hi - lo + 1);
    }
  }
  return out;
}

namespace {

std::vector<int> viterbi_assignment(const ProbStream& stream, const LabelSpace& space) {
  const auto& order = space.region_order();
  const std::size_t num_ranks = order.size();
  const std::size_t frames = stream.frame_count();
  std::vector<double> score(num_ranks, 0.0);
  std::vector<std::vector<std::uint16_t>> parent(frames,
                                                 std::vector<std::uint16_t>(num_ranks, 0));

  auto log_prob = [&](std::size_t t, std::size_t rank) {
    double p = stream.probs.at(t, static_cast<std::size_t>(order[rank]));
    return std::log(std::max(p, kLogClamp));
  };

  for (std::size_t r = 0; r < num_ranks; ++r) score[r] = log_prob(0, r);
  for (std::size_t t = 1; t < frames; ++t) {
    // best predecessor of rank r is the best over ranks 0..r (prefix max);
    // ties keep the lower rank.
    std::vector<double> next(num_ranks);
    double best = -std::numeric_limits<double>::infinity();
    std::uint16_t best_rank = 0;
    for (std::size_t r = 0; r < num_ranks; ++r) {
      if (score[r] > best) {
        best = score[r];
        best_rank = static_cast<std::uint16_t>(r);
      }
      parent[t][r] = best_rank;
      next[r] = best + log_prob(t, r);
    }
    score = std::move(next);
  }

  std::size_t final_rank = 0;
  for (std::size_t r = 1; r < num_ranks; ++r) {
    if (score[r] > score[final_rank]) final_rank = r;
  }
  std::vector<int> assignment(frames);
  std::size_t rank = final_rank;
  for (std::size_t t = frames; t-- > 0;) {
    assignment[t] = order[rank];
    if (t > 0) rank = parent[t][rank];
  }
  return assignment;
}

std::vector<int> greedy_assignment(const ProbStream& stream, const LabelSpace& space,
                                   int min_region_run) {
  const auto& order = space.region_order();
  const std::size_t frames = stream.frame_count();
  std::vector<int> rank_seq(frames, 0);
  for (std::size_t t = 0; t < frames; ++t) {
    std::size_t best = 0;
    double best_p = stream.probs.at(t, static_cast<std::size_t>(order[0]));
    for (std::size_t r = 1; r < order.size(); ++r) {
      double p = stream.probs.at(t, static_cast<std::size_t>(order[r]));
      if (p > best_p) {
        best_p = p;
        best = r;
      }
    }
    rank_seq[t] = static_cast<int>(best);
  }

  // Suppress short backward runs: a maximal run of frames whose rank sits
  // below the running maximum is reassigned when shorter than min_region_run.
  int running_max = rank_seq.empty() ? 0 : rank_seq[0];
  std::size_t t = 0;
  while (t < frames) {
    if (rank_seq[t] >= running_max) {
      running_max = rank_seq[t];
      ++t;
      continue;
    }
    std::size_t run_start = t;
    while (t < frames && rank_seq[t] < running_max) ++t;
    if (t - run_start < static_cast<std::size_t>(min_region_run)) {
      for (std::size_t u = run_start; u < t; ++u) {
        // admissible = ranks >= running max; take the most probable one
        std::size_t best = static_cast<std::size_t>(running_max);
        double best_p =
            stream.probs.at(u, static_cast<std::size_t>(order[static_cast<std::size_t>(running_max)]));
        for (std::size_t r = static_cast<std::size_t>(running_max) + 1; r < order.size(); ++r) {
          double p = stream.probs.at(u, static_cast<std::size_t>(order[r]));
          if (p > best_p) {
            best_p = p;
            best = r;
          }
        }
        rank_seq[u] = static_cast<int>(best);
      }
    }
    // A surviving long run lowers nothing: the running max only grows.
  }

  std::vector<int> assignment(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    assignment[i] = order[static_cast<std::size_t>(rank_seq[i])];
  }
  return assignment;
}

}  // namespace

std::pair<ProbStream, RegionAssignment> enforce_region_constraints(const ProbStream& stream,
                                                                   const LabelSpace& space,
                                                                   const DecodeConfig& cfg) {
  if (space.num_regions() == 0) {
    throw InputError("enforce_region_constraints: taxonomy has no regions");
  }
  RegionAssignment assignment;
  assignment.region_by_frame = cfg.monotonic_mode == MonotonicMode::viterbi
                                   ? viterbi_assignment(stream, space)
                                   : greedy_assignment(stream, space, cfg.min_region_run);

  ProbStream masked = stream;
  for (std::size_t t = 0; t < stream.frame_count(); ++t) {
    for (int region_id : space.region_order()) {
      if (region_id != assignment.region_by_frame[t]) {
        masked.probs.at(t, static_cast<std::size_t>(region_id)) = 0.0;
      }
    }
  }
  return {std::move(masked), std::move(assignment)};
}

ProbStream gate_landmarks(const ProbStream& stream, const RegionAssignment& assignment,
                          const LabelSpace& space) {
  const std::size_t frames = stream.frame_count();
  if (assignment.region_by_frame.size() != frames) {
    throw InputError("gate_landmarks: assignment does not cover all frames");
  }
  ProbStream out = stream;
  for (const auto& [landmark_id, rule] : space.landmark_rules()) {
    // valid[t] = 1 when frame t sits in one of the landmark's regions
    std::vector<int> valid_prefix(frames + 1, 0);
    for (std::size_t t = 0; t < frames; ++t) {
      bool valid = rule.valid_regions.count(assignment.region_by_frame[t]) > 0;
      valid_prefix[t + 1] = valid_prefix[t] + (valid ? 1 : 0);
    }
    const long long tol = rule.tolerance_frames;
    for (std::size_t t = 0; t < frames; ++t) {
      long long lo = std::max<long long>(0, static_cast<long long>(t) - tol);
      long long hi = std::min<long long>(static_cast<long long>(frames) - 1,
                                         static_cast<long long>(t) + tol);
      bool near_valid = valid_prefix[hi + 1] - valid_prefix[lo] > 0;
      if (!near_valid) {
        out.probs.at(t, static_cast<std::size_t>(landmark_id)) = 0.0;
      }
    }
  }
  return out;
}

void morph_open(std::vector<std::uint8_t>& row, int open_len) {
  if (open_len <= 1) return;
  std::size_t t = 0;
  while (t < row.size()) {
    if (!row[t]) {
      ++t;
      continue;
    }
    std::size_t start = t;
    while (t < row.size() && row[t]) ++t;
    if (t - start < static_cast<std::size_t>(open_len)) {
      std::fill(row.begin() + start, row.begin() + t, std::uint8_t{0});
    }
  }
}

void morph_close(std::vector<std::uint8_t>& row, int close_len) {
  if (close_len <= 1) return;
  // only gaps strictly between positive runs are filled
  std::size_t first = 0;
  while (first < row.size() && !row[first]) ++first;
  if (first == row.size()) return;
  std::size_t last = row.size() - 1;
  while (!row[last]) --last;
  std::size_t t = first;
  while (t < last) {
    if (row[t]) {
      ++t;
      continue;
    }
    std::size_t start = t;
    while (t <= last && !row[t]) ++t;
    if (t - start < static_cast<std::size_t>(close_len)) {
      std::fill(row.begin() + start, row.begin() + t, std::uint8_t{1});
    }
  }
}

BinaryTimeline binarize_and_refine(const ProbStream& stream, const LabelSpace& space,
                                   const DecodeConfig& cfg) {
  const std::size_t frames = stream.frame_count();
  const std::size_t classes = stream.class_count();
  BinaryTimeline timeline(frames, classes);
  std::vector<std::uint8_t> row(frames);
  for (std::size_t c = 0; c < classes; ++c) {
    double theta = cfg.threshold_for(static_cast<int>(c));
    for (std::size_t t = 0; t < frames; ++t) {
      row[t] = stream.probs.at(t, c) >= theta ? 1 : 0;
    }
    if (cfg.morphology_enabled) {
      morph_open(row, cfg.open_len.for_class(space, static_cast<int>(c)));
      morph_close(row, cfg.close_len.for_class(space, static_cast<int>(c)));
    }
    for (std::size_t t = 0; t < frames; ++t) {
      timeline.at(t, c) = row[t];
    }
  }
  return timeline;
}

BinaryTimeline ensure_region_coverage(const BinaryTimeline& timeline,
                                      const RegionAssignment& assignment,
                                      const LabelSpace& space) {
  BinaryTimeline out = timeline;
  const std::size_t frames = timeline.rows();
  if (assignment.region_by_frame.size() != frames) {
    throw InputError("ensure_region_coverage: assignment does not cover all frames");
  }
  for (std::size_t t = 0; t < frames; ++t) {
    int assigned = assignment.region_by_frame[t];
    for (int region_id : space.region_order()) {
      out.at(t, static_cast<std::size_t>(region_id)) = (region_id == assigned) ? 1 : 0;
    }
  }
  return out;
}

namespace {

double mean_prob(const ProbStream& smoothed, std::size_t c, std::size_t start, std::size_t end) {
  double sum = 0.0;
  for (std::size_t t = start; t < end; ++t) sum += smoothed.probs.at(t, c);
  return sum / static_cast<double>(end - start);
}

}  // namespace

std::vector<EventRecord> events_per_label(const BinaryTimeline& timeline,
                                          const ProbStream& smoothed) {
  std::vector<EventRecord> events;
  for (std::size_t c = 0; c < timeline.cols(); ++c) {
    std::size_t t = 0;
    while (t < timeline.rows()) {
      if (!timeline.at(t, c)) {
        ++t;
        continue;
      }
      std::size_t start = t;
      while (t < timeline.rows() && timeline.at(t, c)) ++t;
      events.push_back({smoothed.video_id, static_cast<int>(c), static_cast<long long>(start),
                        static_cast<long long>(t), mean_prob(smoothed, c, start, t)});
    }
  }
  sort_events(events);
  return events;
}

std::vector<EventRecord> events_tuple_based(const BinaryTimeline& timeline,
                                            const ProbStream& smoothed) {
  std::vector<EventRecord> events;
  const std::size_t frames = timeline.rows();
  const std::size_t classes = timeline.cols();
  if (frames == 0) return events;

  auto same_label_set = [&](std::size_t a, std::size_t b) {
    for (std::size_t c = 0; c < classes; ++c) {
      if (timeline.at(a, c) != timeline.at(b, c)) return false;
    }
    return true;
  };

  std::size_t seg_start = 0;
  for (std::size_t t = 1; t <= frames; ++t) {
    if (t < frames && same_label_set(t, seg_start)) continue;
    for (std::size_t c = 0; c < classes; ++c) {
      if (timeline.at(seg_start, c)) {
        events.push_back({smoothed.video_id, static_cast<int>(c),
                          static_cast<long long>(seg_start), static_cast<long long>(t),
                          mean_prob(smoothed, c, seg_start, t)});
      }
    }
    seg_start = t;
  }
  sort_events(events);
  return events;
}

DecodeResult decode_events(const ProbStream& stream, const LabelSpace& space,
                           const DecodeConfig& cfg) {
  cfg.validate(space);
  if (stream.class_count() != static_cast<std::size_t>(space.num_classes())) {
    throw InputError("decode_events: stream class count does not match taxonomy");
  }
  DecodeResult result;
  ProbStream smoothed = cfg.smoothing_enabled ? smooth(stream, space, cfg) : stream;

  ProbStream constrained = smoothed;
  if (cfg.constraints_enabled) {
    auto [masked, assignment] = enforce_region_constraints(smoothed, space, cfg);
    constrained = gate_landmarks(masked, assignment, space);
    result.assignment = std::move(assignment);
  }

  BinaryTimeline timeline = binarize_and_refine(constrained, space, cfg);
  if (cfg.constraints_enabled) {
    timeline = ensure_region_coverage(timeline, result.assignment, space);
  }

  result.events = cfg.event_mode == EventMode::per_label
                      ? events_per_label(timeline, smoothed)
                      : events_tuple_based(timeline, smoothed);
  result.timeline = std::move(timeline);
  return result;
}

std::vector<EventRecord> decode_all(const std::vector<ProbStream>& streams,
                                    const LabelSpace& space, const DecodeConfig& cfg,
                                    std::size_t workers) {
  std::vector<std::vector<EventRecord>> per_video(streams.size());
  parallel_for(streams.size(), workers, [&](std::size_t i) {
    per_video[i] = decode_events(streams[i], space, cfg).events;
  });
  std::vector<EventRecord> events;
  for (auto& chunk : per_video) {
    events.insert(events.end(), chunk.begin(), chunk.end());
  }
  return events;
}

}  // namespace endoev
