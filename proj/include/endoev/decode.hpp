#pragma once

#include <map>
#include <string>
#include <vector>

#include "endoev/streams.hpp"
#include "endoev/taxonomy.hpp"

namespace endoev {

enum class MonotonicMode { viterbi, greedy };
enum class EventMode { per_label, tuple_based };

// Per-kind value with optional per-class overrides.
struct KindParam {
  int region = 1;
  int landmark = 1;
  int pathology = 1;
  std::map<int, int> overrides;

  int for_class(const LabelSpace& space, int class_id) const;
};

struct DecodeConfig {
  KindParam smoothing_window;   // odd, >= 1
  KindParam open_len;           // >= 1
  KindParam close_len;          // >= 1
  std::vector<double> thresholds;  // per class, in (0,1); empty = all 0.5
  int min_region_run = 25;         // greedy mode only
  MonotonicMode monotonic_mode = MonotonicMode::viterbi;
  EventMode event_mode = EventMode::per_label;

  // Ablation switches; the full pipeline runs with everything enabled.
  bool smoothing_enabled = true;
  bool constraints_enabled = true;  // region exclusivity + transit order + landmark gating + coverage
  bool morphology_enabled = true;

  double threshold_for(int class_id) const;
  void validate(const LabelSpace& space) const;
};

using BinaryTimeline = Grid<std::uint8_t>;  // T x C

// Centered moving average per class; windows clip at the sequence edges (the
// mean runs over the in-range frames only, no padding).
ProbStream smooth(const ProbStream& stream, const LabelSpace& space, const DecodeConfig& cfg);

struct RegionAssignment {
  std::vector<int> region_by_frame;  // region class id per frame
};

// Region exclusivity plus monotonic transit order. viterbi mode picks the
// rank-non-decreasing region sequence maximizing the summed log probability
// (ties prefer the lower rank); greedy mode takes the per-frame argmax and
// repairs short backward runs. All non-chosen region probabilities are zeroed.
std::pair<ProbStream, RegionAssignment> enforce_region_constraints(const ProbStream& stream,
                                                                   const LabelSpace& space,
                                                                   const DecodeConfig& cfg);

// Zeroes landmark probabilities at frames farther than the landmark's
// tolerance from any frame assigned to one of its valid regions. Landmarks
// without a rule pass through unchanged.
ProbStream gate_landmarks(const ProbStream& stream, const RegionAssignment& assignment,
                          const LabelSpace& space);

// Per-class thresholding followed by 1-D morphological opening (drop positive
// runs shorter than open_len) and closing (fill zero gaps shorter than
// close_len between positive runs).
BinaryTimeline binarize_and_refine(const ProbStream& stream, const LabelSpace& space,
                                   const DecodeConfig& cfg);

// Morphology helpers on one binary row.
void morph_open(std::vector<std::uint8_t>& row, int open_len);
void morph_close(std::vector<std::uint8_t>& row, int close_len);

// Forces exactly one positive region per frame: the assigned region, both
// when morphology dropped every region and when it left more than one on.
BinaryTimeline ensure_region_coverage(const BinaryTimeline& timeline,
                                      const RegionAssignment& assignment,
                                      const LabelSpace& space);

// One event per maximal positive run per class; score is the mean smoothed
// probability over the event's frames.
std::vector<EventRecord> events_per_label(const BinaryTimeline& timeline,
                                          const ProbStream& smoothed);

// Ablation variant: the video is cut wherever the set of active labels
// changes and every active label emits one event per segment.
std::vector<EventRecord> events_tuple_based(const BinaryTimeline& timeline,
                                            const ProbStream& smoothed);

struct DecodeResult {
  std::vector<EventRecord> events;
  RegionAssignment assignment;  // empty when constraints are disabled
  BinaryTimeline timeline;
};

// Full decoding pipeline: smooth -> region constraints -> landmark gating ->
// threshold + morphology -> region coverage -> event extraction.
DecodeResult decode_events(const ProbStream& stream, const LabelSpace& space,
                           const DecodeConfig& cfg);

// Decodes every stream (one per video) and concatenates the events in the
// input's video order; per-video work may run on several workers.
std::vector<EventRecord> decode_all(const std::vector<ProbStream>& streams,
                                    const LabelSpace& space, const DecodeConfig& cfg,
                                    std::size_t workers = 1);

}  // namespace endoev
