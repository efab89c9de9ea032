#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "endoev/streams.hpp"
#include "endoev/taxonomy.hpp"

namespace endoev {

struct APResult {
  std::map<int, double> per_class_ap;  // classes with >=1 positive only
  std::optional<double> map;           // absent when no class has positives
};

// Average precision over a ranked list. Scores are ranked descending with
// ties kept in input order; AP is the recall-weighted mean of the precision
// attained at each positive (no envelope interpolation, so the worst ranking
// of P positives against N negatives scores mean_k k/(N+k)). Returns absent
// when there are no positive labels.
std::optional<double> frame_ap(const std::vector<double>& scores,
                               const std::vector<int>& labels);

// Per-class frame AP over the concatenated frames of all given videos; one
// stream per video, aligned with its ground truth by video_id. The mean runs
// over classes with at least one positive frame.
APResult frame_map(const std::vector<ProbStream>& streams,
                   const std::vector<GroundTruth>& gts, const LabelSpace& space);

struct Interval {
  long long start = 0;
  long long end = 0;  // half-open
};

double temporal_iou(const Interval& a, const Interval& b);

// Event-level AP at one IoU threshold for a single class (possibly spanning
// several videos; matching never crosses videos). Predictions rank by score
// descending, ties by earlier start then video id. Each prediction greedily
// takes the unmatched ground-truth event of its video with the highest IoU if
// that IoU >= iou_thr. Recall denominator is |gts|. Returns absent when gts
// is empty.
std::optional<double> temporal_ap(const std::vector<EventRecord>& preds,
                                  const std::vector<EventRecord>& gts, double iou_thr);

struct TemporalMapResult {
  std::map<std::string, APResult> per_video;
  std::optional<double> overall;              // unweighted mean of per-video mAPs
  std::vector<std::string> skipped_videos;    // videos with predictions but no GT events
};

// Per video: mean AP over the classes that have at least one GT event in that
// video; overall: unweighted mean across videos. Videos without any GT events
// are excluded and reported in skipped_videos.
TemporalMapResult temporal_map(const std::vector<EventRecord>& preds,
                               const std::vector<EventRecord>& gts, const LabelSpace& space,
                               double iou_thr);

// Unweighted mean of per-video scores; the aggregation used for the overall
// row of evaluation reports.
double aggregate_overall(const std::vector<double>& per_video_scores);

// TP count of the greedy matcher after all predictions are processed (the
// full-recall point of the AP computation above).
int greedy_match_count(const std::vector<EventRecord>& preds,
                       const std::vector<EventRecord>& gts, double iou_thr);

// Maximum-cardinality prediction/GT matching at the given IoU threshold,
// found by exhaustive assignment enumeration (memoized over GT subsets).
// Testing oracle for the greedy matcher; limited to small instances.
int oracle_match(const std::vector<EventRecord>& preds, const std::vector<EventRecord>& gts,
                 double iou_thr, int max_side = 8);

}  // namespace endoev
