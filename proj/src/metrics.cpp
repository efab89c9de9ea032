#include "endoev/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "endoev/util.hpp"

namespace endoev {

std::optional<double> frame_ap(const std::vector<double>& scores,
                               const std::vector<int>& labels) {
  if (scores.size() != labels.size()) {
    throw InputError("frame_ap: scores and labels differ in length");
  }
  std::size_t positives = 0;
  for (int y : labels) positives += (y != 0);
  if (positives == 0) return std::nullopt;

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double ap = 0.0;
  std::size_t tp = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]]) {
      ++tp;
      ap += static_cast<double>(tp) / static_cast<double>(rank + 1);
    }
  }
  return ap / static_cast<double>(positives);
}

APResult frame_map(const std::vector<ProbStream>& streams,
                   const std::vector<GroundTruth>& gts, const LabelSpace& space) {
  std::unordered_map<std::string, const GroundTruth*> gt_by_video;
  for (const GroundTruth& gt : gts) gt_by_video[gt.video_id] = &gt;

  const int num_classes = space.num_classes();
  APResult result;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (const ProbStream& stream : streams) {
      auto it = gt_by_video.find(stream.video_id);
      if (it == gt_by_video.end()) {
        throw InputError("frame_map: no ground truth for video " + stream.video_id);
      }
      const GroundTruth& gt = *it->second;
      if (gt.frame_count() != stream.frame_count()) {
        throw InputError("frame_map: stream/GT length mismatch for video " + stream.video_id);
      }
      for (std::size_t t = 0; t < stream.frame_count(); ++t) {
        scores.push_back(stream.probs.at(t, static_cast<std::size_t>(c)));
        labels.push_back(gt.labels.at(t, static_cast<std::size_t>(c)));
      }
    }
    if (auto ap = frame_ap(scores, labels)) {
      result.per_class_ap[c] = *ap;
    }
  }
  if (!result.per_class_ap.empty()) {
    double sum = 0.0;
    for (const auto& [c, ap] : result.per_class_ap) sum += ap;
    result.map = sum / static_cast<double>(result.per_class_ap.size());
  }
  return result;
}

double temporal_iou(const Interval& a, const Interval& b) {
  if (a.start >= a.end || b.start >= b.end) {
    throw InputError("temporal_iou: degenerate interval");
  }
  long long inter = std::min(a.end, b.end) - std::max(a.start, b.start);
  if (inter <= 0) return 0.0;
  long long uni = std::max(a.end, b.end) - std::min(a.start, b.start);
  return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

// Rank order for predictions: score desc, then earlier start, then class id,
// then video id, so output is deterministic across platforms.
bool pred_rank_less(const EventRecord& a, const EventRecord& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.start_frame != b.start_frame) return a.start_frame < b.start_frame;
  if (a.class_id != b.class_id) return a.class_id < b.class_id;
  return a.video_id < b.video_id;
}

// Runs the greedy matcher and returns per-rank TP flags.
std::vector<bool> greedy_match_flags(std::vector<EventRecord> preds,
                                     const std::vector<EventRecord>& gts, double iou_thr) {
  std::sort(preds.begin(), preds.end(), pred_rank_less);

  std::unordered_map<std::string, std::vector<std::size_t>> gts_by_video;
  for (std::size_t j = 0; j < gts.size(); ++j) {
    gts_by_video[gts[j].video_id].push_back(j);
  }
  std::vector<bool> gt_used(gts.size(), false);
  std::vector<bool> tp_flags(preds.size(), false);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    auto it = gts_by_video.find(preds[i].video_id);
    if (it == gts_by_video.end()) continue;
    double best_iou = 0.0;
    std::size_t best_j = gts.size();
    for (std::size_t j : it->second) {
      if (gt_used[j]) continue;
      double iou = temporal_iou({preds[i].start_frame, preds[i].end_frame},
                                {gts[j].start_frame, gts[j].end_frame});
      if (iou > best_iou ||
          (iou == best_iou && best_j < gts.size() && iou > 0.0 &&
           gts[j].start_frame < gts[best_j].start_frame)) {
        best_iou = iou;
        best_j = j;
      }
    }
    if (best_j < gts.size() && best_iou >= iou_thr) {
      gt_used[best_j] = true;
      tp_flags[i] = true;
    }
  }
  return tp_flags;
}

}  // namespace

int greedy_match_count(const std::vector<EventRecord>& preds,
                       const std::vector<EventRecord>& gts, double iou_thr) {
  std::vector<bool> flags = greedy_match_flags(preds, gts, iou_thr);
  int count = 0;
  for (bool tp : flags) count += tp;
  return count;
}

std::optional<double> temporal_ap(const std::vector<EventRecord>& preds,
                                  const std::vector<EventRecord>& gts, double iou_thr) {
  if (iou_thr <= 0.0 || iou_thr > 1.0) {
    throw InputError("temporal_ap: iou threshold must be in (0,1]");
  }
  if (gts.empty()) return std::nullopt;
  std::vector<bool> tp_flags = greedy_match_flags(preds, gts, iou_thr);
  double ap = 0.0;
  std::size_t tp = 0;
  for (std::size_t rank = 0; rank < tp_flags.size(); ++rank) {
    if (tp_flags[rank]) {
      ++tp;
      ap += static_cast<double>(tp) / static_cast<double>(rank + 1);
    }
  }
  return ap / static_cast<double>(gts.size());
}

TemporalMapResult temporal_map(const std::vector<EventRecord>& preds,
                               const std::vector<EventRecord>& gts, const LabelSpace& space,
                               double iou_thr) {
  std::map<std::string, std::map<int, std::vector<EventRecord>>> gt_by_video_class;
  for (const EventRecord& ev : gts) {
    if (ev.class_id < 0 || ev.class_id >= space.num_classes()) {
      throw InputError("temporal_map: GT event class " + std::to_string(ev.class_id) +
                       " outside taxonomy");
    }
    gt_by_video_class[ev.video_id][ev.class_id].push_back(ev);
  }
  std::map<std::string, std::map<int, std::vector<EventRecord>>> pred_by_video_class;
  for (const EventRecord& ev : preds) {
    pred_by_video_class[ev.video_id][ev.class_id].push_back(ev);
  }

  TemporalMapResult result;
  for (const auto& [video_id, by_class] : pred_by_video_class) {
    if (!gt_by_video_class.count(video_id)) {
      result.skipped_videos.push_back(video_id);
    }
  }

  std::vector<double> per_video_maps;
  for (const auto& [video_id, gt_classes] : gt_by_video_class) {
    APResult video_result;
    double sum = 0.0;
    for (const auto& [class_id, class_gts] : gt_classes) {
      static const std::vector<EventRecord> kNoPreds;
      const auto* class_preds = &kNoPreds;
      auto vit = pred_by_video_class.find(video_id);
      if (vit != pred_by_video_class.end()) {
        auto cit = vit->second.find(class_id);
        if (cit != vit->second.end()) class_preds = &cit->second;
      }
      double ap = temporal_ap(*class_preds, class_gts, iou_thr).value();
      video_result.per_class_ap[class_id] = ap;
      sum += ap;
    }
    video_result.map = sum / static_cast<double>(gt_classes.size());
    per_video_maps.push_back(*video_result.map);
    result.per_video.emplace(video_id, std::move(video_result));
  }
  if (!per_video_maps.empty()) {
    result.overall = aggregate_overall(per_video_maps);
  }
  return result;
}

double aggregate_overall(const std::vector<double>& per_video_scores) {
  if (per_video_scores.empty()) {
    throw InputError("aggregate_overall: no per-video scores");
  }
  double sum = 0.0;
  for (double v : per_video_scores) sum += v;
  return sum / static_cast<double>(per_video_scores.size());
}

namespace {

int oracle_search(std::size_t pred_idx, unsigned used_mask,
                  const std::vector<unsigned>& compat,
                  std::vector<std::vector<int>>& memo) {
  if (pred_idx == compat.size()) return 0;
  int& cached = memo[pred_idx][used_mask];
  if (cached >= 0) return cached;
  // Option: leave this prediction unmatched.
  int best = oracle_search(pred_idx + 1, used_mask, compat, memo);
  unsigned options = compat[pred_idx] & ~used_mask;
  while (options) {
    unsigned bit = options & (~options + 1);
    options ^= bit;
    best = std::max(best, 1 + oracle_search(pred_idx + 1, used_mask | bit, compat, memo));
  }
  cached = best;
  return best;
}

}  // namespace

int oracle_match(const std::vector<EventRecord>& preds, const std::vector<EventRecord>& gts,
                 double iou_thr, int max_side) {
  if (static_cast<int>(preds.size()) > max_side || static_cast<int>(gts.size()) > max_side) {
    throw InputError("oracle_match: instance too large (limit " + std::to_string(max_side) + ")");
  }
  if (gts.size() > 16) throw InputError("oracle_match: too many GT events");
  std::vector<unsigned> compat(preds.size(), 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (preds[i].video_id != gts[j].video_id) continue;
      double iou = temporal_iou({preds[i].start_frame, preds[i].end_frame},
                                {gts[j].start_frame, gts[j].end_frame});
      if (iou >= iou_thr) compat[i] |= (1u << j);
    }
  }
  std::vector<std::vector<int>> memo(preds.size(), std::vector<int>(1u << gts.size(), -1));
  return oracle_search(0, 0, compat, memo);
}

}  // namespace endoev
