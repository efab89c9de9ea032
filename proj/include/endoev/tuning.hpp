#pragma once

#include <string>
#include <vector>

#include "endoev/decode.hpp"
#include "endoev/metrics.hpp"
#include "endoev/streams.hpp"
#include "endoev/taxonomy.hpp"

namespace endoev {

enum class TuneObjective { tmap50, tmap95, mean_both };
const char* to_string(TuneObjective objective);
TuneObjective parse_tune_objective(std::string_view token);

// Frame mAP is invariant under temperature (calibration preserves ranking),
// so the default grid-search objective is the mean per-class F1 at the
// current thresholds; frame-mAP mode is kept behind a flag.
enum class TemperatureObjective { mean_f1, frame_map };

struct TuneReport {
  double temperature = 1.0;
  std::vector<double> thresholds;
  DecodeConfig decode;
  TuneObjective objective = TuneObjective::mean_both;
  std::vector<std::pair<int, double>> trace;  // (evaluation index, objective), non-decreasing
};

// Mean per-class F1 of (score >= threshold) over the concatenated frames of
// all videos; classes without positives are skipped.
double mean_f1_at_thresholds(const std::vector<ProbStream>& streams,
                             const std::vector<GroundTruth>& gts, const LabelSpace& space,
                             const std::vector<double>& thresholds);

// Grid search over temperatures; ties resolve to the smallest T.
double grid_search_temperature(const std::vector<ProbStream>& fused_streams,
                               const std::vector<GroundTruth>& gts, const LabelSpace& space,
                               const std::vector<double>& grid,
                               const std::vector<double>& thresholds,
                               TemperatureObjective objective = TemperatureObjective::mean_f1);

// Per-class threshold maximizing F1 over the observed scores; ties take the
// larger threshold; classes without positive frames default to 0.5.
std::vector<double> init_thresholds_f1(const std::vector<ProbStream>& streams,
                                       const std::vector<GroundTruth>& gts,
                                       const LabelSpace& space);

// Event-level objective used by the local searches: decode every validation
// video with cfg and score against the GT events.
double decode_objective(const std::vector<ProbStream>& streams,
                        const std::vector<EventRecord>& gt_events, const LabelSpace& space,
                        const DecodeConfig& cfg, TuneObjective objective,
                        std::size_t workers = 1);

struct LocalSearchOptions {
  double delta0 = 0.05;
  double delta_min = 0.005;
  int max_cycles = 50;
  std::size_t workers = 1;
};

struct LocalSearchResult {
  std::vector<double> thresholds;
  double objective_value = 0.0;
  std::vector<std::pair<int, double>> trace;
};

// Coordinate-wise hill climbing over per-class thresholds. Classes cycle in
// id order; each coordinate probes theta +/- delta and accepts only strict
// improvements of the full decode -> temporal-mAP objective; delta halves
// after an improvement-free cycle and the search stops below delta_min or at
// max_cycles.
LocalSearchResult local_search_thresholds(const std::vector<double>& theta0,
                                          const DecodeConfig& base_cfg,
                                          const std::vector<ProbStream>& streams,
                                          const std::vector<EventRecord>& gt_events,
                                          const LabelSpace& space, TuneObjective objective,
                                          const LocalSearchOptions& options = {});

struct DecodeParamGrid {
  std::vector<int> region_windows{9, 15, 25};
  std::vector<int> pathology_windows{3, 5, 9};
  std::vector<int> open_lens{1, 3, 5};
  std::vector<int> close_lens{1, 3, 5};
};

// Exhaustive search over the decode-parameter grid (the pathology axis also
// drives landmark classes). Candidates are visited smallest-first on every
// axis so equal objectives keep the smaller windows, then the smaller
// morphology sizes.
DecodeConfig tune_decode_params(const DecodeParamGrid& grid, const DecodeConfig& base_cfg,
                                const std::vector<ProbStream>& streams,
                                const std::vector<EventRecord>& gt_events,
                                const LabelSpace& space, TuneObjective objective,
                                std::size_t workers = 1);

std::string serialize_tune_report(const TuneReport& report);
TuneReport parse_tune_report(const std::string& text, const LabelSpace& space);
void save_tune_report(const TuneReport& report, const std::string& path);
TuneReport load_tune_report(const std::string& path, const LabelSpace& space);

std::string serialize_decode_config(const DecodeConfig& cfg);
DecodeConfig parse_decode_config(const std::string& text);

}  // namespace endoev
