#include "endoev/tuning.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>

#include <json.hpp>

#include "endoev/fusion.hpp"
#include "endoev/util.hpp"

namespace endoev {

const char* to_string(TuneObjective objective) {
  switch (objective) {
    case TuneObjective::tmap50: return "tmap50";
    case TuneObjective::tmap95: return "tmap95";
    case TuneObjective::mean_both: return "mean";
  }
  return "?";
}

TuneObjective parse_tune_objective(std::string_view token) {
  if (token == "tmap50") return TuneObjective::tmap50;
  if (token == "tmap95") return TuneObjective::tmap95;
  if (token == "mean") return TuneObjective::mean_both;
  throw InputError("unknown objective '" + std::string(token) + "' (tmap50|tmap95|mean)");
}

namespace {

struct GtLookup {
  std::map<std::string, const GroundTruth*> by_video;

  explicit GtLookup(const std::vector<GroundTruth>& gts) {
    for (const GroundTruth& gt : gts) by_video[gt.video_id] = &gt;
  }
  const GroundTruth& get(const std::string& video_id) const {
    auto it = by_video.find(video_id);
    if (it == by_video.end()) throw InputError("no ground truth for video " + video_id);
    return *it->second;
  }
};

}  // namespace

double mean_f1_at_thresholds(const std::vector<ProbStream>& streams,
                             const std::vector<GroundTruth>& gts, const LabelSpace& space,
                             const std::vector<double>& thresholds) {
  if (streams.empty()) throw InputError("mean_f1_at_thresholds: no streams");
  GtLookup lookup(gts);
  const int num_classes = space.num_classes();
  double sum = 0.0;
  int defined = 0;
  for (int c = 0; c < num_classes; ++c) {
    double theta = thresholds.empty() ? 0.5 : thresholds[static_cast<std::size_t>(c)];
    long long tp = 0, fp = 0, fn = 0, positives = 0;
    for (const ProbStream& stream : streams) {
      const GroundTruth& gt = lookup.get(stream.video_id);
      for (std::size_t t = 0; t < stream.frame_count(); ++t) {
        bool label = gt.labels.at(t, static_cast<std::size_t>(c)) != 0;
        bool pred = stream.probs.at(t, static_cast<std::size_t>(c)) >= theta;
        positives += label;
        if (pred && label) ++tp;
        else if (pred) ++fp;
        else if (label) ++fn;
      }
    }
    if (positives == 0) continue;
    double f1 = (2 * tp + fp + fn) > 0
                    ? 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn)
                    : 0.0;
    sum += f1;
    ++defined;
  }
  if (defined == 0) throw InputError("mean_f1_at_thresholds: no class has positive frames");
  return sum / static_cast<double>(defined);
}

double grid_search_temperature(const std::vector<ProbStream>& fused_streams,
                               const std::vector<GroundTruth>& gts, const LabelSpace& space,
                               const std::vector<double>& grid,
                               const std::vector<double>& thresholds,
                               TemperatureObjective objective) {
  if (grid.empty()) throw InputError("grid_search_temperature: empty grid");
  for (double t : grid) {
    if (!(t > 0.0) || !std::isfinite(t)) {
      throw InputError("grid_search_temperature: temperatures must be finite and > 0");
    }
  }
  std::vector<double> sorted = grid;
  std::sort(sorted.begin(), sorted.end());

  double best_t = sorted.front();
  double best_value = -1.0;
  for (double t : sorted) {
    std::vector<ProbStream> calibrated;
    calibrated.reserve(fused_streams.size());
    for (const ProbStream& s : fused_streams) calibrated.push_back(calibrate(s, t));
    double value = objective == TemperatureObjective::mean_f1
                       ? mean_f1_at_thresholds(calibrated, gts, space, thresholds)
                       : frame_map(calibrated, gts, space).map.value_or(0.0);
    if (value > best_value) {
      best_value = value;
      best_t = t;
    }
  }
  return best_t;
}

std::vector<double> init_thresholds_f1(const std::vector<ProbStream>& streams,
                                       const std::vector<GroundTruth>& gts,
                                       const LabelSpace& space) {
  if (streams.empty()) throw InputError("init_thresholds_f1: no streams");
  GtLookup lookup(gts);
  const int num_classes = space.num_classes();
  std::vector<double> thresholds(static_cast<std::size_t>(num_classes), 0.5);

  for (int c = 0; c < num_classes; ++c) {
    std::vector<std::pair<double, int>> scored;  // (score, label)
    long long positives = 0;
    for (const ProbStream& stream : streams) {
      const GroundTruth& gt = lookup.get(stream.video_id);
      for (std::size_t t = 0; t < stream.frame_count(); ++t) {
        int label = gt.labels.at(t, static_cast<std::size_t>(c)) ? 1 : 0;
        scored.emplace_back(stream.probs.at(t, static_cast<std::size_t>(c)), label);
        positives += label;
      }
    }
    if (positives == 0) {
      std::cerr << "init_thresholds_f1: class " << c
                << " has no positive frames; defaulting threshold to 0.5\n";
      continue;
    }
    std::sort(scored.begin(), scored.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });

    // Candidates are the distinct observed scores: predicting (score >= s_k)
    // keeps the top block ending at the last copy of s_k.
    double best_f1 = -1.0;
    double best_theta = 0.5;
    long long tp = 0;
    for (std::size_t i = 0; i < scored.size(); ++i) {
      tp += scored[i].second;
      bool boundary = (i + 1 == scored.size()) || scored[i + 1].first != scored[i].first;
      if (!boundary) continue;
      long long predicted = static_cast<long long>(i) + 1;
      long long fp = predicted - tp;
      long long fn = positives - tp;
      double f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
      double theta = scored[i].first;
      // strict > keeps the larger theta on ties (scores descend)
      if (f1 > best_f1) {
        best_f1 = f1;
        best_theta = theta;
      }
    }
    thresholds[static_cast<std::size_t>(c)] = std::clamp(best_theta, 1e-6, 1.0 - 1e-6);
  }
  return thresholds;
}

double decode_objective(const std::vector<ProbStream>& streams,
                        const std::vector<EventRecord>& gt_events, const LabelSpace& space,
                        const DecodeConfig& cfg, TuneObjective objective, std::size_t workers) {
  std::vector<EventRecord> events = decode_all(streams, space, cfg, workers);
  auto value_at = [&](double iou) {
    return temporal_map(events, gt_events, space, iou).overall.value_or(0.0);
  };
  switch (objective) {
    case TuneObjective::tmap50: return value_at(0.5);
    case TuneObjective::tmap95: return value_at(0.95);
    case TuneObjective::mean_both: return 0.5 * (value_at(0.5) + value_at(0.95));
  }
  return 0.0;
}

LocalSearchResult local_search_thresholds(const std::vector<double>& theta0,
                                          const DecodeConfig& base_cfg,
                                          const std::vector<ProbStream>& streams,
                                          const std::vector<EventRecord>& gt_events,
                                          const LabelSpace& space, TuneObjective objective,
                                          const LocalSearchOptions& options) {
  if (theta0.size() != static_cast<std::size_t>(space.num_classes())) {
    throw InputError("local_search_thresholds: theta0 length mismatch");
  }
  LocalSearchResult result;
  result.thresholds = theta0;

  DecodeConfig cfg = base_cfg;
  cfg.thresholds = theta0;
  int evaluations = 0;
  auto evaluate = [&](const std::vector<double>& thresholds) {
    cfg.thresholds = thresholds;
    ++evaluations;
    return decode_objective(streams, gt_events, space, cfg, objective, options.workers);
  };

  result.objective_value = evaluate(result.thresholds);
  result.trace.emplace_back(evaluations, result.objective_value);

  double delta = options.delta0;
  for (int cycle = 0; cycle < options.max_cycles && delta >= options.delta_min; ++cycle) {
    bool improved_in_cycle = false;
    for (int c = 0; c < space.num_classes(); ++c) {
      double current = result.thresholds[static_cast<std::size_t>(c)];
      double best_probe_value = result.objective_value;
      double best_probe_theta = current;
      // lower probe first so equal-objective probes prefer the smaller theta
      for (double candidate : {current - delta, current + delta}) {
        if (!(candidate > 0.0 && candidate < 1.0)) continue;
        std::vector<double> probe = result.thresholds;
        probe[static_cast<std::size_t>(c)] = candidate;
        double value = evaluate(probe);
        if (value > best_probe_value) {
          best_probe_value = value;
          best_probe_theta = candidate;
        }
      }
      if (best_probe_theta != current) {
        result.thresholds[static_cast<std::size_t>(c)] = best_probe_theta;
        result.objective_value = best_probe_value;
        result.trace.emplace_back(evaluations, best_probe_value);
        improved_in_cycle = true;
      }
    }
    if (!improved_in_cycle) delta *= 0.5;
  }
  return result;
}

DecodeConfig tune_decode_params(const DecodeParamGrid& grid, const DecodeConfig& base_cfg,
                                const std::vector<ProbStream>& streams,
                                const std::vector<EventRecord>& gt_events,
                                const LabelSpace& space, TuneObjective objective,
                                std::size_t workers) {
  if (grid.region_windows.empty() || grid.pathology_windows.empty() || grid.open_lens.empty() ||
      grid.close_lens.empty()) {
    throw InputError("tune_decode_params: empty grid axis");
  }
  auto sorted = [](std::vector<int> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  std::vector<int> region_windows = sorted(grid.region_windows);
  std::vector<int> pathology_windows = sorted(grid.pathology_windows);
  std::vector<int> open_lens = sorted(grid.open_lens);
  std::vector<int> close_lens = sorted(grid.close_lens);

  DecodeConfig best_cfg = base_cfg;
  double best_value = -1.0;
  for (int region_w : region_windows) {
    for (int path_w : pathology_windows) {
      for (int open_len : open_lens) {
        for (int close_len : close_lens) {
          DecodeConfig cfg = base_cfg;
          cfg.smoothing_window.region = region_w;
          cfg.smoothing_window.landmark = path_w;
          cfg.smoothing_window.pathology = path_w;
          cfg.open_len.landmark = open_len;
          cfg.open_len.pathology = open_len;
          cfg.close_len.landmark = close_len;
          cfg.close_len.pathology = close_len;
          double value = decode_objective(streams, gt_events, space, cfg, objective, workers);
          if (value > best_value) {
            best_value = value;
            best_cfg = cfg;
          }
        }
      }
    }
  }
  return best_cfg;
}

namespace {

nlohmann::ordered_json kind_param_json(const KindParam& param) {
  nlohmann::ordered_json j;
  j["region"] = param.region;
  j["landmark"] = param.landmark;
  j["pathology"] = param.pathology;
  if (!param.overrides.empty()) {
    nlohmann::ordered_json overrides(nlohmann::json::value_t::object);
    for (const auto& [class_id, value] : param.overrides) {
      overrides[std::to_string(class_id)] = value;
    }
    j["overrides"] = std::move(overrides);
  }
  return j;
}

KindParam parse_kind_param(const nlohmann::json& j, int fallback) {
  KindParam param;
  param.region = param.landmark = param.pathology = fallback;
  if (j.is_number_integer()) {
    param.region = param.landmark = param.pathology = j.get<int>();
    return param;
  }
  param.region = j.value("region", fallback);
  param.landmark = j.value("landmark", fallback);
  param.pathology = j.value("pathology", fallback);
  if (j.contains("overrides")) {
    for (const auto& [key, value] : j.at("overrides").items()) {
      param.overrides[std::stoi(key)] = value.get<int>();
    }
  }
  return param;
}

nlohmann::ordered_json decode_config_json(const DecodeConfig& cfg) {
  nlohmann::ordered_json j;
  j["mode"] = cfg.monotonic_mode == MonotonicMode::viterbi ? "viterbi" : "greedy";
  j["events"] = cfg.event_mode == EventMode::per_label ? "per-label" : "tuple";
  j["smoothing_window"] = kind_param_json(cfg.smoothing_window);
  j["open_len"] = kind_param_json(cfg.open_len);
  j["close_len"] = kind_param_json(cfg.close_len);
  j["min_region_run"] = cfg.min_region_run;
  j["smoothing"] = cfg.smoothing_enabled;
  j["constraints"] = cfg.constraints_enabled;
  j["morphology"] = cfg.morphology_enabled;
  if (!cfg.thresholds.empty()) j["thresholds"] = cfg.thresholds;
  return j;
}

DecodeConfig decode_config_from_json(const nlohmann::json& j) {
  DecodeConfig cfg;
  std::string mode = j.value("mode", "viterbi");
  if (mode == "viterbi") cfg.monotonic_mode = MonotonicMode::viterbi;
  else if (mode == "greedy") cfg.monotonic_mode = MonotonicMode::greedy;
  else throw InputError("decode config: unknown mode '" + mode + "'");
  std::string events = j.value("events", "per-label");
  if (events == "per-label") cfg.event_mode = EventMode::per_label;
  else if (events == "tuple") cfg.event_mode = EventMode::tuple_based;
  else throw InputError("decode config: unknown event mode '" + events + "'");
  if (j.contains("smoothing_window")) {
    cfg.smoothing_window = parse_kind_param(j.at("smoothing_window"), 1);
  }
  if (j.contains("open_len")) cfg.open_len = parse_kind_param(j.at("open_len"), 1);
  if (j.contains("close_len")) cfg.close_len = parse_kind_param(j.at("close_len"), 1);
  cfg.min_region_run = j.value("min_region_run", cfg.min_region_run);
  cfg.smoothing_enabled = j.value("smoothing", true);
  cfg.constraints_enabled = j.value("constraints", true);
  cfg.morphology_enabled = j.value("morphology", true);
  if (j.contains("thresholds")) cfg.thresholds = j.at("thresholds").get<std::vector<double>>();
  return cfg;
}

}  // namespace

std::string serialize_decode_config(const DecodeConfig& cfg) {
  return decode_config_json(cfg).dump(2) + "\n";
}

DecodeConfig parse_decode_config(const std::string& text) {
  try {
    return decode_config_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("decode config: ") + e.what());
  }
}

std::string serialize_tune_report(const TuneReport& report) {
  nlohmann::ordered_json j;
  j["temperature"] = report.temperature;
  j["objective"] = to_string(report.objective);
  j["thresholds"] = report.thresholds;
  j["decode"] = decode_config_json(report.decode);
  nlohmann::ordered_json trace(nlohmann::json::value_t::array);
  for (const auto& [step, value] : report.trace) {
    trace.push_back(nlohmann::ordered_json::array({step, value}));
  }
  j["trace"] = std::move(trace);
  return j.dump(2) + "\n";
}

TuneReport parse_tune_report(const std::string& text, const LabelSpace& space) {
  TuneReport report;
  try {
    nlohmann::json j = nlohmann::json::parse(text);
    report.temperature = j.at("temperature").get<double>();
    report.objective = parse_tune_objective(j.value("objective", "mean"));
    report.thresholds = j.at("thresholds").get<std::vector<double>>();
    report.decode = decode_config_from_json(j.at("decode"));
    if (j.contains("trace")) {
      for (const auto& entry : j.at("trace")) {
        report.trace.emplace_back(entry.at(0).get<int>(), entry.at(1).get<double>());
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("tune report: ") + e.what());
  }
  if (report.thresholds.size() != static_cast<std::size_t>(space.num_classes())) {
    throw InputError("tune report: threshold count does not match taxonomy");
  }
  if (!(report.temperature > 0.0)) throw InputError("tune report: non-positive temperature");
  for (double theta : report.thresholds) {
    if (!(theta > 0.0 && theta < 1.0)) throw InputError("tune report: threshold outside (0,1)");
  }
  return report;
}

void save_tune_report(const TuneReport& report, const std::string& path) {
  write_text_file(path, serialize_tune_report(report));
}

TuneReport load_tune_report(const std::string& path, const LabelSpace& space) {
  return parse_tune_report(read_text_file(path), space);
}

}  // namespace endoev
