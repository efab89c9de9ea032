#include "endoev/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include <json.hpp>

#include "endoev/parallel.hpp"
#include "endoev/util.hpp"

namespace endoev {

FusionWeights compute_weights_from_validation(const StreamSet& streams,
                                              const std::vector<GroundTruth>& gts,
                                              const std::vector<std::string>& val_videos,
                                              const LabelSpace& space) {
  if (val_videos.empty()) throw InputError("compute_weights: no validation videos");
  std::map<std::string, const GroundTruth*> gt_by_video;
  for (const GroundTruth& gt : gts) gt_by_video[gt.video_id] = &gt;
  std::vector<GroundTruth> val_gts;
  for (const std::string& video_id : val_videos) {
    auto it = gt_by_video.find(video_id);
    if (it == gt_by_video.end()) {
      throw InputError("compute_weights: no ground truth for validation video " + video_id);
    }
    val_gts.push_back(*it->second);
  }

  const int num_classes = space.num_classes();
  ValidationAps aps;
  for (int b : streams.backbone_ids()) {
    for (int m : streams.model_ids(b)) {
      std::vector<ProbStream> head_streams;
      for (const std::string& video_id : val_videos) {
        head_streams.push_back(streams.get(video_id, {b, m, false}));
      }
      APResult result = frame_map(head_streams, val_gts, space);
      std::vector<std::optional<double>> row(static_cast<std::size_t>(num_classes));
      for (const auto& [c, ap] : result.per_class_ap) {
        row[static_cast<std::size_t>(c)] = ap;
      }
      aps[{b, m}] = std::move(row);
    }
  }

  FusionWeights weights;
  weights.alpha = compute_model_weights(aps, num_classes);
  weights.temperature = 1.0;

  std::map<int, double> backbone_maps;
  for (int b : streams.backbone_ids()) {
    std::vector<ProbStream> fused;
    for (const std::string& video_id : val_videos) {
      std::vector<const ProbStream*> model_streams;
      for (int m : streams.model_ids(b)) {
        model_streams.push_back(&streams.get(video_id, {b, m, false}));
      }
      fused.push_back(fuse_models(model_streams, weights.alpha, b));
    }
    backbone_maps[b] = frame_map(fused, val_gts, space).map.value_or(0.0);
  }
  weights.beta = compute_backbone_weights(backbone_maps);
  weights.validate();
  return weights;
}

std::vector<ProbStream> fuse_videos(const StreamSet& streams,
                                    const std::vector<std::string>& videos,
                                    const FusionWeights& weights, std::size_t workers) {
  std::vector<ProbStream> fused(videos.size());
  parallel_for(videos.size(), workers,
               [&](std::size_t i) { fused[i] = fuse_video(streams, videos[i], weights); });
  return fused;
}

const char* to_string(PipelineArm arm) {
  switch (arm) {
    case PipelineArm::full: return "full";
    case PipelineArm::per_label_only: return "per-label-only";
    case PipelineArm::tuple_based: return "tuple-based";
    case PipelineArm::uniform_fusion: return "uniform-fusion";
    case PipelineArm::uniform_model: return "uniform-model";
    case PipelineArm::single_backbone: return "single-backbone";
  }
  return "?";
}

PipelineArm parse_pipeline_arm(std::string_view token) {
  if (token == "full") return PipelineArm::full;
  if (token == "per-label-only") return PipelineArm::per_label_only;
  if (token == "tuple-based") return PipelineArm::tuple_based;
  if (token == "uniform-fusion") return PipelineArm::uniform_fusion;
  if (token == "uniform-model") return PipelineArm::uniform_model;
  if (token == "single-backbone") return PipelineArm::single_backbone;
  throw InputError("unknown arm '" + std::string(token) +
                   "' (full|per-label-only|tuple-based|uniform-fusion|uniform-model|single-backbone)");
}

std::string ArmSpec::label() const {
  if (arm == PipelineArm::single_backbone) {
    return "backbone-" + std::to_string(backbone_id) + "-only";
  }
  return to_string(arm);
}

FusionWeights arm_weights(const ArmSpec& arm, const FusionWeights& weighted,
                          const StreamSet& streams, const LabelSpace& space) {
  switch (arm.arm) {
    case PipelineArm::full:
    case PipelineArm::per_label_only:
    case PipelineArm::tuple_based:
      return weighted;
    case PipelineArm::uniform_fusion:
      return uniform_weights(streams, space.num_classes());
    case PipelineArm::uniform_model: {
      FusionWeights w = uniform_weights(streams, space.num_classes());
      w.beta = weighted.beta;
      return w;
    }
    case PipelineArm::single_backbone: {
      FusionWeights w;
      bool found = false;
      for (const auto& [key, row] : weighted.alpha) {
        if (key.first == arm.backbone_id) {
          w.alpha[key] = row;
          found = true;
        }
      }
      if (!found) {
        throw InputError("single-backbone arm: no streams for backbone " +
                         std::to_string(arm.backbone_id));
      }
      w.beta[arm.backbone_id] = 1.0;
      w.temperature = weighted.temperature;
      return w;
    }
  }
  return weighted;
}

DecodeConfig arm_decode_config(const ArmSpec& arm, const DecodeConfig& full_cfg) {
  DecodeConfig cfg = full_cfg;
  cfg.smoothing_enabled = true;
  cfg.constraints_enabled = true;
  cfg.morphology_enabled = true;
  cfg.event_mode = EventMode::per_label;
  switch (arm.arm) {
    case PipelineArm::per_label_only:
      cfg.smoothing_enabled = false;
      cfg.constraints_enabled = false;
      cfg.morphology_enabled = false;
      break;
    case PipelineArm::tuple_based:
      cfg.event_mode = EventMode::tuple_based;
      break;
    default:
      break;
  }
  return cfg;
}

EvalReport evaluate_events(const std::vector<EventRecord>& preds,
                           const std::vector<EventRecord>& gts, const LabelSpace& space,
                           const std::vector<double>& ious) {
  EvalReport report;
  for (double iou : ious) {
    EvalThresholdReport entry;
    entry.iou = iou;
    TemporalMapResult result = temporal_map(preds, gts, space, iou);
    entry.per_video = std::move(result.per_video);
    entry.overall = result.overall.value_or(0.0);
    entry.skipped_videos = std::move(result.skipped_videos);

    std::map<int, std::vector<EventRecord>> gt_by_class, pred_by_class;
    for (const EventRecord& ev : gts) gt_by_class[ev.class_id].push_back(ev);
    for (const EventRecord& ev : preds) pred_by_class[ev.class_id].push_back(ev);
    for (const auto& [class_id, class_gts] : gt_by_class) {
      static const std::vector<EventRecord> kNone;
      auto it = pred_by_class.find(class_id);
      const auto& class_preds = it == pred_by_class.end() ? kNone : it->second;
      entry.per_class[class_id] = temporal_ap(class_preds, class_gts, iou).value();
    }
    report.thresholds.push_back(std::move(entry));
  }
  return report;
}

std::string eval_report_text(const EvalReport& report, const LabelSpace& space) {
  std::ostringstream out;
  out << "temporal event evaluation\n";
  for (const EvalThresholdReport& entry : report.thresholds) {
    out << "\nIoU " << format_double(entry.iou, 2) << ": overall mAP "
        << format_double(entry.overall, 4) << " over " << entry.per_video.size() << " video(s)\n";
    out << "  per video:\n";
    for (const auto& [video_id, result] : entry.per_video) {
      out << "    " << video_id << "  mAP " << format_double(result.map.value_or(0.0), 4) << " ("
          << result.per_class_ap.size() << " classes)\n";
    }
    out << "  per class (pooled):\n";
    for (const auto& [class_id, ap] : entry.per_class) {
      out << "    " << class_id << " " << space.class_info(class_id).name << "  AP "
          << format_double(ap, 4) << "\n";
    }
    for (const std::string& video_id : entry.skipped_videos) {
      out << "  warning: video " << video_id << " has predictions but no GT events; excluded\n";
    }
  }
  return out.str();
}

std::string eval_report_json(const EvalReport& report, const LabelSpace& space) {
  nlohmann::ordered_json root;
  nlohmann::ordered_json thresholds(nlohmann::json::value_t::array);
  for (const EvalThresholdReport& entry : report.thresholds) {
    nlohmann::ordered_json j;
    j["iou"] = entry.iou;
    j["overall"] = entry.overall;
    nlohmann::ordered_json per_video(nlohmann::json::value_t::object);
    for (const auto& [video_id, result] : entry.per_video) {
      nlohmann::ordered_json v;
      v["map"] = result.map.value_or(0.0);
      nlohmann::ordered_json per_class(nlohmann::json::value_t::object);
      for (const auto& [class_id, ap] : result.per_class_ap) {
        per_class[std::to_string(class_id)] = ap;
      }
      v["per_class_ap"] = std::move(per_class);
      per_video[video_id] = std::move(v);
    }
    j["per_video"] = std::move(per_video);
    nlohmann::ordered_json per_class(nlohmann::json::value_t::object);
    for (const auto& [class_id, ap] : entry.per_class) {
      nlohmann::ordered_json c;
      c["name"] = space.class_info(class_id).name;
      c["ap"] = ap;
      per_class[std::to_string(class_id)] = std::move(c);
    }
    j["per_class"] = std::move(per_class);
    j["skipped_videos"] = entry.skipped_videos;
    thresholds.push_back(std::move(j));
  }
  root["thresholds"] = std::move(thresholds);
  return root.dump(2) + "\n";
}

std::string ablation_table_text(const std::vector<AblationRow>& rows) {
  std::size_t label_width = 4;
  for (const AblationRow& row : rows) label_width = std::max(label_width, row.label.size());
  std::ostringstream out;
  out << "arm";
  out << std::string(label_width - 3 + 2, ' ') << "tmAP@0.5  tmAP@0.95\n";
  for (const AblationRow& row : rows) {
    out << row.label << std::string(label_width - row.label.size() + 2, ' ')
        << format_double(row.tmap50, 4) << "    " << format_double(row.tmap95, 4) << "\n";
  }
  return out.str();
}

std::string ablation_table_csv(const std::vector<AblationRow>& rows) {
  std::string out = "arm,tmap50,tmap95\n";
  for (const AblationRow& row : rows) {
    out += row.label + "," + format_double(row.tmap50, 6) + "," + format_double(row.tmap95, 6) + "\n";
  }
  return out;
}

std::vector<GroundTruth> CorpusView::gts_for(const std::vector<std::string>& videos) const {
  std::map<std::string, const GroundTruth*> by_video;
  for (const GroundTruth& gt : *ground_truth) by_video[gt.video_id] = &gt;
  std::vector<GroundTruth> out;
  for (const std::string& video_id : videos) {
    auto it = by_video.find(video_id);
    if (it == by_video.end()) throw InputError("no ground truth for video " + video_id);
    out.push_back(*it->second);
  }
  return out;
}

std::vector<EventRecord> CorpusView::events_for(const std::vector<std::string>& videos) const {
  std::set<std::string> wanted(videos.begin(), videos.end());
  std::vector<EventRecord> out;
  for (const EventRecord& ev : *gt_events) {
    if (wanted.count(ev.video_id)) out.push_back(ev);
  }
  return out;
}

AblationRow run_arm(const ArmSpec& arm, const CorpusView& corpus,
                    const FusionWeights& weighted, const DecodeConfig& decode_cfg,
                    const TuneStageOptions& options,
                    const std::vector<std::string>& eval_videos, std::size_t workers) {
  const LabelSpace& space = *corpus.space;
  FusionWeights weights = arm_weights(arm, weighted, *corpus.streams, space);
  weights.temperature = 1.0;

  std::vector<ProbStream> fused_val = fuse_videos(*corpus.streams, corpus.split.val, weights, workers);
  std::vector<GroundTruth> val_gts = corpus.gts_for(corpus.split.val);
  std::vector<EventRecord> val_events = corpus.events_for(corpus.split.val);

  std::vector<double> initial_thresholds(static_cast<std::size_t>(space.num_classes()), 0.5);
  weights.temperature =
      grid_search_temperature(fused_val, val_gts, space, options.temperature_grid,
                              initial_thresholds, options.calibration_objective);

  std::vector<ProbStream> calibrated_val;
  calibrated_val.reserve(fused_val.size());
  for (const ProbStream& s : fused_val) calibrated_val.push_back(calibrate(s, weights.temperature));

  DecodeConfig cfg = arm_decode_config(arm, decode_cfg);
  cfg.thresholds = init_thresholds_f1(calibrated_val, val_gts, space);

  if (options.run_param_grid) {
    cfg = tune_decode_params(options.grid, cfg, calibrated_val, val_events, space,
                             options.objective, workers);
  }
  if (options.run_local_search) {
    LocalSearchOptions search = options.search;
    search.workers = workers;
    LocalSearchResult refined = local_search_thresholds(cfg.thresholds, cfg, calibrated_val,
                                                        val_events, space, options.objective, search);
    cfg.thresholds = refined.thresholds;
  }

  std::vector<ProbStream> eval_streams = fuse_videos(*corpus.streams, eval_videos, weights, workers);
  std::vector<EventRecord> events = decode_all(eval_streams, space, cfg, workers);
  std::vector<EventRecord> eval_gt = corpus.events_for(eval_videos);

  AblationRow row;
  row.label = arm.label();
  row.tmap50 = temporal_map(events, eval_gt, space, 0.5).overall.value_or(0.0);
  row.tmap95 = temporal_map(events, eval_gt, space, 0.95).overall.value_or(0.0);
  return row;
}

std::vector<AblationRow> run_ablation(const CorpusView& corpus, const FusionWeights& weighted,
                                      const DecodeConfig& decode_cfg,
                                      const TuneStageOptions& options, std::size_t workers) {
  std::vector<ArmSpec> arms;
  for (int b : corpus.streams->backbone_ids()) {
    arms.push_back({PipelineArm::single_backbone, b});
  }
  arms.push_back({PipelineArm::per_label_only, 0});
  arms.push_back({PipelineArm::tuple_based, 0});
  arms.push_back({PipelineArm::uniform_fusion, 0});
  arms.push_back({PipelineArm::uniform_model, 0});
  arms.push_back({PipelineArm::full, 0});

  std::vector<AblationRow> rows;
  for (const ArmSpec& arm : arms) {
    rows.push_back(run_arm(arm, corpus, weighted, decode_cfg, options, corpus.split.val, workers));
  }
  return rows;
}

// ---- configuration --------------------------------------------------------

namespace {

DecodeConfig default_decode_config() {
  DecodeConfig cfg;
  cfg.smoothing_window.region = 15;
  cfg.smoothing_window.landmark = 9;
  cfg.smoothing_window.pathology = 5;
  cfg.open_len.region = 1;
  cfg.open_len.landmark = 3;
  cfg.open_len.pathology = 3;
  cfg.close_len.region = 1;
  cfg.close_len.landmark = 5;
  cfg.close_len.pathology = 5;
  return cfg;
}

TuneStageOptions tune_options_from_json(const nlohmann::json& j) {
  TuneStageOptions options;
  if (j.contains("temperature_grid")) {
    options.temperature_grid = j.at("temperature_grid").get<std::vector<double>>();
  }
  std::string cal = j.value("calibration_objective", "f1");
  if (cal == "f1") options.calibration_objective = TemperatureObjective::mean_f1;
  else if (cal == "frame-map") options.calibration_objective = TemperatureObjective::frame_map;
  else throw InputError("tune config: calibration_objective must be f1 or frame-map");
  options.objective = parse_tune_objective(j.value("objective", "mean"));
  options.run_param_grid = j.value("param_grid", true);
  options.run_local_search = j.value("local_search", true);
  options.search.delta0 = j.value("delta0", options.search.delta0);
  options.search.delta_min = j.value("delta_min", options.search.delta_min);
  options.search.max_cycles = j.value("max_cycles", options.search.max_cycles);
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    if (g.contains("region_windows")) {
      options.grid.region_windows = g.at("region_windows").get<std::vector<int>>();
    }
    if (g.contains("pathology_windows")) {
      options.grid.pathology_windows = g.at("pathology_windows").get<std::vector<int>>();
    }
    if (g.contains("open_lens")) options.grid.open_lens = g.at("open_lens").get<std::vector<int>>();
    if (g.contains("close_lens")) options.grid.close_lens = g.at("close_lens").get<std::vector<int>>();
  }
  return options;
}

nlohmann::ordered_json tune_options_to_json(const TuneStageOptions& options) {
  nlohmann::ordered_json j;
  j["temperature_grid"] = options.temperature_grid;
  j["calibration_objective"] =
      options.calibration_objective == TemperatureObjective::mean_f1 ? "f1" : "frame-map";
  j["objective"] = to_string(options.objective);
  j["param_grid"] = options.run_param_grid;
  j["local_search"] = options.run_local_search;
  j["delta0"] = options.search.delta0;
  j["delta_min"] = options.search.delta_min;
  j["max_cycles"] = options.search.max_cycles;
  nlohmann::ordered_json grid;
  grid["region_windows"] = options.grid.region_windows;
  grid["pathology_windows"] = options.grid.pathology_windows;
  grid["open_lens"] = options.grid.open_lens;
  grid["close_lens"] = options.grid.close_lens;
  j["grid"] = std::move(grid);
  return j;
}

}  // namespace

PipelineConfig parse_pipeline_config(const std::string& text) {
  PipelineConfig cfg;
  cfg.decode = default_decode_config();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.workers = j.value("workers", cfg.workers);
    cfg.taxonomy_path = j.value("taxonomy", "");
    if (j.contains("synth")) {
      cfg.use_synth = true;
      cfg.synth = parse_synth_config(j.at("synth").dump());
      cfg.synth.seed = cfg.seed;
    } else {
      cfg.use_synth = false;
    }
    if (j.contains("inputs")) {
      const auto& in = j.at("inputs");
      cfg.streams_path = in.value("streams", "");
      cfg.gt_path = in.value("ground_truth", "");
      cfg.gt_events_path = in.value("gt_events", "");
      cfg.split_path = in.value("split", "");
    }
    if (j.contains("heads")) {
      const auto& heads = j.at("heads");
      cfg.features_path = heads.value("features", "");
      cfg.feature_labels_path = heads.value("labels", "");
      cfg.head_specs_path = heads.value("specs", "");
    }
    if (j.contains("tune")) cfg.tune = tune_options_from_json(j.at("tune"));
    if (j.contains("decode")) cfg.decode = parse_decode_config(j.at("decode").dump());
    cfg.arm.arm = parse_pipeline_arm(j.value("arm", "full"));
    cfg.arm.backbone_id = j.value("backbone", 0);
    cfg.decode_split = j.value("decode_split", "test");
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("pipeline config: ") + e.what());
  }
  if (!cfg.use_synth) {
    if (cfg.streams_path.empty() && cfg.features_path.empty()) {
      throw InputError("pipeline config: needs a synth block, inputs.streams, or heads.features");
    }
    if (cfg.gt_path.empty()) throw InputError("pipeline config: inputs.ground_truth is required");
    if (cfg.gt_events_path.empty()) {
      throw InputError("pipeline config: inputs.gt_events is required");
    }
    if (cfg.split_path.empty()) throw InputError("pipeline config: inputs.split is required");
    if (cfg.taxonomy_path.empty()) throw InputError("pipeline config: taxonomy is required");
  }
  if (cfg.decode_split != "train" && cfg.decode_split != "val" && cfg.decode_split != "test" &&
      cfg.decode_split != "all") {
    throw InputError("pipeline config: decode_split must be train|val|test|all");
  }
  return cfg;
}

PipelineConfig load_pipeline_config(const std::string& path) {
  return parse_pipeline_config(read_text_file(path));
}

std::string serialize_pipeline_config(const PipelineConfig& cfg) {
  nlohmann::ordered_json j;
  j["seed"] = cfg.seed;
  j["workers"] = cfg.workers;
  if (!cfg.taxonomy_path.empty()) j["taxonomy"] = cfg.taxonomy_path;
  if (cfg.use_synth) j["synth"] = nlohmann::ordered_json::parse(serialize_synth_config(cfg.synth));
  if (!cfg.streams_path.empty() || !cfg.gt_path.empty()) {
    nlohmann::ordered_json in;
    in["streams"] = cfg.streams_path;
    in["ground_truth"] = cfg.gt_path;
    in["gt_events"] = cfg.gt_events_path;
    in["split"] = cfg.split_path;
    j["inputs"] = std::move(in);
  }
  if (!cfg.features_path.empty()) {
    nlohmann::ordered_json heads;
    heads["features"] = cfg.features_path;
    heads["labels"] = cfg.feature_labels_path;
    heads["specs"] = cfg.head_specs_path;
    j["heads"] = std::move(heads);
  }
  j["tune"] = tune_options_to_json(cfg.tune);
  j["decode"] = nlohmann::ordered_json::parse(serialize_decode_config(cfg.decode));
  j["arm"] = to_string(cfg.arm.arm);
  j["backbone"] = cfg.arm.backbone_id;
  j["decode_split"] = cfg.decode_split;
  return j.dump(2) + "\n";
}

// ---- manifest and stage running -------------------------------------------

std::string serialize_manifest(const RunManifest& manifest) {
  nlohmann::ordered_json j;
  j["tool_version"] = manifest.tool_version;
  j["seed"] = manifest.seed;
  nlohmann::ordered_json stages(nlohmann::json::value_t::object);
  for (const auto& [name, record] : manifest.stages) {
    nlohmann::ordered_json s;
    s["inputs"] = record.inputs;
    s["outputs"] = record.outputs;
    s["config_digest"] = record.config_digest;
    s["wall_ms"] = record.wall_ms;
    s["skipped"] = record.skipped;
    stages[name] = std::move(s);
  }
  j["stages"] = std::move(stages);
  return j.dump(2) + "\n";
}

RunManifest parse_manifest(const std::string& text) {
  RunManifest manifest;
  try {
    nlohmann::json j = nlohmann::json::parse(text);
    manifest.tool_version = j.value("tool_version", "");
    manifest.seed = j.value("seed", 0ull);
    if (j.contains("stages")) {
      for (const auto& [name, s] : j.at("stages").items()) {
        StageRecord record;
        record.inputs = s.value("inputs", std::map<std::string, std::string>{});
        record.outputs = s.value("outputs", std::map<std::string, std::string>{});
        record.config_digest = s.value("config_digest", "");
        record.wall_ms = s.value("wall_ms", 0.0);
        record.skipped = s.value("skipped", false);
        manifest.stages[name] = std::move(record);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("manifest: ") + e.what());
  }
  return manifest;
}

namespace {

namespace fs = std::filesystem;

std::string join_path(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

// Run (or skip) one stage: when the config digest, every input digest, and
// every recorded output digest still match the filesystem, the stage body is
// not re-executed.
void run_stage(RunManifest& manifest, const std::string& manifest_path, const std::string& name,
               const std::vector<std::string>& inputs, const std::vector<std::string>& outputs,
               const std::string& config_digest, const std::function<void()>& body) {
  std::map<std::string, std::string> input_digests;
  for (const std::string& path : inputs) {
    if (!file_exists(path)) {
      throw InputError("stage " + name + ": missing input " + path);
    }
    input_digests[path] = digest_hex(fnv1a64_file(path));
  }

  auto it = manifest.stages.find(name);
  bool can_skip = it != manifest.stages.end() && it->second.config_digest == config_digest &&
                  it->second.inputs == input_digests;
  if (can_skip) {
    for (const std::string& path : outputs) {
      auto rec = it->second.outputs.find(path);
      if (rec == it->second.outputs.end() || !file_exists(path) ||
          digest_hex(fnv1a64_file(path)) != rec->second) {
        can_skip = false;
        break;
      }
    }
  }
  if (can_skip) {
    it->second.skipped = true;
    std::cerr << "[" << name << "] up to date, skipped\n";
    write_text_file(manifest_path, serialize_manifest(manifest));
    return;
  }

  auto start = std::chrono::steady_clock::now();
  body();
  auto stop = std::chrono::steady_clock::now();

  StageRecord record;
  record.inputs = std::move(input_digests);
  record.config_digest = config_digest;
  record.wall_ms = std::chrono::duration<double, std::milli>(stop - start).count();
  record.skipped = false;
  for (const std::string& path : outputs) {
    if (!file_exists(path)) {
      throw InputError("stage " + name + ": did not produce output " + path);
    }
    record.outputs[path] = digest_hex(fnv1a64_file(path));
  }
  manifest.stages[name] = std::move(record);
  std::cerr << "[" << name << "] done in " << format_double(manifest.stages[name].wall_ms, 1)
            << " ms\n";
  write_text_file(manifest_path, serialize_manifest(manifest));
}

// Lazily loaded pipeline inputs; stages share loads within one run.
struct PipelineState {
  std::string taxonomy_file;
  std::string streams_file;
  std::string gt_file;
  std::string gt_events_file;
  std::string split_file;

  std::optional<LabelSpace> space_cache;
  std::optional<StreamSet> streams_cache;
  std::optional<std::vector<GroundTruth>> gt_cache;
  std::optional<std::vector<EventRecord>> gt_events_cache;
  std::optional<SplitManifest> split_cache;

  const LabelSpace& space() {
    if (!space_cache) space_cache = load_taxonomy(taxonomy_file);
    return *space_cache;
  }
  const StreamSet& streams() {
    if (!streams_cache) streams_cache = StreamSet(load_streams(streams_file));
    return *streams_cache;
  }
  const std::vector<GroundTruth>& ground_truth() {
    if (!gt_cache) gt_cache = load_ground_truth(gt_file, space().num_classes());
    return *gt_cache;
  }
  const std::vector<EventRecord>& gt_events() {
    if (!gt_events_cache) gt_events_cache = load_events_csv(gt_events_file);
    return *gt_events_cache;
  }
  const SplitManifest& split() {
    if (!split_cache) split_cache = load_split(split_file);
    return *split_cache;
  }
};

std::vector<std::string> videos_for_split(const SplitManifest& split, const std::string& which) {
  if (which == "train") return split.train;
  if (which == "val") return split.val;
  if (which == "test") return split.test;
  std::vector<std::string> all = split.train;
  all.insert(all.end(), split.val.begin(), split.val.end());
  all.insert(all.end(), split.test.begin(), split.test.end());
  return all;
}

}  // namespace

void stage_synth(const PipelineConfig& cfg, const std::string& out_dir) {
  LabelSpace space =
      cfg.taxonomy_path.empty() ? default_label_space() : load_taxonomy(cfg.taxonomy_path);
  SynthConfig synth_cfg = cfg.synth;
  if (synth_cfg.pathology_profiles.empty()) {
    synth_cfg.pathology_profiles = default_synth_config(space).pathology_profiles;
  }
  if (synth_cfg.stick_fractions.empty() && space.num_regions() == 5) {
    synth_cfg.stick_fractions = default_synth_config(space).stick_fractions;
  }
  std::size_t workers = resolve_workers(cfg.workers);
  SynthCorpus corpus = generate_corpus(synth_cfg, space, workers);
  save_taxonomy(space, join_path(out_dir, "taxonomy.txt"));
  save_streams(corpus.streams, join_path(out_dir, "streams.jsonl"));
  save_ground_truth(corpus.ground_truth, join_path(out_dir, "gt.jsonl"));
  save_events_csv(corpus.gt_events, join_path(out_dir, "gt_events.csv"));
  save_split(corpus.split, join_path(out_dir, "split.json"));
  write_text_file(join_path(out_dir, "synth_config.json"), serialize_synth_config(synth_cfg));
}

void stage_train_heads(const std::string& features_path, const std::string& labels_path,
                       const std::string& specs_path, const std::string& out_path,
                       std::size_t workers) {
  FeatureMatrix features = load_features(features_path);

  // Labels define both the training targets and the (video, frame) identity
  // of each feature row: videos sorted by id, frames ascending.
  nlohmann::json specs_json;
  try {
    specs_json = nlohmann::json::parse(read_text_file(specs_path));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("head specs: ") + e.what());
  }
  if (!specs_json.is_array() || specs_json.empty()) {
    throw InputError("head specs: expected a non-empty JSON array");
  }

  // infer C from the labels file
  int num_classes = 0;
  {
    std::istringstream in(read_text_file(labels_path));
    std::string line;
    while (std::getline(in, line)) {
      auto t = trim(line);
      if (t.empty()) continue;
      nlohmann::json record = nlohmann::json::parse(t);
      for (int c : record.at("labels").get<std::vector<int>>()) {
        num_classes = std::max(num_classes, c + 1);
      }
    }
  }
  if (num_classes == 0) throw InputError("head specs: labels file has no labels");
  std::vector<GroundTruth> gts = load_ground_truth(labels_path, num_classes);

  std::size_t total_rows = 0;
  for (const GroundTruth& gt : gts) total_rows += gt.frame_count();
  if (total_rows != features.rows()) {
    throw InputError("train-heads: feature rows (" + std::to_string(features.rows()) +
                     ") do not match labeled frames (" + std::to_string(total_rows) + ")");
  }

  LabelMatrix labels(total_rows, static_cast<std::size_t>(num_classes));
  std::size_t row = 0;
  for (const GroundTruth& gt : gts) {
    for (std::size_t t = 0; t < gt.frame_count(); ++t, ++row) {
      for (int c = 0; c < num_classes; ++c) {
        labels.at(row, static_cast<std::size_t>(c)) = gt.labels.at(t, static_cast<std::size_t>(c));
      }
    }
  }

  struct Job {
    int backbone_id;
    int model_id;
    HeadSpec spec;
  };
  std::vector<Job> jobs;
  for (const auto& s : specs_json) {
    Job job;
    job.backbone_id = s.value("backbone_id", 0);
    job.model_id = s.value("model_id", static_cast<int>(jobs.size()));
    std::string arch = s.value("arch", "linear");
    if (arch == "linear") job.spec.arch = HeadArch::linear;
    else if (arch == "mlp") job.spec.arch = HeadArch::mlp;
    else throw InputError("head specs: unknown arch '" + arch + "'");
    job.spec.hidden = s.value("hidden", 16);
    job.spec.learning_rate = s.value("lr", 0.5);
    job.spec.epochs = s.value("epochs", 200);
    job.spec.seed = s.value("seed", static_cast<std::uint64_t>(jobs.size() + 1));
    if (s.contains("loss")) {
      const auto& l = s.at("loss");
      std::string type = l.value("type", "bce");
      if (type == "bce") job.spec.loss.kind = LossKind::bce_pos_weight;
      else if (type == "focal") job.spec.loss.kind = LossKind::focal;
      else if (type == "asymmetric") job.spec.loss.kind = LossKind::asymmetric;
      else throw InputError("head specs: unknown loss '" + type + "'");
      if (l.contains("pos_weight")) {
        const auto& pw = l.at("pos_weight");
        if (pw.is_string() && pw.get<std::string>() == "auto") {
          job.spec.loss.pos_weight = auto_pos_weight(labels);
        } else if (pw.is_number()) {
          job.spec.loss.pos_weight.assign(static_cast<std::size_t>(num_classes),
                                          pw.get<double>());
        } else {
          job.spec.loss.pos_weight = pw.get<std::vector<double>>();
        }
      }
      job.spec.loss.gamma = l.value("gamma", job.spec.loss.gamma);
      job.spec.loss.gamma_pos = l.value("gamma_pos", job.spec.loss.gamma_pos);
      job.spec.loss.gamma_neg = l.value("gamma_neg", job.spec.loss.gamma_neg);
      job.spec.loss.clip = l.value("clip", job.spec.loss.clip);
    }
    jobs.push_back(std::move(job));
  }

  std::vector<ProbMatrix> predictions(jobs.size());
  parallel_for(jobs.size(), workers, [&](std::size_t i) {
    TrainResult trained = train_head(features, labels, jobs[i].spec);
    for (int c : trained.skipped_classes) {
      std::cerr << "train-heads: head " << i << " skipped class " << c
                << " (no positive frames)\n";
    }
    predictions[i] = predict_head(trained.params, features);
  });

  std::vector<ProbStream> streams;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    std::size_t offset = 0;
    for (const GroundTruth& gt : gts) {
      ProbStream stream;
      stream.video_id = gt.video_id;
      stream.source = {jobs[i].backbone_id, jobs[i].model_id, false};
      stream.probs = ProbMatrix(gt.frame_count(), static_cast<std::size_t>(num_classes));
      for (std::size_t t = 0; t < gt.frame_count(); ++t) {
        for (int c = 0; c < num_classes; ++c) {
          stream.probs.at(t, static_cast<std::size_t>(c)) =
              predictions[i].at(offset + t, static_cast<std::size_t>(c));
        }
      }
      offset += gt.frame_count();
      validate_stream(stream);
      streams.push_back(std::move(stream));
    }
  }
  save_streams(streams, out_path);
}

RunManifest run_pipeline(const PipelineConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  const std::string manifest_path = join_path(out_dir, "manifest.json");
  RunManifest manifest;
  if (file_exists(manifest_path)) {
    manifest = parse_manifest(read_text_file(manifest_path));
    if (manifest.tool_version != kToolVersion) manifest.stages.clear();
  }
  manifest.tool_version = kToolVersion;
  manifest.seed = cfg.seed;

  const std::size_t workers = resolve_workers(cfg.workers);
  const std::string config_text = serialize_pipeline_config(cfg);
  const std::string config_digest = digest_hex(fnv1a64(config_text));
  write_text_file(join_path(out_dir, "config_resolved.json"), config_text);

  PipelineState state;
  const bool heads_stage = !cfg.features_path.empty();
  state.taxonomy_file =
      cfg.use_synth ? join_path(out_dir, "taxonomy.txt") : cfg.taxonomy_path;
  state.streams_file = cfg.use_synth ? join_path(out_dir, "streams.jsonl")
                       : heads_stage && cfg.streams_path.empty()
                           ? join_path(out_dir, "head_streams.jsonl")
                           : cfg.streams_path;
  state.gt_file = cfg.use_synth ? join_path(out_dir, "gt.jsonl") : cfg.gt_path;
  state.gt_events_file =
      cfg.use_synth ? join_path(out_dir, "gt_events.csv") : cfg.gt_events_path;
  state.split_file = cfg.use_synth ? join_path(out_dir, "split.json") : cfg.split_path;

  if (cfg.use_synth) {
    std::vector<std::string> inputs;
    if (!cfg.taxonomy_path.empty()) inputs.push_back(cfg.taxonomy_path);
    run_stage(manifest, manifest_path, "synth", inputs,
              {state.taxonomy_file, state.streams_file, state.gt_file, state.gt_events_file,
               state.split_file, join_path(out_dir, "synth_config.json")},
              config_digest, [&] { stage_synth(cfg, out_dir); });
  }

  if (heads_stage) {
    run_stage(manifest, manifest_path, "train-heads",
              {cfg.features_path, cfg.feature_labels_path, cfg.head_specs_path},
              {join_path(out_dir, "head_streams.jsonl")}, config_digest, [&] {
                stage_train_heads(cfg.features_path, cfg.feature_labels_path,
                                  cfg.head_specs_path, join_path(out_dir, "head_streams.jsonl"),
                                  workers);
              });
  }

  const std::string weights_raw = join_path(out_dir, "weights_raw.json");
  const std::string weights_file = join_path(out_dir, "weights.json");
  const std::string tune_file = join_path(out_dir, "tune_report.json");
  const std::string events_file = join_path(out_dir, "events.csv");

  run_stage(manifest, manifest_path, "fuse-weights",
            {state.streams_file, state.gt_file, state.split_file, state.taxonomy_file},
            {weights_raw}, config_digest, [&] {
              FusionWeights weights = compute_weights_from_validation(
                  state.streams(), state.ground_truth(), state.split().val, state.space());
              save_weights(weights, weights_raw);
            });

  run_stage(manifest, manifest_path, "calibrate",
            {weights_raw, state.streams_file, state.gt_file, state.split_file,
             state.taxonomy_file},
            {weights_file}, config_digest, [&] {
              FusionWeights weights = load_weights(weights_raw);
              weights.temperature = 1.0;
              std::vector<ProbStream> fused_val =
                  fuse_videos(state.streams(), state.split().val, weights, workers);
              std::vector<GroundTruth> val_gts =
                  CorpusView{&state.space(), &state.streams(), &state.ground_truth(),
                             &state.gt_events(), state.split()}
                      .gts_for(state.split().val);
              std::vector<double> thresholds(
                  static_cast<std::size_t>(state.space().num_classes()), 0.5);
              weights.temperature = grid_search_temperature(
                  fused_val, val_gts, state.space(), cfg.tune.temperature_grid, thresholds,
                  cfg.tune.calibration_objective);
              save_weights(weights, weights_file);
            });

  run_stage(manifest, manifest_path, "tune",
            {weights_file, state.streams_file, state.gt_file, state.gt_events_file,
             state.split_file, state.taxonomy_file},
            {tune_file}, config_digest, [&] {
              const LabelSpace& space = state.space();
              FusionWeights weights = load_weights(weights_file);
              CorpusView corpus{&space, &state.streams(), &state.ground_truth(),
                                &state.gt_events(), state.split()};
              std::vector<ProbStream> calibrated_val =
                  fuse_videos(state.streams(), state.split().val, weights, workers);
              std::vector<GroundTruth> val_gts = corpus.gts_for(state.split().val);
              std::vector<EventRecord> val_events = corpus.events_for(state.split().val);

              TuneReport report;
              report.temperature = weights.temperature;
              report.objective = cfg.tune.objective;
              DecodeConfig decode_cfg = cfg.decode;
              decode_cfg.thresholds = init_thresholds_f1(calibrated_val, val_gts, space);
              if (cfg.tune.run_param_grid) {
                decode_cfg = tune_decode_params(cfg.tune.grid, decode_cfg, calibrated_val,
                                                val_events, space, cfg.tune.objective, workers);
              }
              if (cfg.tune.run_local_search) {
                LocalSearchOptions search = cfg.tune.search;
                search.workers = workers;
                LocalSearchResult refined = local_search_thresholds(
                    decode_cfg.thresholds, decode_cfg, calibrated_val, val_events, space,
                    cfg.tune.objective, search);
                decode_cfg.thresholds = refined.thresholds;
                report.trace = refined.trace;
              }
              report.thresholds = decode_cfg.thresholds;
              report.decode = decode_cfg;
              save_tune_report(report, tune_file);
            });

  run_stage(manifest, manifest_path, "decode",
            {weights_file, tune_file, state.streams_file, state.split_file,
             state.taxonomy_file},
            {events_file}, config_digest, [&] {
              const LabelSpace& space = state.space();
              FusionWeights base_weights = load_weights(weights_file);
              TuneReport report = load_tune_report(tune_file, space);
              FusionWeights weights =
                  arm_weights(cfg.arm, base_weights, state.streams(), space);
              weights.temperature = base_weights.temperature;
              DecodeConfig decode_cfg = arm_decode_config(cfg.arm, report.decode);
              std::vector<std::string> videos =
                  videos_for_split(state.split(), cfg.decode_split);
              std::vector<ProbStream> fused =
                  fuse_videos(state.streams(), videos, weights, workers);
              std::vector<EventRecord> events = decode_all(fused, space, decode_cfg, workers);
              save_events_csv(events, events_file);
            });

  run_stage(manifest, manifest_path, "eval",
            {events_file, state.gt_events_file, state.split_file, state.taxonomy_file},
            {join_path(out_dir, "eval_report.txt"), join_path(out_dir, "eval_report.json")},
            config_digest, [&] {
              const LabelSpace& space = state.space();
              std::vector<EventRecord> preds = load_events_csv(events_file);
              CorpusView corpus{&space, nullptr, nullptr, &state.gt_events(), state.split()};
              std::vector<EventRecord> gt =
                  corpus.events_for(videos_for_split(state.split(), cfg.decode_split));
              EvalReport report = evaluate_events(preds, gt, space);
              write_text_file(join_path(out_dir, "eval_report.txt"),
                              eval_report_text(report, space));
              write_text_file(join_path(out_dir, "eval_report.json"),
                              eval_report_json(report, space));
            });

  return manifest;
}

std::vector<AblationRow> run_ablation_from_config(const PipelineConfig& cfg,
                                                  const std::string& out_dir) {
  fs::create_directories(out_dir);
  const std::size_t workers = resolve_workers(cfg.workers);

  // Make sure inputs exist (building synth outputs if configured), then work
  // in memory.
  std::string taxonomy_file =
      cfg.use_synth ? join_path(out_dir, "taxonomy.txt") : cfg.taxonomy_path;
  std::string streams_file = cfg.use_synth ? join_path(out_dir, "streams.jsonl") : cfg.streams_path;
  std::string gt_file = cfg.use_synth ? join_path(out_dir, "gt.jsonl") : cfg.gt_path;
  std::string gt_events_file =
      cfg.use_synth ? join_path(out_dir, "gt_events.csv") : cfg.gt_events_path;
  std::string split_file = cfg.use_synth ? join_path(out_dir, "split.json") : cfg.split_path;
  if (cfg.use_synth && (!file_exists(streams_file) || !file_exists(gt_file) ||
                        !file_exists(taxonomy_file) || !file_exists(gt_events_file) ||
                        !file_exists(split_file))) {
    stage_synth(cfg, out_dir);
  }

  LabelSpace space = load_taxonomy(taxonomy_file);
  StreamSet streams(load_streams(streams_file));
  std::vector<GroundTruth> gts = load_ground_truth(gt_file, space.num_classes());
  std::vector<EventRecord> gt_events = load_events_csv(gt_events_file);
  SplitManifest split = load_split(split_file);

  CorpusView corpus{&space, &streams, &gts, &gt_events, split};
  FusionWeights weighted =
      compute_weights_from_validation(streams, gts, split.val, space);

  TuneStageOptions options = cfg.tune;
  options.run_local_search = false;  // arms share the cheap deterministic recipe
  options.run_param_grid = false;
  std::vector<AblationRow> rows =
      run_ablation(corpus, weighted, cfg.decode, options, workers);

  write_text_file(join_path(out_dir, "ablation.txt"), ablation_table_text(rows));
  write_text_file(join_path(out_dir, "ablation.csv"), ablation_table_csv(rows));
  return rows;
}

}  // namespace endoev
