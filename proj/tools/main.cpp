// endoev — event detection pipeline for capsule-endoscopy-style probability
// streams: synthetic corpus generation, head training, validation-guided
// fusion, calibration, threshold tuning, constrained temporal decoding, and
// temporal-mAP evaluation.

#include <filesystem>
#include <iostream>
#include <set>

#include <CLI11.hpp>

#include "endoev/parallel.hpp"
#include "endoev/pipeline.hpp"
#include "endoev/util.hpp"

namespace {

using namespace endoev;

std::string join(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

PipelineConfig config_or_default(const std::string& config_path) {
  if (config_path.empty()) {
    PipelineConfig cfg = parse_pipeline_config("{\"synth\": {}}");
    return cfg;
  }
  return load_pipeline_config(config_path);
}

struct CommonFlags {
  std::string config_path;
  std::string out_dir = "out";
  std::size_t workers = 0;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void apply_overrides(PipelineConfig& cfg, const CommonFlags& flags) {
  if (flags.workers > 0) cfg.workers = flags.workers;
  if (flags.seed_set) {
    cfg.seed = flags.seed;
    cfg.synth.seed = flags.seed;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capsule-video temporal event detection pipeline"};
  app.require_subcommand(1);

  // run
  CommonFlags run_flags;
  auto* cmd_run = app.add_subcommand("run", "execute the full pipeline with stage caching");
  cmd_run->add_option("--config", run_flags.config_path, "pipeline config JSON");
  cmd_run->add_option("--out", run_flags.out_dir, "output directory")->required();
  cmd_run->add_option("--workers", run_flags.workers, "worker threads (0 = auto)");
  cmd_run->add_option("--seed", run_flags.seed, "seed override")
      ->each([&](const std::string&) { run_flags.seed_set = true; });

  // synth
  CommonFlags synth_flags;
  std::string synth_taxonomy;
  auto* cmd_synth = app.add_subcommand("synth", "generate the synthetic corpus");
  cmd_synth->add_option("--config", synth_flags.config_path, "pipeline config JSON");
  cmd_synth->add_option("--out", synth_flags.out_dir, "output directory")->required();
  cmd_synth->add_option("--seed", synth_flags.seed, "seed override")
      ->each([&](const std::string&) { synth_flags.seed_set = true; });
  cmd_synth->add_option("--taxonomy", synth_taxonomy, "taxonomy file (default: bundled)");
  cmd_synth->add_option("--workers", synth_flags.workers, "worker threads (0 = auto)");

  // train-heads
  std::string th_features, th_labels, th_specs, th_out;
  std::size_t th_workers = 0;
  auto* cmd_heads = app.add_subcommand("train-heads", "train ensemble heads on a feature matrix");
  cmd_heads->add_option("--features", th_features, "feature container (EEVF)")->required();
  cmd_heads->add_option("--labels", th_labels, "frame labels JSONL")->required();
  cmd_heads->add_option("--specs", th_specs, "head spec JSON array")->required();
  cmd_heads->add_option("--out", th_out, "output streams JSONL")->required();
  cmd_heads->add_option("--workers", th_workers, "worker threads (0 = auto)");

  // fuse-weights
  std::string fw_streams, fw_gt, fw_split, fw_taxonomy, fw_out;
  auto* cmd_fw = app.add_subcommand("fuse-weights",
                                    "compute validation-guided model and backbone weights");
  cmd_fw->add_option("--streams", fw_streams, "head streams JSONL")->required();
  cmd_fw->add_option("--ground-truth", fw_gt, "frame ground truth JSONL")->required();
  cmd_fw->add_option("--split", fw_split, "split manifest JSON")->required();
  cmd_fw->add_option("--taxonomy", fw_taxonomy, "taxonomy file")->required();
  cmd_fw->add_option("--out", fw_out, "output weights JSON")->required();

  // calibrate
  std::string cal_weights, cal_streams, cal_gt, cal_split, cal_taxonomy, cal_out;
  std::vector<double> cal_grid{0.5, 0.75, 1.0, 1.5, 2.0};
  std::string cal_objective = "f1";
  std::size_t cal_workers = 0;
  auto* cmd_cal = app.add_subcommand("calibrate", "grid-search the fusion temperature");
  cmd_cal->add_option("--weights", cal_weights, "weights JSON from fuse-weights")->required();
  cmd_cal->add_option("--streams", cal_streams, "head streams JSONL")->required();
  cmd_cal->add_option("--ground-truth", cal_gt, "frame ground truth JSONL")->required();
  cmd_cal->add_option("--split", cal_split, "split manifest JSON")->required();
  cmd_cal->add_option("--taxonomy", cal_taxonomy, "taxonomy file")->required();
  cmd_cal->add_option("--out", cal_out, "output weights JSON with temperature")->required();
  cmd_cal->add_option("--temperature-grid", cal_grid, "candidate temperatures");
  cmd_cal->add_option("--objective", cal_objective, "f1 | frame-map");
  cmd_cal->add_option("--workers", cal_workers, "worker threads (0 = auto)");

  // tune
  std::string tn_weights, tn_streams, tn_gt, tn_events, tn_split, tn_taxonomy, tn_out;
  std::string tn_objective = "mean";
  int tn_max_iters = 50;
  double tn_delta0 = 0.05;
  bool tn_no_local = false, tn_no_grid = false;
  std::size_t tn_workers = 0;
  auto* cmd_tune = app.add_subcommand("tune", "select thresholds and decode parameters");
  cmd_tune->add_option("--weights", tn_weights, "calibrated weights JSON")->required();
  cmd_tune->add_option("--streams", tn_streams, "head streams JSONL")->required();
  cmd_tune->add_option("--ground-truth", tn_gt, "frame ground truth JSONL")->required();
  cmd_tune->add_option("--gt-events", tn_events, "ground-truth events CSV")->required();
  cmd_tune->add_option("--split", tn_split, "split manifest JSON")->required();
  cmd_tune->add_option("--taxonomy", tn_taxonomy, "taxonomy file")->required();
  cmd_tune->add_option("--out", tn_out, "output tune report JSON")->required();
  cmd_tune->add_option("--objective", tn_objective, "tmap50 | tmap95 | mean");
  cmd_tune->add_option("--max-iters", tn_max_iters, "local search cycle limit");
  cmd_tune->add_option("--delta0", tn_delta0, "initial threshold step");
  cmd_tune->add_flag("--no-local-search", tn_no_local, "skip threshold refinement");
  cmd_tune->add_flag("--no-param-grid", tn_no_grid, "skip decode parameter grid");
  cmd_tune->add_option("--workers", tn_workers, "worker threads (0 = auto)");

  // decode
  std::string dc_streams, dc_taxonomy, dc_weights, dc_tune, dc_config, dc_split_file, dc_out;
  std::string dc_arm = "full", dc_split = "test";
  int dc_backbone = 0;
  std::size_t dc_workers = 0;
  auto* cmd_decode = app.add_subcommand("decode", "fuse, calibrate and decode events");
  cmd_decode->add_option("--streams", dc_streams, "head streams JSONL")->required();
  cmd_decode->add_option("--taxonomy", dc_taxonomy, "taxonomy file")->required();
  cmd_decode->add_option("--weights", dc_weights, "calibrated weights JSON")->required();
  cmd_decode->add_option("--tune-report", dc_tune, "tune report JSON");
  cmd_decode->add_option("--decode-config", dc_config,
                         "explicit decode config JSON (alternative to --tune-report)");
  cmd_decode->add_option("--out", dc_out, "output events CSV")->required();
  cmd_decode->add_option("--arm", dc_arm,
                         "full | per-label-only | tuple-based | uniform-fusion | uniform-model | "
                         "single-backbone");
  cmd_decode->add_option("--backbone", dc_backbone, "backbone id for single-backbone arm");
  cmd_decode->add_option("--split-file", dc_split_file, "split manifest JSON");
  cmd_decode->add_option("--split", dc_split, "train | val | test | all (with --split-file)");
  cmd_decode->add_option("--workers", dc_workers, "worker threads (0 = auto)");

  // eval
  std::string ev_preds, ev_gt_events, ev_gt_frames, ev_taxonomy, ev_out_prefix;
  std::string ev_split_file, ev_split = "all";
  auto* cmd_eval = app.add_subcommand("eval", "temporal mAP report for an events CSV");
  cmd_eval->add_option("--preds", ev_preds, "predicted events CSV")->required();
  cmd_eval->add_option("--gt-events", ev_gt_events, "ground-truth events CSV");
  cmd_eval->add_option("--gt-frames", ev_gt_frames,
                       "frame ground truth JSONL (converted to events)");
  cmd_eval->add_option("--taxonomy", ev_taxonomy, "taxonomy file")->required();
  cmd_eval->add_option("--out", ev_out_prefix, "write <prefix>.txt and <prefix>.json");
  cmd_eval->add_option("--split-file", ev_split_file, "split manifest JSON");
  cmd_eval->add_option("--split", ev_split, "train | val | test | all (with --split-file)");

  // ablate
  CommonFlags ab_flags;
  auto* cmd_ablate = app.add_subcommand("ablate", "run all fusion/decoding comparison arms");
  cmd_ablate->add_option("--config", ab_flags.config_path, "pipeline config JSON");
  cmd_ablate->add_option("--out", ab_flags.out_dir, "output directory")->required();
  cmd_ablate->add_option("--workers", ab_flags.workers, "worker threads (0 = auto)");
  cmd_ablate->add_option("--seed", ab_flags.seed, "seed override")
      ->each([&](const std::string&) { ab_flags.seed_set = true; });

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_run->parsed()) {
      PipelineConfig cfg = config_or_default(run_flags.config_path);
      apply_overrides(cfg, run_flags);
      run_pipeline(cfg, run_flags.out_dir);
      std::cout << "pipeline complete: " << join(run_flags.out_dir, "manifest.json") << "\n";
    } else if (cmd_synth->parsed()) {
      PipelineConfig cfg = config_or_default(synth_flags.config_path);
      apply_overrides(cfg, synth_flags);
      if (!synth_taxonomy.empty()) cfg.taxonomy_path = synth_taxonomy;
      if (!cfg.use_synth) throw InputError("synth: config has no synth section");
      std::filesystem::create_directories(synth_flags.out_dir);
      stage_synth(cfg, synth_flags.out_dir);
      std::cout << "corpus written under " << synth_flags.out_dir << "\n";
    } else if (cmd_heads->parsed()) {
      stage_train_heads(th_features, th_labels, th_specs, th_out, resolve_workers(th_workers));
      std::cout << "head streams written to " << th_out << "\n";
    } else if (cmd_fw->parsed()) {
      LabelSpace space = load_taxonomy(fw_taxonomy);
      StreamSet streams(load_streams(fw_streams));
      auto gts = load_ground_truth(fw_gt, space.num_classes());
      SplitManifest split = load_split(fw_split);
      FusionWeights weights = compute_weights_from_validation(streams, gts, split.val, space);
      save_weights(weights, fw_out);
      std::cout << "weights written to " << fw_out << "\n";
    } else if (cmd_cal->parsed()) {
      LabelSpace space = load_taxonomy(cal_taxonomy);
      StreamSet streams(load_streams(cal_streams));
      auto gts = load_ground_truth(cal_gt, space.num_classes());
      SplitManifest split = load_split(cal_split);
      FusionWeights weights = load_weights(cal_weights);
      weights.temperature = 1.0;
      auto fused_val = fuse_videos(streams, split.val, weights, resolve_workers(cal_workers));
      std::vector<GroundTruth> val_gts;
      for (const auto& v : split.val) {
        for (const auto& gt : gts) {
          if (gt.video_id == v) val_gts.push_back(gt);
        }
      }
      std::vector<double> thresholds(static_cast<std::size_t>(space.num_classes()), 0.5);
      TemperatureObjective objective = cal_objective == "frame-map"
                                           ? TemperatureObjective::frame_map
                                           : TemperatureObjective::mean_f1;
      if (cal_objective != "f1" && cal_objective != "frame-map") {
        throw InputError("calibrate: --objective must be f1 or frame-map");
      }
      weights.temperature =
          grid_search_temperature(fused_val, val_gts, space, cal_grid, thresholds, objective);
      save_weights(weights, cal_out);
      std::cout << "temperature " << weights.temperature << " written to " << cal_out << "\n";
    } else if (cmd_tune->parsed()) {
      LabelSpace space = load_taxonomy(tn_taxonomy);
      StreamSet streams(load_streams(tn_streams));
      auto gts = load_ground_truth(tn_gt, space.num_classes());
      auto gt_events = load_events_csv(tn_events);
      SplitManifest split = load_split(tn_split);
      FusionWeights weights = load_weights(tn_weights);
      std::size_t workers = resolve_workers(tn_workers);

      CorpusView corpus{&space, &streams, &gts, &gt_events, split};
      auto calibrated_val = fuse_videos(streams, split.val, weights, workers);
      auto val_gts = corpus.gts_for(split.val);
      auto val_events = corpus.events_for(split.val);

      TuneReport report;
      report.temperature = weights.temperature;
      report.objective = parse_tune_objective(tn_objective);
      PipelineConfig defaults = config_or_default("");
      DecodeConfig decode_cfg = defaults.decode;
      decode_cfg.thresholds = init_thresholds_f1(calibrated_val, val_gts, space);
      if (!tn_no_grid) {
        decode_cfg = tune_decode_params(DecodeParamGrid{}, decode_cfg, calibrated_val, val_events,
                                        space, report.objective, workers);
      }
      if (!tn_no_local) {
        LocalSearchOptions search;
        search.delta0 = tn_delta0;
        search.max_cycles = tn_max_iters;
        search.workers = workers;
        auto refined = local_search_thresholds(decode_cfg.thresholds, decode_cfg, calibrated_val,
                                               val_events, space, report.objective, search);
        decode_cfg.thresholds = refined.thresholds;
        report.trace = refined.trace;
      }
      report.thresholds = decode_cfg.thresholds;
      report.decode = decode_cfg;
      save_tune_report(report, tn_out);
      std::cout << "tune report written to " << tn_out << "\n";
    } else if (cmd_decode->parsed()) {
      LabelSpace space = load_taxonomy(dc_taxonomy);
      StreamSet streams(load_streams(dc_streams));
      FusionWeights base_weights = load_weights(dc_weights);
      DecodeConfig decode_cfg;
      if (!dc_tune.empty()) {
        decode_cfg = load_tune_report(dc_tune, space).decode;
      } else if (!dc_config.empty()) {
        decode_cfg = parse_decode_config(read_text_file(dc_config));
      } else {
        throw InputError("decode: provide --tune-report or --decode-config");
      }
      ArmSpec arm{parse_pipeline_arm(dc_arm), dc_backbone};
      FusionWeights weights = arm_weights(arm, base_weights, streams, space);
      weights.temperature = base_weights.temperature;
      decode_cfg = arm_decode_config(arm, decode_cfg);
      std::vector<std::string> videos;
      if (!dc_split_file.empty()) {
        SplitManifest split = load_split(dc_split_file);
        if (dc_split == "train") videos = split.train;
        else if (dc_split == "val") videos = split.val;
        else if (dc_split == "test") videos = split.test;
        else if (dc_split == "all") {
          videos = split.train;
          videos.insert(videos.end(), split.val.begin(), split.val.end());
          videos.insert(videos.end(), split.test.begin(), split.test.end());
        } else {
          throw InputError("decode: --split must be train|val|test|all");
        }
      } else {
        videos = streams.video_ids();
      }
      std::size_t workers = resolve_workers(dc_workers);
      auto fused = fuse_videos(streams, videos, weights, workers);
      auto events = decode_all(fused, space, decode_cfg, workers);
      save_events_csv(events, dc_out);
      std::cout << events.size() << " events written to " << dc_out << "\n";
    } else if (cmd_eval->parsed()) {
      LabelSpace space = load_taxonomy(ev_taxonomy);
      std::vector<EventRecord> preds = load_events_csv(ev_preds);
      std::vector<EventRecord> gt;
      if (!ev_gt_events.empty()) {
        gt = load_events_csv(ev_gt_events);
      } else if (!ev_gt_frames.empty()) {
        for (const auto& g : load_ground_truth(ev_gt_frames, space.num_classes())) {
          auto events = ground_truth_to_events(g);
          gt.insert(gt.end(), events.begin(), events.end());
        }
      } else {
        throw InputError("eval: provide --gt-events or --gt-frames");
      }
      if (!ev_split_file.empty()) {
        SplitManifest split = load_split(ev_split_file);
        std::vector<std::string> keep;
        if (ev_split == "train") keep = split.train;
        else if (ev_split == "val") keep = split.val;
        else if (ev_split == "test") keep = split.test;
        else if (ev_split == "all") {
          keep = split.train;
          keep.insert(keep.end(), split.val.begin(), split.val.end());
          keep.insert(keep.end(), split.test.begin(), split.test.end());
        } else {
          throw InputError("eval: --split must be train|val|test|all");
        }
        std::set<std::string> wanted(keep.begin(), keep.end());
        std::erase_if(gt, [&](const EventRecord& e) { return !wanted.count(e.video_id); });
        std::erase_if(preds, [&](const EventRecord& e) { return !wanted.count(e.video_id); });
      }
      EvalReport report = evaluate_events(preds, gt, space);
      std::string text = eval_report_text(report, space);
      std::cout << text;
      if (!ev_out_prefix.empty()) {
        write_text_file(ev_out_prefix + ".txt", text);
        write_text_file(ev_out_prefix + ".json", eval_report_json(report, space));
      }
    } else if (cmd_ablate->parsed()) {
      PipelineConfig cfg = config_or_default(ab_flags.config_path);
      apply_overrides(cfg, ab_flags);
      auto rows = run_ablation_from_config(cfg, ab_flags.out_dir);
      std::cout << ablation_table_text(rows);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
