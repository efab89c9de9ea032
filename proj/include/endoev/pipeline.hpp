#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "endoev/decode.hpp"
#include "endoev/fusion.hpp"
#include "endoev/heads.hpp"
#include "endoev/metrics.hpp"
#include "endoev/streams.hpp"
#include "endoev/synth.hpp"
#include "endoev/taxonomy.hpp"
#include "endoev/tuning.hpp"

namespace endoev {

inline constexpr const char* kToolVersion = "0.1.0";

// Validation-guided weights: per-(backbone, model, class) frame AP on the
// validation videos drives the model weights; the frame mAP of each
// backbone's fused stream drives the backbone weights. Temperature stays 1.
FusionWeights compute_weights_from_validation(const StreamSet& streams,
                                              const std::vector<GroundTruth>& gts,
                                              const std::vector<std::string>& val_videos,
                                              const LabelSpace& space);

// Fused + calibrated stream per listed video, in list order.
std::vector<ProbStream> fuse_videos(const StreamSet& streams,
                                    const std::vector<std::string>& videos,
                                    const FusionWeights& weights, std::size_t workers = 1);

enum class PipelineArm {
  full,            // weighted models + weighted backbones, full decoding
  per_label_only,  // no smoothing/constraints/morphology
  tuple_based,     // full decoding, tuple-based event extraction
  uniform_fusion,  // uniform model + backbone weights
  uniform_model,   // uniform model weights, weighted backbones
  single_backbone  // one backbone only (weighted models within it)
};
const char* to_string(PipelineArm arm);
PipelineArm parse_pipeline_arm(std::string_view token);

struct ArmSpec {
  PipelineArm arm = PipelineArm::full;
  int backbone_id = 0;  // single_backbone only
  std::string label() const;
};

// Applies an arm to the baseline weights/decode config.
FusionWeights arm_weights(const ArmSpec& arm, const FusionWeights& weighted,
                          const StreamSet& streams, const LabelSpace& space);
DecodeConfig arm_decode_config(const ArmSpec& arm, const DecodeConfig& full_cfg);

struct EvalThresholdReport {
  double iou = 0.5;
  std::map<std::string, APResult> per_video;
  std::map<int, double> per_class;  // pooled across videos
  double overall = 0.0;
  std::vector<std::string> skipped_videos;
};

struct EvalReport {
  std::vector<EvalThresholdReport> thresholds;
};

EvalReport evaluate_events(const std::vector<EventRecord>& preds,
                           const std::vector<EventRecord>& gts, const LabelSpace& space,
                           const std::vector<double>& ious = {0.5, 0.95});
std::string eval_report_text(const EvalReport& report, const LabelSpace& space);
std::string eval_report_json(const EvalReport& report, const LabelSpace& space);

struct AblationRow {
  std::string label;
  double tmap50 = 0.0;
  double tmap95 = 0.0;
};

std::string ablation_table_text(const std::vector<AblationRow>& rows);
std::string ablation_table_csv(const std::vector<AblationRow>& rows);

// In-memory corpus bundle used by the pipeline stages and the ablation.
struct CorpusView {
  const LabelSpace* space = nullptr;
  const StreamSet* streams = nullptr;
  const std::vector<GroundTruth>* ground_truth = nullptr;
  const std::vector<EventRecord>* gt_events = nullptr;
  SplitManifest split;

  std::vector<GroundTruth> gts_for(const std::vector<std::string>& videos) const;
  std::vector<EventRecord> events_for(const std::vector<std::string>& videos) const;
};

struct TuneStageOptions {
  std::vector<double> temperature_grid{0.5, 0.75, 1.0, 1.5, 2.0};
  TemperatureObjective calibration_objective = TemperatureObjective::mean_f1;
  TuneObjective objective = TuneObjective::mean_both;
  bool run_param_grid = true;
  bool run_local_search = true;
  DecodeParamGrid grid;
  LocalSearchOptions search;
};

// Runs one arm end to end on the corpus: temperature search, F1 threshold
// init (plus optional refinement for the full arm), decode on eval_videos,
// temporal mAP at 0.5/0.95.
AblationRow run_arm(const ArmSpec& arm, const CorpusView& corpus,
                    const FusionWeights& weighted, const DecodeConfig& decode_cfg,
                    const TuneStageOptions& options,
                    const std::vector<std::string>& eval_videos, std::size_t workers);

// All seven comparison arms on the validation split.
std::vector<AblationRow> run_ablation(const CorpusView& corpus, const FusionWeights& weighted,
                                      const DecodeConfig& decode_cfg,
                                      const TuneStageOptions& options, std::size_t workers);

// ---- staged CLI pipeline --------------------------------------------------

struct PipelineConfig {
  std::uint64_t seed = 7;
  std::size_t workers = 0;  // 0 = env or hardware

  std::string taxonomy_path;  // empty + synth => default taxonomy
  bool use_synth = true;
  SynthConfig synth;

  // external inputs (use_synth == false)
  std::string streams_path;
  std::string gt_path;
  std::string gt_events_path;
  std::string split_path;

  // optional head-training stage
  std::string features_path;
  std::string feature_labels_path;
  std::string head_specs_path;

  TuneStageOptions tune;
  DecodeConfig decode;
  ArmSpec arm;
  std::string decode_split = "test";  // train|val|test|all
};

PipelineConfig parse_pipeline_config(const std::string& text);
PipelineConfig load_pipeline_config(const std::string& path);
std::string serialize_pipeline_config(const PipelineConfig& cfg);

struct StageRecord {
  std::map<std::string, std::string> inputs;   // path -> digest
  std::map<std::string, std::string> outputs;  // path -> digest
  std::string config_digest;
  double wall_ms = 0.0;
  bool skipped = false;
};

struct RunManifest {
  std::string tool_version = kToolVersion;
  std::uint64_t seed = 0;
  std::map<std::string, StageRecord> stages;
};

std::string serialize_manifest(const RunManifest& manifest);
RunManifest parse_manifest(const std::string& text);

// Executes synth -> (train-heads) -> fuse-weights -> calibrate -> tune ->
// decode -> eval under out_dir, skipping stages whose recorded input/output
// digests still match. Returns the manifest that was written.
RunManifest run_pipeline(const PipelineConfig& cfg, const std::string& out_dir);

// Runs the ablation against the same inputs (building them if needed) and
// writes ablation.txt / ablation.csv under out_dir.
std::vector<AblationRow> run_ablation_from_config(const PipelineConfig& cfg,
                                                  const std::string& out_dir);

// Individual stage entry points used by the CLI subcommands.
void stage_synth(const PipelineConfig& cfg, const std::string& out_dir);
void stage_train_heads(const std::string& features_path, const std::string& labels_path,
                       const std::string& specs_path, const std::string& out_path,
                       std::size_t workers);

}  // namespace endoev
