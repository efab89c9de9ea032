#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "endoev/streams.hpp"

namespace endoev {

// (backbone, model) -> per-class weight vector. For every (backbone, class)
// the model weights are non-negative and sum to one.
using ModelWeights = std::map<std::pair<int, int>, std::vector<double>>;

struct FusionWeights {
  ModelWeights alpha;
  std::map<int, double> beta;  // per-backbone weight, non-negative, sums to one
  double temperature = 1.0;

  void validate() const;
};

// Per-(backbone, model) validation APs, one optional entry per class (absent
// means the class had no positives for that head).
using ValidationAps = std::map<std::pair<int, int>, std::vector<std::optional<double>>>;

// Normalizes validation APs into model weights, per backbone and class.
// Absent APs count as zero; if every AP for a (backbone, class) is zero the
// weights fall back to uniform 1/M.
ModelWeights compute_model_weights(const ValidationAps& val_aps, int num_classes);

// Convex per-class combination of one backbone's model streams for one video.
ProbStream fuse_models(const std::vector<const ProbStream*>& model_streams,
                       const ModelWeights& alpha, int backbone_id);

// Normalizes per-backbone validation frame mAPs into backbone weights, with
// the same uniform fallback when all are zero.
std::map<int, double> compute_backbone_weights(const std::map<int, double>& val_frame_maps);

ProbStream fuse_backbones(const std::vector<const ProbStream*>& backbone_streams,
                          const std::map<int, double>& beta);

// Temperature scaling: probabilities are clamped to [eps, 1-eps] with
// eps = 1e-6, mapped through logit, divided by T and squashed back. T = 1 is
// the identity away from the clamp region.
ProbStream calibrate(const ProbStream& stream, double temperature);
double calibrate_prob(double p, double temperature);

// Full two-level fusion of one video's head streams: per-backbone model
// fusion, then backbone fusion, then calibration.
ProbStream fuse_video(const StreamSet& streams, const std::string& video_id,
                      const FusionWeights& weights);

// Uniform weights over the sources present in the set (ablation arm).
FusionWeights uniform_weights(const StreamSet& streams, int num_classes);

std::string serialize_weights(const FusionWeights& weights);
FusionWeights parse_weights(const std::string& text);
void save_weights(const FusionWeights& weights, const std::string& path);
FusionWeights load_weights(const std::string& path);

}  // namespace endoev
