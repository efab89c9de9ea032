#include "endoev/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <json.hpp>

#include "endoev/util.hpp"

namespace endoev {

namespace {

constexpr double kWeightSumTol = 1e-9;
constexpr double kLogitEps = 1e-6;

}  // namespace

void FusionWeights::validate() const {
  // Group alpha by (backbone, class) and check each convex-combination sum.
  std::map<int, std::vector<const std::vector<double>*>> by_backbone;
  for (const auto& [key, weights] : alpha) {
    for (double w : weights) {
      if (!(w >= 0.0) || !std::isfinite(w)) {
        throw InputError("fusion weights: negative or non-finite alpha");
      }
    }
    by_backbone[key.first].push_back(&weights);
  }
  for (const auto& [backbone_id, weight_rows] : by_backbone) {
    std::size_t num_classes = weight_rows.front()->size();
    for (const auto* row : weight_rows) {
      if (row->size() != num_classes) {
        throw InputError("fusion weights: inconsistent class counts in alpha");
      }
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
      double sum = 0.0;
      for (const auto* row : weight_rows) sum += (*row)[c];
      if (std::abs(sum - 1.0) > kWeightSumTol) {
        throw InputError("fusion weights: alpha for backbone " + std::to_string(backbone_id) +
                         " class " + std::to_string(c) + " sums to " + std::to_string(sum));
      }
    }
  }
  double beta_sum = 0.0;
  for (const auto& [backbone_id, w] : beta) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw InputError("fusion weights: negative or non-finite beta");
    }
    beta_sum += w;
  }
  if (!beta.empty() && std::abs(beta_sum - 1.0) > kWeightSumTol) {
    throw InputError("fusion weights: beta sums to " + std::to_string(beta_sum));
  }
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw InputError("fusion weights: temperature must be finite and > 0");
  }
}

ModelWeights compute_model_weights(const ValidationAps& val_aps, int num_classes) {
  if (val_aps.empty()) throw InputError("compute_model_weights: no validation APs");
  std::map<int, std::vector<std::pair<int, const std::vector<std::optional<double>>*>>> by_backbone;
  for (const auto& [key, aps] : val_aps) {
    if (static_cast<int>(aps.size()) != num_classes) {
      throw InputError("compute_model_weights: AP vector length mismatch");
    }
    for (const auto& ap : aps) {
      if (ap && (*ap < 0.0 || !std::isfinite(*ap))) {
        throw InputError("compute_model_weights: negative AP");
      }
    }
    by_backbone[key.first].emplace_back(key.second, &aps);
  }

  ModelWeights alpha;
  for (const auto& [backbone_id, models] : by_backbone) {
    const std::size_t num_models = models.size();
    for (int c = 0; c < num_classes; ++c) {
      double sum = 0.0;
      for (const auto& [model_id, aps] : models) {
        const auto& ap = (*aps)[static_cast<std::size_t>(c)];
        sum += ap.value_or(0.0);
      }
      for (const auto& [model_id, aps] : models) {
        auto& row = alpha[{backbone_id, model_id}];
        if (row.empty()) row.assign(static_cast<std::size_t>(num_classes), 0.0);
        const auto& ap = (*aps)[static_cast<std::size_t>(c)];
        row[static_cast<std::size_t>(c)] =
            sum > 0.0 ? ap.value_or(0.0) / sum : 1.0 / static_cast<double>(num_models);
      }
    }
  }
  return alpha;
}

ProbStream fuse_models(const std::vector<const ProbStream*>& model_streams,
                       const ModelWeights& alpha, int backbone_id) {
  if (model_streams.empty()) throw InputError("fuse_models: no streams");
  const ProbStream& first = *model_streams.front();
  std::map<int, const ProbStream*> by_model;
  for (const ProbStream* s : model_streams) {
    if (s->source.backbone_id != backbone_id) {
      throw InputError("fuse_models: stream from backbone " +
                       std::to_string(s->source.backbone_id) + ", expected " +
                       std::to_string(backbone_id));
    }
    if (s->video_id != first.video_id || s->frame_count() != first.frame_count() ||
        s->class_count() != first.class_count()) {
      throw InputError("fuse_models: misaligned streams for video " + first.video_id);
    }
    by_model[s->source.model_id] = s;
  }

  ProbStream out;
  out.video_id = first.video_id;
  out.source = {backbone_id, StreamSource::kFusedId, false};
  out.probs = ProbMatrix(first.frame_count(), first.class_count());
  bool any_weight = false;
  for (const auto& [key, weights] : alpha) {
    if (key.first != backbone_id) continue;
    any_weight = true;
    auto it = by_model.find(key.second);
    if (it == by_model.end()) {
      throw InputError("fuse_models: alpha references missing model " +
                       std::to_string(key.second) + " of backbone " +
                       std::to_string(backbone_id));
    }
    if (weights.size() != first.class_count()) {
      throw InputError("fuse_models: alpha class count mismatch");
    }
    const auto& src = it->second->probs.data();
    auto& dst = out.probs.data();
    const std::size_t num_classes = first.class_count();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      dst[i] += weights[i % num_classes] * src[i];
    }
  }
  if (!any_weight) {
    throw InputError("fuse_models: no alpha entries for backbone " + std::to_string(backbone_id));
  }
  return out;
}

std::map<int, double> compute_backbone_weights(const std::map<int, double>& val_frame_maps) {
  if (val_frame_maps.empty()) throw InputError("compute_backbone_weights: no backbones");
  double sum = 0.0;
  for (const auto& [backbone_id, value] : val_frame_maps) {
    if (value < 0.0 || !std::isfinite(value)) {
      throw InputError("compute_backbone_weights: negative mAP for backbone " +
                       std::to_string(backbone_id));
    }
    sum += value;
  }
  std::map<int, double> beta;
  for (const auto& [backbone_id, value] : val_frame_maps) {
    beta[backbone_id] =
        sum > 0.0 ? value / sum : 1.0 / static_cast<double>(val_frame_maps.size());
  }
  return beta;
}

ProbStream fuse_backbones(const std::vector<const ProbStream*>& backbone_streams,
                          const std::map<int, double>& beta) {
  if (backbone_streams.empty()) throw InputError("fuse_backbones: no streams");
  const ProbStream& first = *backbone_streams.front();
  std::map<int, const ProbStream*> by_backbone;
  for (const ProbStream* s : backbone_streams) {
    if (s->video_id != first.video_id || s->frame_count() != first.frame_count() ||
        s->class_count() != first.class_count()) {
      throw InputError("fuse_backbones: misaligned streams for video " + first.video_id);
    }
    by_backbone[s->source.backbone_id] = s;
  }
  ProbStream out;
  out.video_id = first.video_id;
  out.source = {StreamSource::kFusedId, StreamSource::kFusedId, false};
  out.probs = ProbMatrix(first.frame_count(), first.class_count());
  for (const auto& [backbone_id, weight] : beta) {
    auto it = by_backbone.find(backbone_id);
    if (it == by_backbone.end()) {
      throw InputError("fuse_backbones: beta references missing backbone " +
                       std::to_string(backbone_id));
    }
    const auto& src = it->second->probs.data();
    auto& dst = out.probs.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      dst[i] += weight * src[i];
    }
  }
  return out;
}

double calibrate_prob(double p, double temperature) {
  double clamped = std::clamp(p, kLogitEps, 1.0 - kLogitEps);
  double logit = std::log(clamped / (1.0 - clamped));
  return 1.0 / (1.0 + std::exp(-logit / temperature));
}

ProbStream calibrate(const ProbStream& stream, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw InputError("calibrate: temperature must be finite and > 0");
  }
  ProbStream out = stream;
  for (double& p : out.probs.data()) {
    p = calibrate_prob(p, temperature);
  }
  return out;
}

ProbStream fuse_video(const StreamSet& streams, const std::string& video_id,
                      const FusionWeights& weights) {
  std::set<int> backbones;
  for (const auto& [key, unused] : weights.alpha) backbones.insert(key.first);

  std::vector<ProbStream> backbone_level;
  for (int b : backbones) {
    std::vector<const ProbStream*> model_streams;
    for (const auto& [key, unused] : weights.alpha) {
      if (key.first != b) continue;
      model_streams.push_back(&streams.get(video_id, {b, key.second, false}));
    }
    backbone_level.push_back(fuse_models(model_streams, weights.alpha, b));
  }
  std::vector<const ProbStream*> ptrs;
  for (const ProbStream& s : backbone_level) ptrs.push_back(&s);
  ProbStream fused = fuse_backbones(ptrs, weights.beta);
  return calibrate(fused, weights.temperature);
}

FusionWeights uniform_weights(const StreamSet& streams, int num_classes) {
  FusionWeights weights;
  auto backbones = streams.backbone_ids();
  if (backbones.empty()) throw InputError("uniform_weights: no head streams");
  for (int b : backbones) {
    auto models = streams.model_ids(b);
    for (int m : models) {
      weights.alpha[{b, m}].assign(static_cast<std::size_t>(num_classes),
                                   1.0 / static_cast<double>(models.size()));
    }
    weights.beta[b] = 1.0 / static_cast<double>(backbones.size());
  }
  weights.temperature = 1.0;
  return weights;
}

std::string serialize_weights(const FusionWeights& weights) {
  nlohmann::ordered_json root;
  root["temperature"] = weights.temperature;
  nlohmann::ordered_json alpha(nlohmann::json::value_t::object);
  for (const auto& [key, row] : weights.alpha) {
    alpha[std::to_string(key.first)][std::to_string(key.second)] = row;
  }
  root["alpha"] = std::move(alpha);
  nlohmann::ordered_json beta(nlohmann::json::value_t::object);
  for (const auto& [backbone_id, w] : weights.beta) {
    beta[std::to_string(backbone_id)] = w;
  }
  root["beta"] = std::move(beta);
  return root.dump(2) + "\n";
}

FusionWeights parse_weights(const std::string& text) {
  FusionWeights weights;
  try {
    nlohmann::json root = nlohmann::json::parse(text);
    weights.temperature = root.at("temperature").get<double>();
    for (const auto& [backbone_key, models] : root.at("alpha").items()) {
      int b = std::stoi(backbone_key);
      for (const auto& [model_key, row] : models.items()) {
        weights.alpha[{b, std::stoi(model_key)}] = row.get<std::vector<double>>();
      }
    }
    for (const auto& [backbone_key, value] : root.at("beta").items()) {
      weights.beta[std::stoi(backbone_key)] = value.get<double>();
    }
  } catch (const std::exception& e) {
    throw InputError(std::string("weights file: ") + e.what());
  }
  weights.validate();
  return weights;
}

void save_weights(const FusionWeights& weights, const std::string& path) {
  write_text_file(path, serialize_weights(weights));
}

FusionWeights load_weights(const std::string& path) {
  return parse_weights(read_text_file(path));
}

}  // namespace endoev
