#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "endoev/streams.hpp"

namespace endoev {

enum class HeadArch { linear, mlp };
enum class LossKind { bce_pos_weight, focal, asymmetric };

struct LossSpec {
  LossKind kind = LossKind::bce_pos_weight;
  std::vector<double> pos_weight;  // per class; empty means 1.0 everywhere
  double gamma = 2.0;              // focal
  double gamma_pos = 0.0;          // asymmetric
  double gamma_neg = 4.0;          // asymmetric
  double clip = 0.05;              // asymmetric probability shift m
};

struct HeadSpec {
  HeadArch arch = HeadArch::linear;
  int hidden = 16;  // mlp only
  LossSpec loss;
  double learning_rate = 0.5;
  int epochs = 200;
  std::uint64_t seed = 1;
};

// Per-sample loss over all classes and its gradient with respect to the
// logits. Logs are clamped at 1e-12. The asymmetric loss shifts the negative
// branch probability to max(p - clip, 0).
std::pair<double, std::vector<double>> loss_value_and_gradient(const LossSpec& spec,
                                                               const std::vector<double>& logits,
                                                               const std::vector<std::uint8_t>& targets);

struct HeadParams {
  HeadArch arch = HeadArch::linear;
  int input_dim = 0;
  int hidden_dim = 0;  // 0 for linear
  int output_dim = 0;
  // linear: w2 is C x D, b2 is C; mlp: w1 is H x D, b1 is H, w2 is C x H
  std::vector<double> w1, b1, w2, b2;
};

struct TrainResult {
  HeadParams params;
  double final_loss = 0.0;
  std::vector<double> loss_history;  // mean loss per epoch, before each update
  std::vector<int> skipped_classes;  // classes without positive samples
};

using FeatureMatrix = Grid<double>;

// Deterministic full-batch gradient descent from a seeded random init.
// Classes without a single positive frame are masked out of the loss and
// reported. Throws on a non-finite loss.
TrainResult train_head(const FeatureMatrix& features, const LabelMatrix& labels,
                       const HeadSpec& spec);

// Forward pass; probabilities are the logistic of the affine (or one hidden
// layer, ReLU) map.
ProbMatrix predict_head(const HeadParams& params, const FeatureMatrix& features);

// Derives the per-class BCE pos_weight from label counts: (#neg / #pos)
// clamped to [1, 100]; classes without positives get 1.
std::vector<double> auto_pos_weight(const LabelMatrix& labels);

// Feature container: "EEVF" magic, u32 version, u64 rows, u64 cols, then
// row-major float32 little-endian values. Rows align with the frame order of
// the companion labels file (videos sorted by id, frames ascending).
FeatureMatrix load_features(const std::string& path);
void save_features(const FeatureMatrix& features, const std::string& path);

}  // namespace endoev
