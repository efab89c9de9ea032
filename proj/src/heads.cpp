#include "endoev/heads.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "endoev/util.hpp"

namespace endoev {

namespace {

constexpr double kLogEps = 1e-12;

double sigmoid(double z) {
  if (z >= 0.0) {
    return 1.0 / (1.0 + std::exp(-z));
  }
  double e = std::exp(z);
  return e / (1.0 + e);
}

double safe_log(double x) { return std::log(std::max(x, kLogEps)); }

// Loss and d/dz for one class. p = sigmoid(z).
void loss_term(const LossSpec& spec, double p, bool positive, double pos_weight, double& loss,
               double& grad) {
  const double dp_dz = p * (1.0 - p);
  switch (spec.kind) {
    case LossKind::bce_pos_weight: {
      if (positive) {
        loss = -pos_weight * safe_log(p);
        grad = pos_weight * (p - 1.0);
      } else {
        loss = -safe_log(1.0 - p);
        grad = p;
      }
      return;
    }
    case LossKind::focal: {
      const double g = spec.gamma;
      if (positive) {
        loss = -std::pow(1.0 - p, g) * safe_log(p);
        grad = g * p * std::pow(1.0 - p, g) * safe_log(p) - std::pow(1.0 - p, g + 1.0);
      } else {
        loss = -std::pow(p, g) * safe_log(1.0 - p);
        grad = -g * std::pow(p, g) * (1.0 - p) * safe_log(1.0 - p) + std::pow(p, g + 1.0);
      }
      return;
    }
    case LossKind::asymmetric: {
      if (positive) {
        const double g = spec.gamma_pos;
        loss = -std::pow(1.0 - p, g) * safe_log(p);
        grad = g * p * std::pow(1.0 - p, g) * safe_log(p) - std::pow(1.0 - p, g + 1.0);
      } else {
        const double g = spec.gamma_neg;
        const double pm = std::max(p - spec.clip, 0.0);
        if (pm <= 0.0) {
          loss = 0.0;
          grad = 0.0;
          return;
        }
        const double log_nm = safe_log(1.0 - pm);
        loss = -std::pow(pm, g) * log_nm;
        grad = (-g * std::pow(pm, g) * log_nm / pm + std::pow(pm, g) / (1.0 - pm)) * dp_dz;
      }
      return;
    }
  }
}

}  // namespace

std::pair<double, std::vector<double>> loss_value_and_gradient(
    const LossSpec& spec, const std::vector<double>& logits,
    const std::vector<std::uint8_t>& targets) {
  if (logits.size() != targets.size()) {
    throw InputError("loss_value_and_gradient: logits/targets length mismatch");
  }
  if (!spec.pos_weight.empty() && spec.pos_weight.size() != logits.size()) {
    throw InputError("loss_value_and_gradient: pos_weight length mismatch");
  }
  double total = 0.0;
  std::vector<double> grad(logits.size(), 0.0);
  for (std::size_t c = 0; c < logits.size(); ++c) {
    if (!std::isfinite(logits[c])) {
      throw InputError("loss_value_and_gradient: non-finite logit");
    }
    double w = spec.pos_weight.empty() ? 1.0 : spec.pos_weight[c];
    double p = sigmoid(logits[c]);
    double loss = 0.0, g = 0.0;
    loss_term(spec, p, targets[c] != 0, w, loss, g);
    total += loss;
    grad[c] = g;
  }
  return {total, std::move(grad)};
}

std::vector<double> auto_pos_weight(const LabelMatrix& labels) {
  std::vector<double> weights(labels.cols(), 1.0);
  for (std::size_t c = 0; c < labels.cols(); ++c) {
    long long pos = 0;
    for (std::size_t t = 0; t < labels.rows(); ++t) pos += labels.at(t, c) != 0;
    long long neg = static_cast<long long>(labels.rows()) - pos;
    if (pos > 0) {
      weights[c] = std::clamp(static_cast<double>(neg) / static_cast<double>(pos), 1.0, 100.0);
    }
  }
  return weights;
}

namespace {

struct Workspace {
  std::vector<double> hidden;      // H
  std::vector<double> hidden_raw;  // H, pre-activation
  std::vector<double> logits;      // C
};

void forward(const HeadParams& params, const double* x, Workspace& ws) {
  const int d = params.input_dim;
  const int c_out = params.output_dim;
  if (params.arch == HeadArch::linear) {
    for (int c = 0; c < c_out; ++c) {
      double z = params.b2[static_cast<std::size_t>(c)];
      const double* row = params.w2.data() + static_cast<std::size_t>(c) * d;
      for (int k = 0; k < d; ++k) z += row[k] * x[k];
      ws.logits[static_cast<std::size_t>(c)] = z;
    }
    return;
  }
  const int h = params.hidden_dim;
  for (int j = 0; j < h; ++j) {
    double a = params.b1[static_cast<std::size_t>(j)];
    const double* row = params.w1.data() + static_cast<std::size_t>(j) * d;
    for (int k = 0; k < d; ++k) a += row[k] * x[k];
    ws.hidden_raw[static_cast<std::size_t>(j)] = a;
    ws.hidden[static_cast<std::size_t>(j)] = a > 0.0 ? a : 0.0;
  }
  for (int c = 0; c < c_out; ++c) {
    double z = params.b2[static_cast<std::size_t>(c)];
    const double* row = params.w2.data() + static_cast<std::size_t>(c) * h;
    for (int j = 0; j < h; ++j) z += row[j] * ws.hidden[static_cast<std::size_t>(j)];
    ws.logits[static_cast<std::size_t>(c)] = z;
  }
}

}  // namespace

TrainResult train_head(const FeatureMatrix& features, const LabelMatrix& labels,
                       const HeadSpec& spec) {
  if (features.rows() != labels.rows()) {
    throw InputError("train_head: feature/label row mismatch");
  }
  if (features.rows() == 0) throw InputError("train_head: empty training set");
  const int samples = static_cast<int>(features.rows());
  const int d = static_cast<int>(features.cols());
  const int c_out = static_cast<int>(labels.cols());
  const int h = spec.arch == HeadArch::mlp ? spec.hidden : 0;
  if (spec.arch == HeadArch::mlp && spec.hidden < 1) {
    throw InputError("train_head: mlp hidden width must be >= 1");
  }

  TrainResult result;
  std::vector<std::uint8_t> trainable(static_cast<std::size_t>(c_out), 1);
  for (int c = 0; c < c_out; ++c) {
    long long pos = 0;
    for (std::size_t t = 0; t < labels.rows(); ++t) {
      pos += labels.at(t, static_cast<std::size_t>(c)) != 0;
    }
    if (pos == 0) {
      trainable[static_cast<std::size_t>(c)] = 0;
      result.skipped_classes.push_back(c);
    }
  }

  HeadParams params;
  params.arch = spec.arch;
  params.input_dim = d;
  params.hidden_dim = h;
  params.output_dim = c_out;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> init(0.0, 0.05);
  if (spec.arch == HeadArch::mlp) {
    params.w1.resize(static_cast<std::size_t>(h) * d);
    params.b1.assign(static_cast<std::size_t>(h), 0.0);
    params.w2.resize(static_cast<std::size_t>(c_out) * h);
    for (double& v : params.w1) v = init(rng);
    for (double& v : params.w2) v = init(rng);
  } else {
    params.w2.resize(static_cast<std::size_t>(c_out) * d);
    for (double& v : params.w2) v = init(rng);
  }
  params.b2.assign(static_cast<std::size_t>(c_out), 0.0);

  LossSpec loss_spec = spec.loss;
  if (loss_spec.kind == LossKind::bce_pos_weight && !loss_spec.pos_weight.empty() &&
      loss_spec.pos_weight.size() != static_cast<std::size_t>(c_out)) {
    throw InputError("train_head: pos_weight length mismatch");
  }

  Workspace ws;
  ws.hidden.assign(static_cast<std::size_t>(h), 0.0);
  ws.hidden_raw.assign(static_cast<std::size_t>(h), 0.0);
  ws.logits.assign(static_cast<std::size_t>(c_out), 0.0);

  std::vector<double> gw1(params.w1.size()), gb1(params.b1.size());
  std::vector<double> gw2(params.w2.size()), gb2(params.b2.size());
  std::vector<double> dlogits(static_cast<std::size_t>(c_out));
  std::vector<double> dhidden(static_cast<std::size_t>(h));

  const double scale = 1.0 / static_cast<double>(samples);
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    std::fill(gw1.begin(), gw1.end(), 0.0);
    std::fill(gb1.begin(), gb1.end(), 0.0);
    std::fill(gw2.begin(), gw2.end(), 0.0);
    std::fill(gb2.begin(), gb2.end(), 0.0);
    double epoch_loss = 0.0;

    for (int i = 0; i < samples; ++i) {
      const double* x = features.row(static_cast<std::size_t>(i));
      forward(params, x, ws);
      for (int c = 0; c < c_out; ++c) {
        if (!trainable[static_cast<std::size_t>(c)]) {
          dlogits[static_cast<std::size_t>(c)] = 0.0;
          continue;
        }
        double w = loss_spec.pos_weight.empty() ? 1.0 : loss_spec.pos_weight[static_cast<std::size_t>(c)];
        double p = sigmoid(ws.logits[static_cast<std::size_t>(c)]);
        double loss = 0.0, g = 0.0;
        loss_term(loss_spec, p, labels.at(static_cast<std::size_t>(i), static_cast<std::size_t>(c)) != 0,
                  w, loss, g);
        epoch_loss += loss;
        dlogits[static_cast<std::size_t>(c)] = g;
      }
      if (spec.arch == HeadArch::linear) {
        for (int c = 0; c < c_out; ++c) {
          double g = dlogits[static_cast<std::size_t>(c)];
          if (g == 0.0) continue;
          double* grow = gw2.data() + static_cast<std::size_t>(c) * d;
          for (int k = 0; k < d; ++k) grow[k] += g * x[k];
          gb2[static_cast<std::size_t>(c)] += g;
        }
      } else {
        std::fill(dhidden.begin(), dhidden.end(), 0.0);
        for (int c = 0; c < c_out; ++c) {
          double g = dlogits[static_cast<std::size_t>(c)];
          if (g == 0.0) continue;
          double* grow = gw2.data() + static_cast<std::size_t>(c) * h;
          const double* wrow = params.w2.data() + static_cast<std::size_t>(c) * h;
          for (int j = 0; j < h; ++j) {
            grow[j] += g * ws.hidden[static_cast<std::size_t>(j)];
            dhidden[static_cast<std::size_t>(j)] += g * wrow[j];
          }
          gb2[static_cast<std::size_t>(c)] += g;
        }
        for (int j = 0; j < h; ++j) {
          if (ws.hidden_raw[static_cast<std::size_t>(j)] <= 0.0) continue;
          double g = dhidden[static_cast<std::size_t>(j)];
          if (g == 0.0) continue;
          double* grow = gw1.data() + static_cast<std::size_t>(j) * d;
          for (int k = 0; k < d; ++k) grow[k] += g * x[k];
          gb1[static_cast<std::size_t>(j)] += g;
        }
      }
    }

    if (!std::isfinite(epoch_loss)) {
      throw InputError("train_head: loss became non-finite at epoch " + std::to_string(epoch));
    }
    result.final_loss = epoch_loss * scale;
    result.loss_history.push_back(result.final_loss);
    const double step = spec.learning_rate * scale;
    for (std::size_t k = 0; k < params.w1.size(); ++k) params.w1[k] -= step * gw1[k];
    for (std::size_t k = 0; k < params.b1.size(); ++k) params.b1[k] -= step * gb1[k];
    for (std::size_t k = 0; k < params.w2.size(); ++k) params.w2[k] -= step * gw2[k];
    for (std::size_t k = 0; k < params.b2.size(); ++k) params.b2[k] -= step * gb2[k];
  }

  if (spec.epochs == 0) {
    // report the initial loss without updating anything
    double total = 0.0;
    for (int i = 0; i < samples; ++i) {
      forward(params, features.row(static_cast<std::size_t>(i)), ws);
      for (int c = 0; c < c_out; ++c) {
        if (!trainable[static_cast<std::size_t>(c)]) continue;
        double w = loss_spec.pos_weight.empty() ? 1.0 : loss_spec.pos_weight[static_cast<std::size_t>(c)];
        double p = sigmoid(ws.logits[static_cast<std::size_t>(c)]);
        double loss = 0.0, g = 0.0;
        loss_term(loss_spec, p, labels.at(static_cast<std::size_t>(i), static_cast<std::size_t>(c)) != 0,
                  w, loss, g);
        total += loss;
      }
    }
    result.final_loss = total * scale;
  }

  result.params = std::move(params);
  return result;
}

FeatureMatrix load_features(const std::string& path) {
  std::string raw = read_text_file(path);
  const std::size_t header = 4 + 4 + 8 + 8;
  if (raw.size() < header || raw.compare(0, 4, "EEVF") != 0) {
    throw InputError(path + ": not a feature container (missing EEVF header)");
  }
  auto read_u64 = [&](std::size_t offset) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(raw[offset + i])) << (8 * i);
    }
    return v;
  };
  std::uint64_t rows = read_u64(8);
  std::uint64_t cols = read_u64(16);
  if (raw.size() != header + rows * cols * 4) {
    throw InputError(path + ": feature container size does not match header");
  }
  FeatureMatrix features(rows, cols);
  const char* cursor = raw.data() + header;
  for (double& v : features.data()) {
    float f;
    std::memcpy(&f, cursor, 4);
    cursor += 4;
    v = static_cast<double>(f);
  }
  return features;
}

void save_features(const FeatureMatrix& features, const std::string& path) {
  std::string out;
  out.reserve(24 + features.data().size() * 4);
  out += "EEVF";
  std::uint32_t version = 1;
  out.append(reinterpret_cast<const char*>(&version), 4);
  std::uint64_t rows = features.rows();
  std::uint64_t cols = features.cols();
  out.append(reinterpret_cast<const char*>(&rows), 8);
  out.append(reinterpret_cast<const char*>(&cols), 8);
  for (double v : features.data()) {
    float f = static_cast<float>(v);
    out.append(reinterpret_cast<const char*>(&f), 4);
  }
  write_text_file(path, out);
}

ProbMatrix predict_head(const HeadParams& params, const FeatureMatrix& features) {
  if (static_cast<int>(features.cols()) != params.input_dim) {
    throw InputError("predict_head: feature dimension mismatch");
  }
  ProbMatrix probs(features.rows(), static_cast<std::size_t>(params.output_dim));
  Workspace ws;
  ws.hidden.assign(static_cast<std::size_t>(params.hidden_dim), 0.0);
  ws.hidden_raw.assign(static_cast<std::size_t>(params.hidden_dim), 0.0);
  ws.logits.assign(static_cast<std::size_t>(params.output_dim), 0.0);
  for (std::size_t t = 0; t < features.rows(); ++t) {
    forward(params, features.row(t), ws);
    for (int c = 0; c < params.output_dim; ++c) {
      probs.at(t, static_cast<std::size_t>(c)) = sigmoid(ws.logits[static_cast<std::size_t>(c)]);
    }
  }
  return probs;
}

}  // namespace endoev
