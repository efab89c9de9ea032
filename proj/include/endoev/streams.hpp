#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "endoev/taxonomy.hpp"

namespace endoev {

// Dense row-major T x C grid; frames are rows.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  T& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  T* row(std::size_t r) { return data_.data() + r * cols_; }
  const T* row(std::size_t r) const { return data_.data() + r * cols_; }
  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }
  bool operator==(const Grid&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using ProbMatrix = Grid<double>;
using LabelMatrix = Grid<std::uint8_t>;

// Identifies where a probability stream came from. backbone_id / model_id are
// >= 0 for raw head outputs; kFusedId marks the corresponding level as fused
// away. `tta` marks streams produced by flip-style prediction averaging.
struct StreamSource {
  static constexpr int kFusedId = -1;

  int backbone_id = kFusedId;
  int model_id = kFusedId;
  bool tta = false;

  bool is_head() const { return backbone_id >= 0 && model_id >= 0; }
  auto operator<=>(const StreamSource&) const = default;
};

struct ProbStream {
  std::string video_id;
  StreamSource source;
  ProbMatrix probs;  // T x C, every entry finite and in [0,1]

  std::size_t frame_count() const { return probs.rows(); }
  std::size_t class_count() const { return probs.cols(); }
};

struct GroundTruth {
  std::string video_id;
  LabelMatrix labels;  // T x C multi-hot

  std::size_t frame_count() const { return labels.rows(); }
  std::size_t class_count() const { return labels.cols(); }
};

// Half-open frame interval [start_frame, end_frame).
struct EventRecord {
  std::string video_id;
  int class_id = 0;
  long long start_frame = 0;
  long long end_frame = 0;
  double score = 0.0;
};

// Validation: throws InputError on any violated invariant. Ingestion never
// repairs values in place.
void validate_stream(const ProbStream& stream);
void validate_ground_truth(const GroundTruth& gt, const LabelSpace& space);
void validate_events(const std::vector<EventRecord>& events);

// Elementwise mean of two aligned streams; output source is marked as
// flip-averaged (tta). Throws on any shape mismatch.
ProbStream average_streams(const ProbStream& a, const ProbStream& b);

// JSONL ingestion. Records may arrive in any order; streams are assembled per
// (video, backbone, model) and every video's sources must agree on length and
// class count. Errors carry the offending line number.
std::vector<ProbStream> load_streams(const std::string& path);
void save_streams(const std::vector<ProbStream>& streams, const std::string& path);

std::vector<GroundTruth> load_ground_truth(const std::string& path, int num_classes);
void save_ground_truth(const std::vector<GroundTruth>& gts, const std::string& path);

std::vector<EventRecord> load_events_csv(const std::string& path);
std::string serialize_events_csv(const std::vector<EventRecord>& events);
void save_events_csv(const std::vector<EventRecord>& events, const std::string& path);

// Canonical event order: (video_id, class_id, start_frame).
void sort_events(std::vector<EventRecord>& events);

// Contiguous positive runs of each class become one event apiece (score 1.0).
std::vector<EventRecord> ground_truth_to_events(const GroundTruth& gt);

// Lookup helpers over a loaded stream collection.
class StreamSet {
 public:
  StreamSet() = default;
  explicit StreamSet(std::vector<ProbStream> streams);

  const std::vector<ProbStream>& all() const { return streams_; }
  std::vector<std::string> video_ids() const;          // sorted, unique
  std::vector<int> backbone_ids() const;               // sorted, unique
  std::vector<int> model_ids(int backbone_id) const;   // sorted, unique
  const ProbStream* find(const std::string& video_id, const StreamSource& source) const;
  const ProbStream& get(const std::string& video_id, const StreamSource& source) const;
  std::size_t frame_count(const std::string& video_id) const;

 private:
  std::vector<ProbStream> streams_;
  std::map<std::pair<std::string, StreamSource>, std::size_t> index_;
};

}  // namespace endoev
