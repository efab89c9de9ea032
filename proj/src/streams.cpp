#include "endoev/streams.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <json.hpp>

#include "endoev/util.hpp"

namespace endoev {

void validate_stream(const ProbStream& stream) {
  if (stream.video_id.empty()) throw InputError("stream has empty video_id");
  const auto& data = stream.probs.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    double p = data[i];
    if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
      std::size_t t = i / stream.class_count();
      std::size_t c = i % stream.class_count();
      throw InputError("stream " + stream.video_id + ": probability out of [0,1] at frame " +
                       std::to_string(t) + " class " + std::to_string(c));
    }
  }
}

void validate_ground_truth(const GroundTruth& gt, const LabelSpace& space) {
  if (static_cast<int>(gt.class_count()) != space.num_classes()) {
    throw InputError("ground truth " + gt.video_id + ": class count " +
                     std::to_string(gt.class_count()) + " does not match taxonomy C=" +
                     std::to_string(space.num_classes()));
  }
  for (std::size_t t = 0; t < gt.frame_count(); ++t) {
    int regions_on = 0;
    for (int c = 0; c < space.num_classes(); ++c) {
      std::uint8_t v = gt.labels.at(t, static_cast<std::size_t>(c));
      if (v > 1) {
        throw InputError("ground truth " + gt.video_id + ": non-binary label at frame " +
                         std::to_string(t));
      }
      if (v && space.is_region(c)) ++regions_on;
    }
    if (regions_on > 1) {
      throw InputError("ground truth " + gt.video_id + ": more than one region positive at frame " +
                       std::to_string(t));
    }
  }
}

void validate_events(const std::vector<EventRecord>& events) {
  std::map<std::pair<std::string, int>, std::vector<std::pair<long long, long long>>> by_key;
  for (const EventRecord& ev : events) {
    if (ev.start_frame < 0 || ev.end_frame <= ev.start_frame) {
      throw InputError("event " + ev.video_id + "/" + std::to_string(ev.class_id) +
                       ": invalid interval [" + std::to_string(ev.start_frame) + "," +
                       std::to_string(ev.end_frame) + ")");
    }
    if (!std::isfinite(ev.score) || ev.score < 0.0 || ev.score > 1.0) {
      throw InputError("event " + ev.video_id + "/" + std::to_string(ev.class_id) +
                       ": score out of [0,1]");
    }
    by_key[{ev.video_id, ev.class_id}].emplace_back(ev.start_frame, ev.end_frame);
  }
  for (auto& [key, intervals] : by_key) {
    std::sort(intervals.begin(), intervals.end());
    for (std::size_t i = 1; i < intervals.size(); ++i) {
      if (intervals[i].first < intervals[i - 1].second) {
        throw InputError("events " + key.first + "/" + std::to_string(key.second) +
                         ": overlapping intervals");
      }
    }
  }
}

ProbStream average_streams(const ProbStream& a, const ProbStream& b) {
  if (a.video_id != b.video_id) {
    throw InputError("average_streams: video mismatch " + a.video_id + " vs " + b.video_id);
  }
  if (a.frame_count() != b.frame_count() || a.class_count() != b.class_count()) {
    throw InputError("average_streams: shape mismatch for video " + a.video_id);
  }
  ProbStream out;
  out.video_id = a.video_id;
  out.source.backbone_id = a.source.backbone_id == b.source.backbone_id
                               ? a.source.backbone_id
                               : StreamSource::kFusedId;
  out.source.model_id =
      a.source.model_id == b.source.model_id ? a.source.model_id : StreamSource::kFusedId;
  out.source.tta = true;
  out.probs = ProbMatrix(a.frame_count(), a.class_count());
  const auto& da = a.probs.data();
  const auto& db = b.probs.data();
  auto& dst = out.probs.data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i] = 0.5 * (da[i] + db[i]);
  }
  return out;
}

namespace {

std::string format_prob(double p) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", p);
  return std::string(buf);
}

[[noreturn]] void line_fail(const std::string& path, std::size_t line_no,
                            const std::string& what) {
  throw InputError(path + ":" + std::to_string(line_no) + ": " + what);
}

}  // namespace

std::vector<ProbStream> load_streams(const std::string& path) {
  std::string text = read_text_file(path);
  std::istringstream in(text);

  struct Pending {
    std::vector<std::pair<long long, std::vector<double>>> frames;
  };
  std::map<std::pair<std::string, StreamSource>, Pending> pending;
  std::size_t class_count = 0;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view trimmed = trim(line);
    if (trimmed.empty()) continue;
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(trimmed);
    } catch (const nlohmann::json::exception& e) {
      line_fail(path, line_no, std::string("malformed JSON: ") + e.what());
    }
    if (!record.is_object() || !record.contains("video_id") || !record.contains("backbone_id") ||
        !record.contains("model_id") || !record.contains("frame_index") ||
        !record.contains("probs")) {
      line_fail(path, line_no,
                "record needs video_id, backbone_id, model_id, frame_index, probs");
    }
    StreamSource source;
    std::string video_id;
    long long frame_index = 0;
    std::vector<double> probs;
    try {
      video_id = record.at("video_id").get<std::string>();
      source.backbone_id = record.at("backbone_id").get<int>();
      source.model_id = record.at("model_id").get<int>();
      source.tta = record.value("tta", false);
      frame_index = record.at("frame_index").get<long long>();
      probs = record.at("probs").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      line_fail(path, line_no, std::string("bad field type: ") + e.what());
    }
    if (video_id.empty()) line_fail(path, line_no, "empty video_id");
    if (frame_index < 0) line_fail(path, line_no, "negative frame_index");
    if (probs.empty()) line_fail(path, line_no, "empty probs array");
    for (double p : probs) {
      if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
        line_fail(path, line_no, "probability out of [0,1]: " + format_prob(p));
      }
    }
    if (class_count == 0) {
      class_count = probs.size();
    } else if (probs.size() != class_count) {
      line_fail(path, line_no, "class count " + std::to_string(probs.size()) +
                                   " differs from earlier records (" +
                                   std::to_string(class_count) + ")");
    }
    pending[{video_id, source}].frames.emplace_back(frame_index, std::move(probs));
  }

  // Assemble, checking each stream is a dense 0..T-1 frame range and that all
  // sources of a video agree on T.
  std::map<std::string, std::size_t> video_length;
  std::vector<ProbStream> streams;
  streams.reserve(pending.size());
  for (auto& [key, bucket] : pending) {
    auto& frames = bucket.frames;
    std::sort(frames.begin(), frames.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (std::size_t i = 0; i < frames.size(); ++i) {
      if (frames[i].first != static_cast<long long>(i)) {
        throw InputError(path + ": stream " + key.first + " (backbone " +
                         std::to_string(key.second.backbone_id) + ", model " +
                         std::to_string(key.second.model_id) + ") has missing or duplicate frame " +
                         std::to_string(i));
      }
    }
    auto [it, inserted] = video_length.emplace(key.first, frames.size());
    if (!inserted && it->second != frames.size()) {
      throw InputError(path + ": video " + key.first + " has sources of lengths " +
                       std::to_string(it->second) + " and " + std::to_string(frames.size()));
    }
    ProbStream stream;
    stream.video_id = key.first;
    stream.source = key.second;
    stream.probs = ProbMatrix(frames.size(), class_count);
    for (std::size_t t = 0; t < frames.size(); ++t) {
      std::copy(frames[t].second.begin(), frames[t].second.end(), stream.probs.row(t));
    }
    streams.push_back(std::move(stream));
  }
  return streams;
}

void save_streams(const std::vector<ProbStream>& streams, const std::string& path) {
  std::vector<const ProbStream*> order;
  order.reserve(streams.size());
  for (const ProbStream& s : streams) order.push_back(&s);
  std::sort(order.begin(), order.end(), [](const ProbStream* a, const ProbStream* b) {
    return std::tie(a->video_id, a->source) < std::tie(b->video_id, b->source);
  });
  std::string out;
  out.reserve(streams.size() * 4096);
  for (const ProbStream* s : order) {
    for (std::size_t t = 0; t < s->frame_count(); ++t) {
      out += "{\"video_id\":\"";
      out += s->video_id;
      out += "\",\"backbone_id\":";
      out += std::to_string(s->source.backbone_id);
      out += ",\"model_id\":";
      out += std::to_string(s->source.model_id);
      if (s->source.tta) out += ",\"tta\":true";
      out += ",\"frame_index\":";
      out += std::to_string(t);
      out += ",\"probs\":[";
      const double* row = s->probs.row(t);
      for (std::size_t c = 0; c < s->class_count(); ++c) {
        if (c) out += ',';
        out += format_prob(row[c]);
      }
      out += "]}\n";
    }
  }
  write_text_file(path, out);
}

std::vector<GroundTruth> load_ground_truth(const std::string& path, int num_classes) {
  std::string text = read_text_file(path);
  std::istringstream in(text);
  std::map<std::string, std::vector<std::pair<long long, std::vector<int>>>> pending;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view trimmed = trim(line);
    if (trimmed.empty()) continue;
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(trimmed);
    } catch (const nlohmann::json::exception& e) {
      line_fail(path, line_no, std::string("malformed JSON: ") + e.what());
    }
    std::string video_id;
    long long frame_index = 0;
    std::vector<int> labels;
    try {
      video_id = record.at("video_id").get<std::string>();
      frame_index = record.at("frame_index").get<long long>();
      labels = record.at("labels").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
      line_fail(path, line_no, std::string("bad field type: ") + e.what());
    }
    if (frame_index < 0) line_fail(path, line_no, "negative frame_index");
    for (int c : labels) {
      if (c < 0 || c >= num_classes) {
        line_fail(path, line_no, "label class " + std::to_string(c) + " outside 0.." +
                                     std::to_string(num_classes - 1));
      }
    }
    pending[video_id].emplace_back(frame_index, std::move(labels));
  }

  std::vector<GroundTruth> out;
  out.reserve(pending.size());
  for (auto& [video_id, frames] : pending) {
    std::sort(frames.begin(), frames.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (std::size_t i = 0; i < frames.size(); ++i) {
      if (frames[i].first != static_cast<long long>(i)) {
        throw InputError(path + ": video " + video_id + " has missing or duplicate frame " +
                         std::to_string(i));
      }
    }
    GroundTruth gt;
    gt.video_id = video_id;
    gt.labels = LabelMatrix(frames.size(), static_cast<std::size_t>(num_classes));
    for (std::size_t t = 0; t < frames.size(); ++t) {
      for (int c : frames[t].second) {
        gt.labels.at(t, static_cast<std::size_t>(c)) = 1;
      }
    }
    out.push_back(std::move(gt));
  }
  return out;
}

void save_ground_truth(const std::vector<GroundTruth>& gts, const std::string& path) {
  std::vector<const GroundTruth*> order;
  for (const GroundTruth& gt : gts) order.push_back(&gt);
  std::sort(order.begin(), order.end(),
            [](const GroundTruth* a, const GroundTruth* b) { return a->video_id < b->video_id; });
  std::string out;
  for (const GroundTruth* gt : order) {
    for (std::size_t t = 0; t < gt->frame_count(); ++t) {
      out += "{\"video_id\":\"";
      out += gt->video_id;
      out += "\",\"frame_index\":";
      out += std::to_string(t);
      out += ",\"labels\":[";
      bool first = true;
      for (std::size_t c = 0; c < gt->class_count(); ++c) {
        if (gt->labels.at(t, c)) {
          if (!first) out += ',';
          out += std::to_string(c);
          first = false;
        }
      }
      out += "]}\n";
    }
  }
  write_text_file(path, out);
}

std::vector<EventRecord> load_events_csv(const std::string& path) {
  std::string text = read_text_file(path);
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::vector<EventRecord> events;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view trimmed = trim(line);
    if (trimmed.empty()) continue;
    if (!header_seen) {
      if (trimmed != "video_id,class_id,start_frame,end_frame,score") {
        line_fail(path, line_no, "expected header video_id,class_id,start_frame,end_frame,score");
      }
      header_seen = true;
      continue;
    }
    auto parts = split_char(trimmed, ',');
    if (parts.size() != 5) line_fail(path, line_no, "expected 5 comma-separated fields");
    EventRecord ev;
    ev.video_id = parts[0];
    auto class_id = parse_int(parts[1]);
    auto start = parse_int(parts[2]);
    auto end = parse_int(parts[3]);
    auto score = parse_double(parts[4]);
    if (ev.video_id.empty() || !class_id || !start || !end || !score) {
      line_fail(path, line_no, "malformed event record");
    }
    ev.class_id = static_cast<int>(*class_id);
    ev.start_frame = *start;
    ev.end_frame = *end;
    ev.score = *score;
    if (ev.start_frame < 0 || ev.end_frame <= ev.start_frame) {
      line_fail(path, line_no, "invalid interval [" + std::to_string(ev.start_frame) + "," +
                                   std::to_string(ev.end_frame) + ")");
    }
    if (!std::isfinite(ev.score) || ev.score < 0.0 || ev.score > 1.0) {
      line_fail(path, line_no, "score out of [0,1]");
    }
    events.push_back(std::move(ev));
  }
  if (!header_seen) throw InputError(path + ": missing CSV header");
  sort_events(events);
  validate_events(events);
  return events;
}

std::string serialize_events_csv(const std::vector<EventRecord>& events) {
  std::vector<EventRecord> sorted = events;
  sort_events(sorted);
  std::string out = "video_id,class_id,start_frame,end_frame,score\n";
  for (const EventRecord& ev : sorted) {
    out += ev.video_id;
    out += ',';
    out += std::to_string(ev.class_id);
    out += ',';
    out += std::to_string(ev.start_frame);
    out += ',';
    out += std::to_string(ev.end_frame);
    out += ',';
    out += format_double(ev.score, 6);
    out += '\n';
  }
  return out;
}

void save_events_csv(const std::vector<EventRecord>& events, const std::string& path) {
  write_text_file(path, serialize_events_csv(events));
}

void sort_events(std::vector<EventRecord>& events) {
  std::sort(events.begin(), events.end(), [](const EventRecord& a, const EventRecord& b) {
    return std::tie(a.video_id, a.class_id, a.start_frame, a.end_frame) <
           std::tie(b.video_id, b.class_id, b.start_frame, b.end_frame);
  });
}

std::vector<EventRecord> ground_truth_to_events(const GroundTruth& gt) {
  std::vector<EventRecord> events;
  for (std::size_t c = 0; c < gt.class_count(); ++c) {
    std::size_t t = 0;
    while (t < gt.frame_count()) {
      if (!gt.labels.at(t, c)) {
        ++t;
        continue;
      }
      std::size_t start = t;
      while (t < gt.frame_count() && gt.labels.at(t, c)) ++t;
      events.push_back({gt.video_id, static_cast<int>(c), static_cast<long long>(start),
                        static_cast<long long>(t), 1.0});
    }
  }
  sort_events(events);
  return events;
}

StreamSet::StreamSet(std::vector<ProbStream> streams) : streams_(std::move(streams)) {
  for (std::size_t i = 0; i < streams_.size(); ++i) {
    auto key = std::make_pair(streams_[i].video_id, streams_[i].source);
    if (!index_.emplace(std::move(key), i).second) {
      throw InputError("duplicate stream for video " + streams_[i].video_id);
    }
  }
}

std::vector<std::string> StreamSet::video_ids() const {
  std::vector<std::string> ids;
  for (const ProbStream& s : streams_) ids.push_back(s.video_id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

std::vector<int> StreamSet::backbone_ids() const {
  std::vector<int> ids;
  for (const ProbStream& s : streams_) {
    if (s.source.backbone_id >= 0) ids.push_back(s.source.backbone_id);
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

std::vector<int> StreamSet::model_ids(int backbone_id) const {
  std::vector<int> ids;
  for (const ProbStream& s : streams_) {
    if (s.source.backbone_id == backbone_id && s.source.model_id >= 0) {
      ids.push_back(s.source.model_id);
    }
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

const ProbStream* StreamSet::find(const std::string& video_id, const StreamSource& source) const {
  auto it = index_.find({video_id, source});
  if (it == index_.end()) return nullptr;
  return &streams_[it->second];
}

const ProbStream& StreamSet::get(const std::string& video_id, const StreamSource& source) const {
  const ProbStream* s = find(video_id, source);
  if (!s) {
    throw InputError("missing stream: video " + video_id + ", backbone " +
                     std::to_string(source.backbone_id) + ", model " +
                     std::to_string(source.model_id));
  }
  return *s;
}

std::size_t StreamSet::frame_count(const std::string& video_id) const {
  for (const ProbStream& s : streams_) {
    if (s.video_id == video_id) return s.frame_count();
  }
  throw InputError("unknown video: " + video_id);
}

}  // namespace endoev
