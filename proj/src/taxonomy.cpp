#include "endoev/taxonomy.hpp"

#include <algorithm>
#include <sstream>

#include "endoev/util.hpp"

namespace endoev {

const char* to_string(ClassKind kind) {
  switch (kind) {
    case ClassKind::region: return "region";
    case ClassKind::landmark: return "landmark";
    case ClassKind::pathology: return "pathology";
  }
  return "?";
}

std::optional<ClassKind> parse_class_kind(std::string_view token) {
  if (token == "region") return ClassKind::region;
  if (token == "landmark") return ClassKind::landmark;
  if (token == "pathology") return ClassKind::pathology;
  return std::nullopt;
}

LabelSpace::LabelSpace(std::vector<ClassInfo> classes, std::vector<int> region_order,
                       std::map<int, LandmarkRule> landmark_rules)
    : classes_(std::move(classes)),
      region_order_(std::move(region_order)),
      landmark_rules_(std::move(landmark_rules)) {
  validate();
  rank_by_class_.assign(classes_.size(), -1);
  for (std::size_t r = 0; r < region_order_.size(); ++r) {
    rank_by_class_[static_cast<std::size_t>(region_order_[r])] = static_cast<int>(r);
  }
}

const ClassInfo& LabelSpace::class_info(int class_id) const {
  if (class_id < 0 || class_id >= num_classes()) {
    throw InputError("class id out of range: " + std::to_string(class_id));
  }
  return classes_[static_cast<std::size_t>(class_id)];
}

std::optional<int> LabelSpace::region_rank(int class_id) const {
  if (class_id < 0 || class_id >= num_classes()) {
    throw InputError("class id out of range: " + std::to_string(class_id));
  }
  int rank = rank_by_class_[static_cast<std::size_t>(class_id)];
  if (rank < 0) return std::nullopt;
  return rank;
}

void LabelSpace::validate() const {
  const int c = num_classes();
  if (c == 0) throw InputError("taxonomy: no classes defined");
  std::vector<bool> seen(static_cast<std::size_t>(c), false);
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    const ClassInfo& info = classes_[i];
    if (info.id != static_cast<int>(i)) {
      throw InputError("taxonomy: class ids must be dense 0..C-1; expected " +
                       std::to_string(i) + ", got " + std::to_string(info.id));
    }
    if (info.name.empty()) {
      throw InputError("taxonomy: class " + std::to_string(info.id) + " has empty name");
    }
    seen[i] = true;
  }

  int region_count = 0;
  for (const ClassInfo& info : classes_) {
    if (info.kind == ClassKind::region) ++region_count;
  }
  if (region_count == 0) throw InputError("taxonomy: region list is empty");
  if (static_cast<int>(region_order_.size()) != region_count) {
    throw InputError("taxonomy: region_order must list every region exactly once (" +
                     std::to_string(region_order_.size()) + " listed, " +
                     std::to_string(region_count) + " region classes)");
  }
  std::set<int> ordered;
  for (int id : region_order_) {
    if (id < 0 || id >= c) {
      throw InputError("taxonomy: region_order references unknown class " + std::to_string(id));
    }
    if (classes_[static_cast<std::size_t>(id)].kind != ClassKind::region) {
      throw InputError("taxonomy: region_order entry " + std::to_string(id) +
                       " is not a region class");
    }
    if (!ordered.insert(id).second) {
      throw InputError("taxonomy: region_order repeats class " + std::to_string(id));
    }
  }

  for (const auto& [landmark_id, rule] : landmark_rules_) {
    if (landmark_id < 0 || landmark_id >= c) {
      throw InputError("taxonomy: landmark_rules references unknown class " +
                       std::to_string(landmark_id));
    }
    if (classes_[static_cast<std::size_t>(landmark_id)].kind != ClassKind::landmark) {
      throw InputError("taxonomy: landmark_rules key " + std::to_string(landmark_id) +
                       " is not a landmark class");
    }
    if (rule.valid_regions.empty()) {
      throw InputError("taxonomy: landmark " + std::to_string(landmark_id) +
                       " has no valid regions");
    }
    for (int region_id : rule.valid_regions) {
      if (region_id < 0 || region_id >= c ||
          classes_[static_cast<std::size_t>(region_id)].kind != ClassKind::region) {
        throw InputError("taxonomy: landmark " + std::to_string(landmark_id) +
                         " references unknown region " + std::to_string(region_id));
      }
    }
    if (rule.tolerance_frames < 0) {
      throw InputError("taxonomy: landmark " + std::to_string(landmark_id) +
                       " has negative tolerance");
    }
  }
}

bool LabelSpace::operator==(const LabelSpace& other) const {
  if (classes_.size() != other.classes_.size()) return false;
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    const ClassInfo& a = classes_[i];
    const ClassInfo& b = other.classes_[i];
    if (a.id != b.id || a.name != b.name || a.kind != b.kind) return false;
  }
  if (region_order_ != other.region_order_) return false;
  if (landmark_rules_.size() != other.landmark_rules_.size()) return false;
  for (const auto& [id, rule] : landmark_rules_) {
    auto it = other.landmark_rules_.find(id);
    if (it == other.landmark_rules_.end()) return false;
    if (it->second.valid_regions != rule.valid_regions ||
        it->second.tolerance_frames != rule.tolerance_frames) {
      return false;
    }
  }
  return true;
}

namespace {

enum class Section { none, classes, region_order, landmark_rules };

[[noreturn]] void parse_fail(const std::string& origin, std::size_t line_no,
                             const std::string& what) {
  throw InputError("taxonomy " + origin + ":" + std::to_string(line_no) + ": " + what);
}

}  // namespace

LabelSpace parse_taxonomy(const std::string& text, const std::string& origin) {
  std::vector<ClassInfo> classes;
  std::vector<int> region_order;
  std::map<int, LandmarkRule> landmark_rules;
  std::set<int> class_ids;

  Section section = Section::none;
  std::istringstream lines(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(lines, raw)) {
    ++line_no;
    std::string_view line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    if (line == "[classes]") { section = Section::classes; continue; }
    if (line == "[region_order]") { section = Section::region_order; continue; }
    if (line == "[landmark_rules]") { section = Section::landmark_rules; continue; }
    if (line.front() == '[') parse_fail(origin, line_no, "unknown section " + std::string(line));

    switch (section) {
      case Section::none:
        parse_fail(origin, line_no, "content before first section header");
      case Section::classes: {
        auto tokens = split_ws(line);
        if (tokens.size() < 3) {
          parse_fail(origin, line_no, "expected '<id> <kind> <name>'");
        }
        auto id = parse_int(tokens[0]);
        if (!id) parse_fail(origin, line_no, "bad class id '" + std::string(tokens[0]) + "'");
        auto kind = parse_class_kind(tokens[1]);
        if (!kind) parse_fail(origin, line_no, "bad class kind '" + std::string(tokens[1]) + "'");
        if (!class_ids.insert(static_cast<int>(*id)).second) {
          parse_fail(origin, line_no, "duplicate class id " + std::to_string(*id));
        }
        // name = remainder of the line after the kind token
        std::size_t name_pos = line.find(tokens[1]) + tokens[1].size();
        std::string name(trim(line.substr(name_pos)));
        classes.push_back({static_cast<int>(*id), name, *kind});
        break;
      }
      case Section::region_order: {
        for (auto tok : split_ws(line)) {
          auto id = parse_int(tok);
          if (!id) parse_fail(origin, line_no, "bad region id '" + std::string(tok) + "'");
          region_order.push_back(static_cast<int>(*id));
        }
        break;
      }
      case Section::landmark_rules: {
        auto tokens = split_ws(line);
        if (tokens.size() != 3) {
          parse_fail(origin, line_no,
                     "expected '<landmark_id> regions=<id,...> tolerance=<frames>'");
        }
        auto id = parse_int(tokens[0]);
        if (!id) parse_fail(origin, line_no, "bad landmark id '" + std::string(tokens[0]) + "'");
        LandmarkRule rule;
        bool have_regions = false, have_tol = false;
        for (std::size_t i = 1; i < tokens.size(); ++i) {
          std::string_view tok = tokens[i];
          if (tok.rfind("regions=", 0) == 0) {
            for (const std::string& part : split_char(tok.substr(8), ',')) {
              auto rid = parse_int(part);
              if (!rid) parse_fail(origin, line_no, "bad region id '" + part + "'");
              rule.valid_regions.insert(static_cast<int>(*rid));
            }
            have_regions = true;
          } else if (tok.rfind("tolerance=", 0) == 0) {
            auto tol = parse_int(tok.substr(10));
            if (!tol || *tol < 0) {
              parse_fail(origin, line_no, "bad tolerance '" + std::string(tok) + "'");
            }
            rule.tolerance_frames = static_cast<int>(*tol);
            have_tol = true;
          } else {
            parse_fail(origin, line_no, "unknown token '" + std::string(tok) + "'");
          }
        }
        if (!have_regions || !have_tol) {
          parse_fail(origin, line_no, "landmark rule needs regions= and tolerance=");
        }
        if (!landmark_rules.emplace(static_cast<int>(*id), std::move(rule)).second) {
          parse_fail(origin, line_no, "duplicate landmark rule for class " + std::to_string(*id));
        }
        break;
      }
    }
  }

  std::sort(classes.begin(), classes.end(),
            [](const ClassInfo& a, const ClassInfo& b) { return a.id < b.id; });
  return LabelSpace(std::move(classes), std::move(region_order), std::move(landmark_rules));
}

LabelSpace load_taxonomy(const std::string& path) {
  return parse_taxonomy(read_text_file(path), path);
}

std::string serialize_taxonomy(const LabelSpace& space) {
  std::ostringstream out;
  out << "[classes]\n";
  for (const ClassInfo& info : space.classes()) {
    out << info.id << ' ' << to_string(info.kind) << ' ' << info.name << '\n';
  }
  out << "[region_order]\n";
  for (std::size_t i = 0; i < space.region_order().size(); ++i) {
    out << (i ? " " : "") << space.region_order()[i];
  }
  out << '\n';
  out << "[landmark_rules]\n";
  for (const auto& [id, rule] : space.landmark_rules()) {
    out << id << " regions=";
    bool first = true;
    for (int region_id : rule.valid_regions) {
      if (!first) out << ',';
      out << region_id;
      first = false;
    }
    out << " tolerance=" << rule.tolerance_frames << '\n';
  }
  return out.str();
}

void save_taxonomy(const LabelSpace& space, const std::string& path) {
  write_text_file(path, serialize_taxonomy(space));
}

LabelSpace default_label_space() {
  std::vector<ClassInfo> classes = {
      {0, "mouth", ClassKind::region},
      {1, "esophagus", ClassKind::region},
      {2, "stomach", ClassKind::region},
      {3, "small_intestine", ClassKind::region},
      {4, "colon", ClassKind::region},
      {5, "z_line", ClassKind::landmark},
      {6, "pylorus", ClassKind::landmark},
      {7, "ileocecal_valve", ClassKind::landmark},
      {8, "bleeding", ClassKind::pathology},
      {9, "ulcer", ClassKind::pathology},
      {10, "polyp", ClassKind::pathology},
      {11, "angiectasia", ClassKind::pathology},
  };
  std::vector<int> region_order = {0, 1, 2, 3, 4};
  std::map<int, LandmarkRule> rules;
  rules[5] = {{1, 2}, 50};
  rules[6] = {{2, 3}, 50};
  rules[7] = {{3, 4}, 50};
  return LabelSpace(std::move(classes), std::move(region_order), std::move(rules));
}

}  // namespace endoev
