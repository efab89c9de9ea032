#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace endoev {

enum class ClassKind { region, landmark, pathology };

const char* to_string(ClassKind kind);
std::optional<ClassKind> parse_class_kind(std::string_view token);

struct ClassInfo {
  int id = 0;
  std::string name;
  ClassKind kind = ClassKind::pathology;
};

struct LandmarkRule {
  std::set<int> valid_regions;
  int tolerance_frames = 0;
};

// The label space: dense class ids 0..C-1, region classes with a strict
// proximal-to-distal transit order, and per-landmark adjacency rules.
// Immutable after load; safe to share across threads.
class LabelSpace {
 public:
  LabelSpace() = default;
  LabelSpace(std::vector<ClassInfo> classes, std::vector<int> region_order,
             std::map<int, LandmarkRule> landmark_rules);

  int num_classes() const { return static_cast<int>(classes_.size()); }
  int num_regions() const { return static_cast<int>(region_order_.size()); }

  const std::vector<ClassInfo>& classes() const { return classes_; }
  const ClassInfo& class_info(int class_id) const;
  const std::vector<int>& region_order() const { return region_order_; }
  const std::map<int, LandmarkRule>& landmark_rules() const { return landmark_rules_; }

  ClassKind kind(int class_id) const { return class_info(class_id).kind; }
  bool is_region(int class_id) const { return kind(class_id) == ClassKind::region; }

  // Position in the transit order for region classes, absent otherwise.
  std::optional<int> region_rank(int class_id) const;

  // Checks every invariant; throws InputError naming the offending field.
  void validate() const;

  bool operator==(const LabelSpace& other) const;

 private:
  std::vector<ClassInfo> classes_;
  std::vector<int> region_order_;
  std::map<int, LandmarkRule> landmark_rules_;
  std::vector<int> rank_by_class_;  // -1 for non-regions
};

LabelSpace load_taxonomy(const std::string& path);
LabelSpace parse_taxonomy(const std::string& text, const std::string& origin = "<memory>");
std::string serialize_taxonomy(const LabelSpace& space);
void save_taxonomy(const LabelSpace& space, const std::string& path);

// The taxonomy bundled with the tool: five ordered regions, boundary
// landmarks, and a handful of pathology classes.
LabelSpace default_label_space();

}  // namespace endoev
