#pragma once

#include <array>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "dtm/errors.hpp"

namespace dtm {

inline constexpr int kNumJoints = 17;

/// COCO joint ordering.
inline const std::array<std::string, kNumJoints>& joint_names() {
  static const std::array<std::string, kNumJoints> names = {
      "nose",         "left_eye",   "right_eye",     "left_ear",    "right_ear",  "left_shoulder",
      "right_shoulder", "left_elbow", "right_elbow", "left_wrist",  "right_wrist", "left_hip",
      "right_hip",    "left_knee",  "right_knee",    "left_ankle",  "right_ankle"};
  return names;
}

inline int joint_index(const std::string& name) {
  const auto& names = joint_names();
  for (int i = 0; i < kNumJoints; ++i)
    if (names[static_cast<std::size_t>(i)] == name) return i;
  throw ConfigError("unknown joint name '" + name + "'");
}

/// Left/right joint index pairs, swapped under horizontal mirroring.
inline const std::vector<std::pair<int, int>>& mirror_joint_pairs() {
  static const std::vector<std::pair<int, int>> pairs = {{1, 2}, {3, 4}, {5, 6}, {7, 8},
                                                         {9, 10}, {11, 12}, {13, 14}, {15, 16}};
  return pairs;
}

struct AttributeDef {
  std::string name;
  bool is_global = false;
  std::vector<int> keypoint_ids;  // empty for global attributes
};

/// Ordered attribute list with the global/local partition and the per-attribute
/// keypoint assignment. Local attributes must name at least one joint; global
/// attributes must name none.
struct AttributeSchema {
  std::vector<AttributeDef> attributes;

  int total() const { return static_cast<int>(attributes.size()); }

  int num_global() const {
    int n = 0;
    for (const auto& a : attributes) n += a.is_global ? 1 : 0;
    return n;
  }

  int num_local() const { return total() - num_global(); }

  std::vector<int> global_indices() const {
    std::vector<int> idx;
    for (int j = 0; j < total(); ++j)
      if (attributes[static_cast<std::size_t>(j)].is_global) idx.push_back(j);
    return idx;
  }

  std::vector<int> local_indices() const {
    std::vector<int> idx;
    for (int j = 0; j < total(); ++j)
      if (!attributes[static_cast<std::size_t>(j)].is_global) idx.push_back(j);
    return idx;
  }

  int index_of(const std::string& name) const {
    for (int j = 0; j < total(); ++j)
      if (attributes[static_cast<std::size_t>(j)].name == name) return j;
    return -1;
  }

  void validate() const {
    std::unordered_set<std::string> seen;
    for (const auto& a : attributes) {
      if (a.name.empty()) throw ConfigError("schema: empty attribute name");
      if (!seen.insert(a.name).second) throw ConfigError("schema: duplicate attribute name '" + a.name + "'");
      if (a.is_global && !a.keypoint_ids.empty())
        throw ConfigError("schema: global attribute '" + a.name + "' must not have keypoints assigned");
      if (!a.is_global && a.keypoint_ids.empty())
        throw ConfigError("schema: local attribute '" + a.name + "' needs at least one keypoint");
      for (int k : a.keypoint_ids)
        if (k < 0 || k >= kNumJoints)
          throw ConfigError("schema: attribute '" + a.name + "' has joint index " + std::to_string(k) +
                            " out of range");
    }
  }

  bool operator==(const AttributeSchema& other) const {
    if (attributes.size() != other.attributes.size()) return false;
    for (std::size_t i = 0; i < attributes.size(); ++i) {
      const auto& a = attributes[i];
      const auto& b = other.attributes[i];
      if (a.name != b.name || a.is_global != b.is_global || a.keypoint_ids != b.keypoint_ids) return false;
    }
    return true;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.push_back("");
  return out;
}

}  // namespace detail

/// Parses a keypoint assignment file. One mapping per line:
///   <attribute name>: <joint name>, <joint name>, ...
/// Blank lines and lines starting with '#' are skipped.
inline std::map<std::string, std::vector<int>> load_keypoint_assignments(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open assignment file '" + path + "'");
  std::map<std::string, std::vector<int>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const std::size_t colon = line.find(':');
    if (colon == std::string::npos)
      throw IoError("assignment file '" + path + "' line " + std::to_string(lineno) + ": missing ':'");
    const std::string attr = detail::trim(line.substr(0, colon));
    if (attr.empty())
      throw IoError("assignment file '" + path + "' line " + std::to_string(lineno) + ": empty attribute name");
    std::vector<int> joints;
    for (const auto& tok : detail::split(line.substr(colon + 1), ',')) {
      const std::string name = detail::trim(tok);
      if (name.empty()) continue;
      joints.push_back(joint_index(name));
    }
    if (joints.empty())
      throw IoError("assignment file '" + path + "' line " + std::to_string(lineno) + ": no joints listed");
    out[attr] = joints;
  }
  return out;
}

/// Applies an assignment map onto a schema. Every mapped attribute must exist
/// and be local; unmapped local attributes keep their current assignment.
inline void apply_keypoint_assignments(AttributeSchema& schema,
                                       const std::map<std::string, std::vector<int>>& assignments) {
  for (const auto& [name, joints] : assignments) {
    const int j = schema.index_of(name);
    if (j < 0) throw ConfigError("assignment names unknown attribute '" + name + "'");
    auto& attr = schema.attributes[static_cast<std::size_t>(j)];
    if (attr.is_global)
      throw ConfigError("assignment targets global attribute '" + name + "'; keypoint supervision is local-only");
    attr.keypoint_ids = joints;
  }
  schema.validate();
}

}  // namespace dtm
