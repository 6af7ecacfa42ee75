#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "protodrift/error.hpp"
#include "protodrift/json_io.hpp"

namespace protodrift {

inline std::string class_name(int id) { return "class_" + std::to_string(id); }

struct ClassInfo {
  int id = 0;
  std::string name;
  bool base = true;

  friend bool operator==(const ClassInfo&, const ClassInfo&) = default;
};

// Ordered class list. Position in the registry is the classifier row index;
// base classes come first and novel classes are appended in enrollment order.
class ClassRegistry {
 public:
  void add(ClassInfo info) {
    if (contains(info.id)) throw Error("class " + std::to_string(info.id) + " is already registered");
    if (info.base && !classes_.empty() && !classes_.back().base) {
      throw Error("base class " + std::to_string(info.id) + " cannot follow novel classes");
    }
    classes_.push_back(std::move(info));
  }

  std::size_t size() const { return classes_.size(); }
  bool empty() const { return classes_.empty(); }
  const std::vector<ClassInfo>& classes() const { return classes_; }
  const ClassInfo& at(std::size_t row) const { return classes_.at(row); }

  bool contains(int id) const { return find(id).has_value(); }

  std::optional<std::size_t> find(int id) const {
    for (std::size_t i = 0; i < classes_.size(); ++i)
      if (classes_[i].id == id) return i;
    return std::nullopt;
  }

  std::size_t index_of(int id) const {
    auto i = find(id);
    if (!i) throw Error("class " + std::to_string(id) + " is not registered");
    return *i;
  }

  std::vector<int> ids() const {
    std::vector<int> out;
    for (const auto& c : classes_) out.push_back(c.id);
    return out;
  }
  std::vector<int> base_ids() const {
    std::vector<int> out;
    for (const auto& c : classes_)
      if (c.base) out.push_back(c.id);
    return out;
  }
  std::vector<int> novel_ids() const {
    std::vector<int> out;
    for (const auto& c : classes_)
      if (!c.base) out.push_back(c.id);
    return out;
  }
  std::size_t num_base() const { return base_ids().size(); }

  bool is_prefix_of(const ClassRegistry& other) const {
    return classes_.size() <= other.classes_.size() &&
           std::equal(classes_.begin(), classes_.end(), other.classes_.begin());
  }

  friend bool operator==(const ClassRegistry&, const ClassRegistry&) = default;

 private:
  std::vector<ClassInfo> classes_;
};

inline json to_json(const ClassRegistry& reg) {
  json arr = json::array();
  for (const auto& c : reg.classes()) arr.push_back({{"class_id", c.id}, {"name", c.name}, {"base", c.base}});
  return arr;
}

inline ClassRegistry registry_from_json(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError("expected array at '" + path + "'");
  ClassRegistry reg;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto p = jsonio::index(path, i);
    jsonio::reject_unknown(j[i], {"class_id", "name", "base"}, p);
    ClassInfo c;
    c.id = static_cast<int>(jsonio::integer(j[i], "class_id", p));
    c.name = jsonio::string(j[i], "name", p);
    c.base = jsonio::as_bool(jsonio::require(j[i], "base", p), jsonio::join(p, "base"));
    try {
      reg.add(std::move(c));
    } catch (const Error& e) {
      throw ConfigError(p + ": " + e.what());
    }
  }
  return reg;
}

}  // namespace protodrift
