#pragma once

// JSON helpers shared by every file format: strict key checking with
// key-path error messages, and exact (shortest round-trip) number output.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "protodrift/error.hpp"

namespace protodrift {

using json = nlohmann::json;

namespace jsonio {

inline std::string join(const std::string& path, std::string_view key) {
  return path.empty() ? std::string(key) : path + "." + std::string(key);
}

inline std::string index(const std::string& path, std::size_t i) {
  return path + "[" + std::to_string(i) + "]";
}

inline void expect_object(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError("expected object at '" + (path.empty() ? "<root>" : path) + "'");
}

inline void reject_unknown(const json& j, std::initializer_list<std::string_view> allowed,
                           const std::string& path) {
  expect_object(j, path);
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || a == k;
    if (!ok) throw ConfigError("unknown key '" + join(path, k) + "'");
  }
}

inline const json& require(const json& j, std::string_view key, const std::string& path) {
  expect_object(j, path);
  auto it = j.find(std::string(key));
  if (it == j.end()) throw ConfigError("missing field '" + join(path, key) + "'");
  return *it;
}

inline double as_number(const json& j, const std::string& path) {
  if (!j.is_number()) throw ConfigError("expected number at '" + path + "'");
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw ConfigError("non-finite number at '" + path + "'");
  return v;
}

inline std::int64_t as_integer(const json& j, const std::string& path) {
  if (!j.is_number_integer()) throw ConfigError("expected integer at '" + path + "'");
  return j.get<std::int64_t>();
}

inline std::uint64_t as_unsigned(const json& j, const std::string& path) {
  if (!j.is_number_integer() || (j.is_number_integer() && !j.is_number_unsigned() && j.get<std::int64_t>() < 0)) {
    throw ConfigError("expected non-negative integer at '" + path + "'");
  }
  return j.get<std::uint64_t>();
}

inline std::string as_string(const json& j, const std::string& path) {
  if (!j.is_string()) throw ConfigError("expected string at '" + path + "'");
  return j.get<std::string>();
}

inline bool as_bool(const json& j, const std::string& path) {
  if (!j.is_boolean()) throw ConfigError("expected boolean at '" + path + "'");
  return j.get<bool>();
}

inline std::vector<double> as_reals(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError("expected array at '" + path + "'");
  std::vector<double> out;
  out.reserve(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(as_number(j[i], index(path, i)));
  return out;
}

inline double number(const json& j, std::string_view key, const std::string& path) {
  return as_number(require(j, key, path), join(path, key));
}
inline std::int64_t integer(const json& j, std::string_view key, const std::string& path) {
  return as_integer(require(j, key, path), join(path, key));
}
inline std::uint64_t unsigned_integer(const json& j, std::string_view key, const std::string& path) {
  return as_unsigned(require(j, key, path), join(path, key));
}
inline std::string string(const json& j, std::string_view key, const std::string& path) {
  return as_string(require(j, key, path), join(path, key));
}
inline std::vector<double> reals(const json& j, std::string_view key, const std::string& path) {
  return as_reals(require(j, key, path), join(path, key));
}

inline json read_file(const std::string& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open '" + file + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed JSON in '" + file + "': " + e.what());
  }
}

// Numbers use nlohmann's shortest round-trip form, so load(save(x)) == x bitwise.
inline void write_file(const std::string& file, const json& j) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error("cannot write '" + file + "'");
  out << j.dump(1) << '\n';
  if (!out) throw Error("write failed for '" + file + "'");
}

}  // namespace jsonio
}  // namespace protodrift
