#pragma once

// Class prototypes (mean penultimate features) and the base model's softmax
// prediction on each prototype. After base training this store is the only
// carrier of base-class knowledge.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "protodrift/error.hpp"
#include "protodrift/json_io.hpp"
#include "protodrift/model.hpp"
#include "protodrift/registry.hpp"
#include "protodrift/synth.hpp"
#include "protodrift/tensor.hpp"

namespace protodrift {

inline constexpr double kSimplexTolerance = 1e-9;

struct Prototype {
  int class_id = 0;
  std::string name;
  std::vector<double> mean_feature;
  std::vector<double> base_distribution;  // empty for novel-class prototypes

  friend bool operator==(const Prototype&, const Prototype&) = default;
};

struct PrototypeStore {
  std::string checkpoint_id;
  std::uint64_t seed = 0;
  std::size_t feature_dim = 0;
  std::vector<Prototype> base;   // one per base class, registry order
  std::vector<Prototype> novel;  // appended after each incremental session

  std::size_t num_base() const { return base.size(); }

  // Every prototype mean in store order (base first, then novel).
  Tensor all_means() const {
    std::vector<double> v;
    for (const auto* list : {&base, &novel})
      for (const auto& p : *list) v.insert(v.end(), p.mean_feature.begin(), p.mean_feature.end());
    return Tensor::matrix(base.size() + novel.size(), feature_dim, std::move(v));
  }
  Tensor base_means() const {
    std::vector<double> v;
    for (const auto& p : base) v.insert(v.end(), p.mean_feature.begin(), p.mean_feature.end());
    return Tensor::matrix(base.size(), feature_dim, std::move(v));
  }

  const Prototype* find(int class_id) const {
    for (const auto* list : {&base, &novel})
      for (const auto& p : *list)
        if (p.class_id == class_id) return &p;
    return nullptr;
  }

  friend bool operator==(const PrototypeStore&, const PrototypeStore&) = default;
};

// Arithmetic mean accumulated in input order.
inline std::vector<double> compute_prototype(std::span<const std::vector<double>> features, int class_id = -1) {
  if (features.empty()) throw Error("class " + std::to_string(class_id) + " has no samples");
  const std::size_t m = features.front().size();
  std::vector<double> acc(m, 0.0);
  for (const auto& f : features) {
    if (f.size() != m) throw Error("prototype features have mixed widths");
    for (std::size_t i = 0; i < m; ++i) acc[i] += f[i];
  }
  for (auto& v : acc) v /= static_cast<double>(features.size());
  return acc;
}

// softmax(W p + b)
inline std::vector<double> prototype_distribution(std::span<const double> proto, const Tensor& weights,
                                                  const Tensor& bias) {
  if (weights.cols() != proto.size() || bias.size() != weights.rows()) {
    throw Error("prototype_distribution shape mismatch: W " + weights.shape_string() + ", b " +
                bias.shape_string() + ", p [" + std::to_string(proto.size()) + "]");
  }
  std::vector<double> logits(weights.rows());
  for (std::size_t k = 0; k < weights.rows(); ++k) {
    double s = bias[k];
    for (std::size_t i = 0; i < proto.size(); ++i) s += weights(k, i) * proto[i];
    logits[k] = s;
  }
  std::vector<double> out(logits.size());
  detail::softmax_row(logits, out);
  return out;
}

inline void check_simplex(std::span<const double> d, const std::string& where) {
  double s = 0.0;
  for (double v : d) {
    if (!(v >= 0.0)) throw ConfigError(where + ": negative probability");
    s += v;
  }
  if (std::abs(s - 1.0) > kSimplexTolerance) {
    throw ConfigError(where + ": distribution sums to " + std::to_string(s) + ", not 1");
  }
}

// Per-class means of features[i] grouped by labels[i], in `ids` order.
inline std::map<int, std::vector<double>> class_means(const Tensor& features, std::span<const int> labels,
                                                      std::span<const int> ids) {
  std::map<int, std::vector<double>> out;
  for (int id : ids) {
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == id) rows.emplace_back(features.row(i).begin(), features.row(i).end());
    out[id] = compute_prototype(rows, id);
  }
  return out;
}

inline PrototypeStore extract_store(const Checkpoint& ckpt, const Dataset& base_data) {
  if (ckpt.stage != "base") throw Error("prototype extraction needs a base-stage checkpoint, got " + ckpt.stage);
  const auto base_ids = ckpt.registry.base_ids();

  std::vector<int> missing;
  for (int id : base_ids) {
    bool any = false;
    for (const auto& p : base_data) any = any || p.y == id;
    if (!any) missing.push_back(id);
  }
  if (!missing.empty()) {
    std::string msg = "base classes without samples:";
    for (int id : missing) msg += " " + std::to_string(id);
    throw Error(msg);
  }
  Dataset usable;
  for (const auto& p : base_data) {
    if (p.y == kBackgroundClass) continue;
    if (!ckpt.registry.contains(p.y) || !ckpt.registry.at(ckpt.registry.index_of(p.y)).base) {
      throw Error("sample label " + std::to_string(p.y) + " is not a registered base class");
    }
    usable.push_back(p);
  }

  const Tensor feats = penultimate_features(ckpt, stack_inputs(usable));
  std::vector<int> labels;
  for (const auto& p : usable) labels.push_back(p.y);
  auto means = class_means(feats, labels, base_ids);

  PrototypeStore store;
  store.checkpoint_id = checkpoint_id(ckpt);
  store.seed = ckpt.seed;
  store.feature_dim = ckpt.feature_dim();
  const Tensor& w = ckpt.params.at(param::kClsW);
  const Tensor& b = ckpt.params.at(param::kClsB);
  for (int id : base_ids) {
    Prototype p;
    p.class_id = id;
    p.name = ckpt.registry.at(ckpt.registry.index_of(id)).name;
    p.mean_feature = std::move(means[id]);
    p.base_distribution = prototype_distribution(p.mean_feature, w, b);
    store.base.push_back(std::move(p));
  }
  return store;
}

// ---- serialization ----

inline json to_json(const PrototypeStore& s) {
  json classes = json::array();
  for (const auto& p : s.base) {
    classes.push_back({{"class_id", p.class_id},
                       {"name", p.name},
                       {"mean_feature", p.mean_feature},
                       {"base_distribution", p.base_distribution}});
  }
  json j = {{"checkpoint_id", s.checkpoint_id}, {"seed", s.seed}, {"feature_dim", s.feature_dim}, {"classes", classes}};
  if (!s.novel.empty()) {
    json novel = json::array();
    for (const auto& p : s.novel)
      novel.push_back({{"class_id", p.class_id}, {"name", p.name}, {"mean_feature", p.mean_feature}});
    j["novel_classes"] = novel;
  }
  return j;
}

inline PrototypeStore store_from_json(const json& j, const ClassRegistry* registry = nullptr) {
  jsonio::reject_unknown(j, {"checkpoint_id", "seed", "feature_dim", "classes", "novel_classes"}, "");
  PrototypeStore s;
  s.checkpoint_id = jsonio::string(j, "checkpoint_id", "");
  s.seed = jsonio::unsigned_integer(j, "seed", "");
  s.feature_dim = static_cast<std::size_t>(jsonio::unsigned_integer(j, "feature_dim", ""));
  if (s.feature_dim == 0) throw ConfigError("feature_dim must be positive");

  auto read_list = [&](const char* key, bool with_distribution) {
    std::vector<Prototype> out;
    const json& arr = jsonio::require(j, key, "");
    if (!arr.is_array()) throw ConfigError(std::string("expected array at '") + key + "'");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const auto path = jsonio::index(key, i);
      if (with_distribution) {
        jsonio::reject_unknown(arr[i], {"class_id", "name", "mean_feature", "base_distribution"}, path);
      } else {
        jsonio::reject_unknown(arr[i], {"class_id", "name", "mean_feature"}, path);
      }
      Prototype p;
      p.class_id = static_cast<int>(jsonio::integer(arr[i], "class_id", path));
      p.name = jsonio::string(arr[i], "name", path);
      p.mean_feature = jsonio::reals(arr[i], "mean_feature", path);
      if (p.mean_feature.size() != s.feature_dim) {
        throw ConfigError("'" + jsonio::join(path, "mean_feature") + "' has length " +
                          std::to_string(p.mean_feature.size()) + ", expected " + std::to_string(s.feature_dim));
      }
      if (with_distribution) {
        p.base_distribution = jsonio::reals(arr[i], "base_distribution", path);
        check_simplex(p.base_distribution, jsonio::join(path, "base_distribution"));
      }
      const bool dup = s.find(p.class_id) ||
                       std::any_of(out.begin(), out.end(), [&](const Prototype& q) { return q.class_id == p.class_id; });
      if (dup) throw ConfigError("duplicate class_id at '" + jsonio::join(path, "class_id") + "'");
      out.push_back(std::move(p));
    }
    return out;
  };
  s.base = read_list("classes", true);
  if (j.contains("novel_classes")) s.novel = read_list("novel_classes", false);

  for (std::size_t i = 0; i < s.base.size(); ++i) {
    if (s.base[i].base_distribution.size() != s.base.size()) {
      throw ConfigError("'classes[" + std::to_string(i) + "].base_distribution' has length " +
                        std::to_string(s.base[i].base_distribution.size()) + ", expected " +
                        std::to_string(s.base.size()));
    }
  }

  if (registry) {
    const auto base_ids = registry->base_ids();
    if (base_ids.size() != s.base.size()) {
      throw ConfigError("store has " + std::to_string(s.base.size()) + " base classes, registry has " +
                        std::to_string(base_ids.size()));
    }
    for (std::size_t i = 0; i < base_ids.size(); ++i) {
      if (s.base[i].class_id != base_ids[i]) {
        throw ConfigError("store class order differs from registry at 'classes[" + std::to_string(i) + "]'");
      }
    }
  }
  return s;
}

inline void save_store(const PrototypeStore& s, const std::string& path) { jsonio::write_file(path, to_json(s)); }

inline PrototypeStore load_store(const std::string& path, const ClassRegistry* registry = nullptr) {
  return store_from_json(jsonio::read_file(path), registry);
}

}  // namespace protodrift
