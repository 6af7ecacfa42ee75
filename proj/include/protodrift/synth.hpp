#pragma once

// Seeded synthetic "RoI feature world": Gaussian class clusters whose means
// sit on a sphere, plus a distance-correlated IoU score per sample.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "protodrift/error.hpp"
#include "protodrift/json_io.hpp"
#include "protodrift/registry.hpp"
#include "protodrift/rng.hpp"

namespace protodrift {

inline constexpr int kBackgroundClass = -1;

struct WorldConfig {
  std::size_t raw_dim = 16;
  std::size_t num_base = 7;
  std::size_t num_novel = 3;
  std::size_t samples_per_class_train = 200;
  std::size_t samples_per_class_test = 100;
  double cluster_radius = 4.0;
  double cluster_sigma = 1.0;
  double iou_noise = 0.05;
  bool background = false;
  std::size_t background_samples = 200;
  std::uint64_t seed = 0;

  friend bool operator==(const WorldConfig&, const WorldConfig&) = default;
};

inline void validate(const WorldConfig& c) {
  if (c.raw_dim < 1) throw ConfigError("world.raw_dim must be >= 1");
  if (c.num_base < 2) throw ConfigError("world.num_base must be >= 2");
  if (c.num_novel < 1) throw ConfigError("world.num_novel must be >= 1");
  if (c.samples_per_class_train < 1 || c.samples_per_class_test < 1) {
    throw ConfigError("world sample counts must be >= 1");
  }
  if (!(c.cluster_radius > 0.0)) throw ConfigError("world.cluster_radius must be positive");
  if (!(c.cluster_sigma > 0.0)) throw ConfigError("world.cluster_sigma must be positive");
  if (!(c.iou_noise >= 0.0 && c.iou_noise <= 1.0)) throw ConfigError("world.iou_noise must be in [0,1]");
}

struct ProposalFeature {
  std::vector<double> x;
  int y = 0;
  double u = 0.0;

  friend bool operator==(const ProposalFeature&, const ProposalFeature&) = default;
};

using Dataset = std::vector<ProposalFeature>;

struct World {
  WorldConfig config;
  ClassRegistry classes;  // base ids 0..num_base-1, then novel ids
  std::vector<std::vector<double>> means;
  Dataset train;
  Dataset test;

  std::vector<int> base_ids() const { return classes.base_ids(); }
  std::vector<int> novel_ids() const { return classes.novel_ids(); }

  friend bool operator==(const World&, const World&) = default;
};

// Linear-interpolated quantile of an unsorted sample.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw Error("quantile of empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double euclidean(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// u = clip(1 - (dist/q95)^2, 0, 1) + Uniform(-noise, noise), clipped to [0,1],
// where q95 is the 95th percentile of the distances from the class mean to
// the other class means.
inline double synth_iou(double dist, double q95, double noise_draw) {
  const double r = dist / q95;
  const double base = std::clamp(1.0 - r * r, 0.0, 1.0);
  return std::clamp(base + noise_draw, 0.0, 1.0);
}

inline World generate_world(const WorldConfig& cfg) {
  validate(cfg);
  World w;
  w.config = cfg;
  const std::size_t total = cfg.num_base + cfg.num_novel;
  for (std::size_t c = 0; c < total; ++c) {
    const int id = static_cast<int>(c);
    w.classes.add({id, class_name(id), c < cfg.num_base});
  }

  Rng mean_rng = make_rng(cfg.seed, "world.means");
  std::normal_distribution<double> stdnorm(0.0, 1.0);
  for (std::size_t c = 0; c < total; ++c) {
    std::vector<double> m(cfg.raw_dim);
    double nrm = 0.0;
    do {
      nrm = 0.0;
      for (auto& v : m) {
        v = stdnorm(mean_rng);
        nrm += v * v;
      }
      nrm = std::sqrt(nrm);
    } while (!(nrm > 1e-12));
    for (auto& v : m) v *= cfg.cluster_radius / nrm;
    w.means.push_back(std::move(m));
  }

  std::vector<double> q95(total);
  for (std::size_t c = 0; c < total; ++c) {
    std::vector<double> d;
    for (std::size_t o = 0; o < total; ++o)
      if (o != c) d.push_back(euclidean(w.means[c], w.means[o]));
    q95[c] = quantile(std::move(d), 0.95);
  }

  auto fill = [&](Dataset& out, std::size_t per_class, std::string_view tag) {
    Rng rng = make_rng(cfg.seed, tag);
    std::normal_distribution<double> noise(0.0, cfg.cluster_sigma);
    std::uniform_real_distribution<double> jitter(-cfg.iou_noise, cfg.iou_noise);
    for (std::size_t c = 0; c < total; ++c) {
      for (std::size_t i = 0; i < per_class; ++i) {
        ProposalFeature p;
        p.y = static_cast<int>(c);
        p.x = w.means[c];
        for (auto& v : p.x) v += noise(rng);
        const double j = cfg.iou_noise > 0.0 ? jitter(rng) : 0.0;
        p.u = synth_iou(euclidean(p.x, w.means[c]), q95[c], j);
        out.push_back(std::move(p));
      }
    }
  };
  fill(w.train, cfg.samples_per_class_train, "world.train");
  fill(w.test, cfg.samples_per_class_test, "world.test");

  if (cfg.background) {
    // Diffuse clutter around the origin with low IoU; never a registry class.
    Rng rng = make_rng(cfg.seed, "world.background");
    std::normal_distribution<double> spread(0.0, cfg.cluster_radius);
    std::uniform_real_distribution<double> low_iou(0.0, 0.3);
    for (std::size_t i = 0; i < cfg.background_samples; ++i) {
      ProposalFeature p;
      p.y = kBackgroundClass;
      p.x.resize(cfg.raw_dim);
      for (auto& v : p.x) v = spread(rng);
      p.u = low_iou(rng);
      w.train.push_back(std::move(p));
    }
  }
  return w;
}

// Exactly k samples per requested class, drawn without replacement.
inline Dataset sample_kshot(const Dataset& train, std::span<const int> class_ids, std::size_t k,
                            std::uint64_t seed) {
  if (k == 0) throw Error("K-shot sampling requires K >= 1");
  Rng rng = make_rng(seed, "kshot");
  Dataset support;
  for (int id : class_ids) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < train.size(); ++i)
      if (train[i].y == id) pool.push_back(i);
    if (pool.size() < k) {
      throw Error("class " + std::to_string(id) + " has " + std::to_string(pool.size()) +
                  " samples, fewer than K=" + std::to_string(k));
    }
    // Partial Fisher-Yates with an explicit uniform draw per slot.
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
      support.push_back(train[pool[i]]);
    }
  }
  return support;
}

inline Dataset filter_classes(const Dataset& data, std::span<const int> ids) {
  Dataset out;
  for (const auto& p : data)
    if (std::find(ids.begin(), ids.end(), p.y) != ids.end()) out.push_back(p);
  return out;
}

// ---- serialization ----

inline json to_json(const WorldConfig& c) {
  return {{"raw_dim", c.raw_dim},
          {"num_base", c.num_base},
          {"num_novel", c.num_novel},
          {"samples_per_class_train", c.samples_per_class_train},
          {"samples_per_class_test", c.samples_per_class_test},
          {"cluster_radius", c.cluster_radius},
          {"cluster_sigma", c.cluster_sigma},
          {"iou_noise", c.iou_noise},
          {"background", c.background},
          {"background_samples", c.background_samples}};
}

// Missing keys keep their defaults; unknown keys are rejected.
inline WorldConfig world_config_from_json(const json& j, const std::string& path, WorldConfig c = {}) {
  jsonio::reject_unknown(j,
                         {"raw_dim", "num_base", "num_novel", "samples_per_class_train",
                          "samples_per_class_test", "cluster_radius", "cluster_sigma", "iou_noise",
                          "background", "background_samples"},
                         path);
  auto uint_field = [&](const char* k, std::size_t& dst) {
    if (j.contains(k)) dst = static_cast<std::size_t>(jsonio::unsigned_integer(j, k, path));
  };
  auto real_field = [&](const char* k, double& dst) {
    if (j.contains(k)) dst = jsonio::number(j, k, path);
  };
  uint_field("raw_dim", c.raw_dim);
  uint_field("num_base", c.num_base);
  uint_field("num_novel", c.num_novel);
  uint_field("samples_per_class_train", c.samples_per_class_train);
  uint_field("samples_per_class_test", c.samples_per_class_test);
  uint_field("background_samples", c.background_samples);
  real_field("cluster_radius", c.cluster_radius);
  real_field("cluster_sigma", c.cluster_sigma);
  real_field("iou_noise", c.iou_noise);
  if (j.contains("background")) c.background = jsonio::as_bool(j["background"], jsonio::join(path, "background"));
  return c;
}

inline json to_json(const Dataset& d) {
  json arr = json::array();
  for (const auto& p : d) arr.push_back({{"x", p.x}, {"y", p.y}, {"u", p.u}});
  return arr;
}

inline Dataset dataset_from_json(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError("expected array at '" + path + "'");
  Dataset d;
  d.reserve(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto p = jsonio::index(path, i);
    jsonio::reject_unknown(j[i], {"x", "y", "u"}, p);
    ProposalFeature f;
    f.x = jsonio::reals(j[i], "x", p);
    f.y = static_cast<int>(jsonio::integer(j[i], "y", p));
    f.u = jsonio::number(j[i], "u", p);
    if (f.u < 0.0 || f.u > 1.0) throw ConfigError("IoU outside [0,1] at '" + jsonio::join(p, "u") + "'");
    d.push_back(std::move(f));
  }
  return d;
}

inline json to_json(const World& w) {
  json means = json::array();
  for (const auto& m : w.means) means.push_back(m);
  return {{"config", to_json(w.config)}, {"seed", w.config.seed}, {"classes", to_json(w.classes)},
          {"means", means},              {"train", to_json(w.train)}, {"test", to_json(w.test)}};
}

inline World world_from_json(const json& j) {
  jsonio::reject_unknown(j, {"config", "seed", "classes", "means", "train", "test"}, "");
  World w;
  w.config = world_config_from_json(jsonio::require(j, "config", ""), "config");
  w.config.seed = jsonio::unsigned_integer(j, "seed", "");
  w.classes = registry_from_json(jsonio::require(j, "classes", ""), "classes");
  const json& means = jsonio::require(j, "means", "");
  if (!means.is_array()) throw ConfigError("expected array at 'means'");
  for (std::size_t i = 0; i < means.size(); ++i) w.means.push_back(jsonio::as_reals(means[i], jsonio::index("means", i)));
  w.train = dataset_from_json(jsonio::require(j, "train", ""), "train");
  w.test = dataset_from_json(jsonio::require(j, "test", ""), "test");
  return w;
}

inline void save_world(const World& w, const std::string& path) { jsonio::write_file(path, to_json(w)); }
inline World load_world(const std::string& path) { return world_from_json(jsonio::read_file(path)); }

}  // namespace protodrift
