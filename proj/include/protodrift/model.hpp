#pragma once

// Parameter layout and forward graph of the surrogate detector head:
//
//   x --[extractor: raw->H->M, relu]--> h --[roi_head: M->M, relu]--> f
//   f --[classifier: Q x M + bias]--> logits
//   f --[projection: P x M, l2]-------> z
//
// f is the penultimate (classifier-input) feature where prototypes live.
// The extractor plays the frozen class-agnostic backbone during fine-tuning.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "protodrift/error.hpp"
#include "protodrift/json_io.hpp"
#include "protodrift/registry.hpp"
#include "protodrift/rng.hpp"
#include "protodrift/synth.hpp"
#include "protodrift/tensor.hpp"

namespace protodrift {

namespace param {
inline constexpr const char* kW1 = "extractor.w1";
inline constexpr const char* kB1 = "extractor.b1";
inline constexpr const char* kW2 = "extractor.w2";
inline constexpr const char* kB2 = "extractor.b2";
inline constexpr const char* kRoiW = "roi_head.w";
inline constexpr const char* kRoiB = "roi_head.b";
inline constexpr const char* kClsW = "classifier.w";
inline constexpr const char* kClsB = "classifier.b";
inline constexpr const char* kProjW = "projection.w";

inline bool is_extractor(const std::string& name) { return name.rfind("extractor.", 0) == 0; }
}  // namespace param

struct ModelDims {
  std::size_t raw_dim = 16;
  std::size_t hidden_dim = 64;
  std::size_t feature_dim = 32;
  std::size_t projection_dim = 128;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

struct Checkpoint {
  ParameterMap params;
  ClassRegistry registry;
  std::string stage = "base";  // "base" or "session-<n>"
  std::uint64_t seed = 0;
  std::vector<double> log;     // mean training loss per epoch / logging window

  std::size_t session_index() const {
    if (stage == "base") return 0;
    return static_cast<std::size_t>(std::stoul(stage.substr(stage.find('-') + 1)));
  }
  std::size_t feature_dim() const { return params.at(param::kClsW).cols(); }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline Tensor gaussian_tensor(std::vector<std::size_t> shape, double stddev, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  std::normal_distribution<double> nd(0.0, stddev);
  for (auto& v : t.data()) v = nd(rng);
  return t;
}

// He-normal weights, zero biases; every tensor has its own seeded stream.
inline Checkpoint init_checkpoint(const ModelDims& d, const ClassRegistry& registry, std::uint64_t seed) {
  if (registry.empty()) throw Error("cannot initialize a model with an empty class registry");
  Checkpoint c;
  c.registry = registry;
  c.seed = seed;
  auto he = [&](const char* name, std::size_t out, std::size_t in) {
    Rng rng = make_rng(seed, name);
    c.params[name] = gaussian_tensor({out, in}, std::sqrt(2.0 / static_cast<double>(in)), rng);
  };
  he(param::kW1, d.hidden_dim, d.raw_dim);
  he(param::kW2, d.feature_dim, d.hidden_dim);
  he(param::kRoiW, d.feature_dim, d.feature_dim);
  he(param::kClsW, registry.size(), d.feature_dim);
  he(param::kProjW, d.projection_dim, d.feature_dim);
  c.params[param::kB1] = Tensor::zeros({d.hidden_dim});
  c.params[param::kB2] = Tensor::zeros({d.feature_dim});
  c.params[param::kRoiB] = Tensor::zeros({d.feature_dim});
  c.params[param::kClsB] = Tensor::zeros({registry.size()});
  return c;
}

inline Tensor stack_inputs(const Dataset& data) {
  if (data.empty()) throw Error("cannot stack an empty dataset");
  const std::size_t dim = data.front().x.size();
  std::vector<double> v;
  v.reserve(data.size() * dim);
  for (const auto& p : data) {
    if (p.x.size() != dim) throw Error("ragged dataset: feature width " + std::to_string(p.x.size()));
    v.insert(v.end(), p.x.begin(), p.x.end());
  }
  return Tensor::matrix(data.size(), dim, std::move(v));
}

inline Tensor gather_rows(const Tensor& m, std::span<const std::size_t> rows) {
  std::vector<double> v;
  v.reserve(rows.size() * m.cols());
  for (auto r : rows) {
    auto src = m.row(r);
    v.insert(v.end(), src.begin(), src.end());
  }
  return Tensor::matrix(rows.size(), m.cols(), std::move(v));
}

// Checkpoint parameters placed on a tape, trainable ones as gradient leaves.
class BoundModel {
 public:
  BoundModel(ComputeTape& tape, const ParameterMap& params, const std::set<std::string>& trainable)
      : tape_(tape) {
    for (const auto& [name, t] : params) {
      ids_[name] = trainable.count(name) ? tape.parameter(name, t) : tape.constant(t);
    }
  }

  NodeId operator[](const std::string& name) const {
    auto it = ids_.find(name);
    if (it == ids_.end()) throw Error("model has no parameter '" + name + "'");
    return it->second;
  }

  // x . W^T (+ b)
  NodeId linear(NodeId x, const char* w, const char* b = nullptr) {
    NodeId y = tape_.matmul(x, tape_.transpose((*this)[w]));
    return b ? tape_.add_bias(y, (*this)[b]) : y;
  }

  NodeId backbone(NodeId x) {
    NodeId h = tape_.relu(linear(x, param::kW1, param::kB1));
    return tape_.relu(linear(h, param::kW2, param::kB2));
  }
  NodeId roi_features(NodeId h) { return tape_.relu(linear(h, param::kRoiW, param::kRoiB)); }
  NodeId logits(NodeId f) { return linear(f, param::kClsW, param::kClsB); }

  ComputeTape& tape() { return tape_; }

 private:
  ComputeTape& tape_;
  std::map<std::string, NodeId> ids_;
};

inline Tensor backbone_features(const Checkpoint& ckpt, const Tensor& inputs) {
  ComputeTape tape;
  BoundModel m(tape, ckpt.params, {});
  return tape.value(m.backbone(tape.constant(inputs)));
}

// Penultimate (classifier-input) features, one row per sample.
inline Tensor penultimate_features(const Checkpoint& ckpt, const Tensor& inputs) {
  ComputeTape tape;
  BoundModel m(tape, ckpt.params, {});
  return tape.value(m.roi_features(m.backbone(tape.constant(inputs))));
}

inline Tensor model_logits(const Checkpoint& ckpt, const Tensor& inputs) {
  ComputeTape tape;
  BoundModel m(tape, ckpt.params, {});
  return tape.value(m.logits(m.roi_features(m.backbone(tape.constant(inputs)))));
}

inline std::vector<int> predict(const Checkpoint& ckpt, const Dataset& data) {
  const Tensor logits = model_logits(ckpt, stack_inputs(data));
  std::vector<int> out;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto r = logits.row(i);
    std::size_t best = 0;
    for (std::size_t j = 1; j < r.size(); ++j)
      if (r[j] > r[best]) best = j;
    out.push_back(ckpt.registry.at(best).id);
  }
  return out;
}

// ---- serialization ----

inline json to_json(const Tensor& t) { return {{"shape", t.shape()}, {"data", t.values()}}; }

inline Tensor tensor_from_json(const json& j, const std::string& path) {
  jsonio::reject_unknown(j, {"shape", "data"}, path);
  const json& s = jsonio::require(j, "shape", path);
  if (!s.is_array()) throw ConfigError("expected array at '" + jsonio::join(path, "shape") + "'");
  std::vector<std::size_t> shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    shape.push_back(static_cast<std::size_t>(jsonio::as_unsigned(s[i], jsonio::index(jsonio::join(path, "shape"), i))));
  }
  try {
    return Tensor(std::move(shape), jsonio::reals(j, "data", path));
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// Stable content hash of the parameters; identifies the checkpoint a
// prototype store was extracted from.
inline std::string checkpoint_id(const Checkpoint& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto eat = [&](const void* p, std::size_t n) {
    auto b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : c.params) {
    eat(name.data(), name.size());
    eat(t.values().data(), t.size() * sizeof(double));
  }
  for (const auto& k : c.registry.classes()) eat(&k.id, sizeof(k.id));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return c.stage + "-" + buf;
}

inline json to_json(const Checkpoint& c) {
  json params = json::object();
  for (const auto& [name, t] : c.params) params[name] = to_json(t);
  return {{"id", checkpoint_id(c)}, {"stage", c.stage},   {"seed", c.seed},
          {"registry", to_json(c.registry)}, {"params", params}, {"log", c.log}};
}

inline Checkpoint checkpoint_from_json(const json& j) {
  jsonio::reject_unknown(j, {"id", "stage", "seed", "registry", "params", "log"}, "");
  Checkpoint c;
  c.stage = jsonio::string(j, "stage", "");
  if (c.stage != "base" && c.stage.rfind("session-", 0) != 0) throw ConfigError("invalid stage '" + c.stage + "'");
  c.seed = jsonio::unsigned_integer(j, "seed", "");
  c.registry = registry_from_json(jsonio::require(j, "registry", ""), "registry");
  const json& params = jsonio::require(j, "params", "");
  jsonio::expect_object(params, "params");
  for (const auto& [name, t] : params.items()) c.params[name] = tensor_from_json(t, "params." + name);
  if (j.contains("log")) c.log = jsonio::reals(j, "log", "");
  for (const char* need : {param::kW1, param::kB1, param::kW2, param::kB2, param::kRoiW, param::kRoiB, param::kClsW,
                           param::kClsB, param::kProjW}) {
    if (!c.params.count(need)) throw ConfigError(std::string("missing field 'params.") + need + "'");
  }
  if (c.params.at(param::kClsW).rows() != c.registry.size()) {
    throw ConfigError("classifier rows do not match registry size");
  }
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) { jsonio::write_file(path, to_json(c)); }
inline Checkpoint load_checkpoint(const std::string& path) { return checkpoint_from_json(jsonio::read_file(path)); }

}  // namespace protodrift
