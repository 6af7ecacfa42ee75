#pragma once

// Run configuration: one JSON document drives every CLI command. Every key is
// optional (defaults below), unknown keys are rejected with their path, and
// the fully resolved form is written next to each command's outputs.

#include <cerrno>
#include <cstdint>
#include <cstdlib>
#include <optional>
#include <string>
#include <vector>

#include "protodrift/error.hpp"
#include "protodrift/harness.hpp"
#include "protodrift/json_io.hpp"
#include "protodrift/otcal.hpp"
#include "protodrift/synth.hpp"

namespace protodrift {

struct PathsConfig {
  std::string world = "out/world.json";
  std::string checkpoint = "out/base.checkpoint.json";
  std::string store = "out/prototypes.json";
  std::string reports = "out/reports";

  friend bool operator==(const PathsConfig&, const PathsConfig&) = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  WorldConfig world;
  ModelDims model;
  TrainConfig pretrain;
  FinetuneConfig finetune;
  LossWeights weights;
  std::size_t shots = 10;
  PathsConfig paths;
  std::vector<std::uint64_t> ablation_seeds{0, 1, 2, 3, 4};

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  ExperimentConfig experiment() const {
    ExperimentConfig e;
    e.world = world;
    e.model = model;
    e.pretrain = pretrain;
    e.finetune = finetune;
    e.weights = weights;
    e.shots = shots;
    e.seeds = ablation_seeds;
    return e;
  }
};

inline void validate(const RunConfig& c) {
  validate(c.world);
  validate(c.pretrain.sgd);
  validate(c.finetune.sgd);
  validate(c.finetune.hpc);
  if (c.model.hidden_dim == 0 || c.model.feature_dim == 0) throw ConfigError("model dimensions must be positive");
  if (c.model.projection_dim != c.finetune.hpc.projection_dim) {
    throw ConfigError("model projection width differs from losses.projection_dim");
  }
  if (c.pretrain.batch_size == 0) throw ConfigError("pretrain.batch_size must be positive");
  if (c.finetune.batch_size == 0) throw ConfigError("finetune.batch_size must be positive");
  if (!(c.weights.lambda1 >= 0.0)) throw ConfigError("losses.lambda1 must be non-negative");
  if (!(c.weights.lambda2 >= 0.0)) throw ConfigError("losses.lambda2 must be non-negative");
  if (!(c.finetune.novel_init_std >= 0.0)) throw ConfigError("finetune.novel_init_std must be non-negative");
  if (c.shots == 0) throw ConfigError("finetune.shots must be >= 1");
  const auto& sk = c.finetune.sinkhorn;
  if (sk.eps_schedule.empty()) throw ConfigError("finetune.sinkhorn.eps_schedule must not be empty");
  for (std::size_t i = 0; i < sk.eps_schedule.size(); ++i) {
    if (!(sk.eps_schedule[i] > 0.0) || (i && sk.eps_schedule[i] > sk.eps_schedule[i - 1])) {
      throw ConfigError("finetune.sinkhorn.eps_schedule must be positive and non-increasing");
    }
  }
  if (sk.max_iter == 0) throw ConfigError("finetune.sinkhorn.max_iter must be positive");
  if (!(sk.tol > 0.0)) throw ConfigError("finetune.sinkhorn.tol must be positive");
  if (c.ablation_seeds.empty()) throw ConfigError("ablation.seeds must not be empty");

  const std::vector<std::pair<const char*, const std::string*>> paths{{"paths.world", &c.paths.world},
                                                                      {"paths.checkpoint", &c.paths.checkpoint},
                                                                      {"paths.store", &c.paths.store},
                                                                      {"paths.reports", &c.paths.reports}};
  for (std::size_t i = 0; i < paths.size(); ++i) {
    if (paths[i].second->empty()) throw ConfigError(std::string(paths[i].first) + " must not be empty");
    for (std::size_t j = 0; j < i; ++j)
      if (*paths[i].second == *paths[j].second) {
        throw ConfigError(std::string(paths[i].first) + " and " + paths[j].first + " name the same file");
      }
  }
}

namespace detail {

inline json sgd_json(const SgdConfig& s) {
  json ms = json::array();
  for (const auto& m : s.milestones) ms.push_back({{"iteration", m.iteration}, {"multiplier", m.multiplier}});
  return {{"lr", s.lr},
          {"momentum", s.momentum},
          {"weight_decay", s.weight_decay},
          {"warmup_iters", s.warmup_iters},
          {"milestones", ms}};
}

inline void read_sgd(const json& j, const std::string& path, SgdConfig& s) {
  if (j.contains("lr")) s.lr = jsonio::number(j, "lr", path);
  if (j.contains("momentum")) s.momentum = jsonio::number(j, "momentum", path);
  if (j.contains("weight_decay")) s.weight_decay = jsonio::number(j, "weight_decay", path);
  if (j.contains("warmup_iters")) s.warmup_iters = jsonio::unsigned_integer(j, "warmup_iters", path);
  if (j.contains("milestones")) {
    const auto mp = jsonio::join(path, "milestones");
    const json& arr = j.at("milestones");
    if (!arr.is_array()) throw ConfigError("expected array at '" + mp + "'");
    s.milestones.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const auto ip = jsonio::index(mp, i);
      jsonio::reject_unknown(arr[i], {"iteration", "multiplier"}, ip);
      s.milestones.push_back({static_cast<std::size_t>(jsonio::unsigned_integer(arr[i], "iteration", ip)),
                              jsonio::number(arr[i], "multiplier", ip)});
    }
  }
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
  json pre = detail::sgd_json(c.pretrain.sgd);
  pre["epochs"] = c.pretrain.epochs;
  pre["batch_size"] = c.pretrain.batch_size;

  json fin = detail::sgd_json(c.finetune.sgd);
  fin["iterations"] = c.finetune.iterations;
  fin["batch_size"] = c.finetune.batch_size;
  fin["shots"] = c.shots;
  fin["novel_init_std"] = c.finetune.novel_init_std;
  fin["sinkhorn"] = {{"eps_schedule", c.finetune.sinkhorn.eps_schedule},
                     {"max_iter", c.finetune.sinkhorn.max_iter},
                     {"tol", c.finetune.sinkhorn.tol},
                     {"newton_steps", c.finetune.sinkhorn.newton_steps}};

  return {{"seed", c.seed},
          {"world", to_json(c.world)},
          {"model", {{"hidden_dim", c.model.hidden_dim}, {"feature_dim", c.model.feature_dim}}},
          {"pretrain", pre},
          {"finetune", fin},
          {"losses",
           {{"lambda1", c.weights.lambda1},
            {"lambda2", c.weights.lambda2},
            {"tau", c.finetune.hpc.tau},
            {"phi", c.finetune.hpc.phi},
            {"projection_dim", c.finetune.hpc.projection_dim},
            {"cost_mode", to_string(c.finetune.cost_mode)}}},
          {"paths",
           {{"world", c.paths.world},
            {"checkpoint", c.paths.checkpoint},
            {"store", c.paths.store},
            {"reports", c.paths.reports}}},
          {"ablation", {{"seeds", c.ablation_seeds}}}};
}

inline RunConfig run_config_from_json(const json& j) {
  jsonio::reject_unknown(j, {"seed", "world", "model", "pretrain", "finetune", "losses", "paths", "ablation"}, "");
  RunConfig c;
  if (j.contains("seed")) c.seed = jsonio::unsigned_integer(j, "seed", "");
  if (j.contains("world")) c.world = world_config_from_json(j.at("world"), "world");

  if (j.contains("model")) {
    const json& m = j.at("model");
    jsonio::reject_unknown(m, {"hidden_dim", "feature_dim"}, "model");
    if (m.contains("hidden_dim")) c.model.hidden_dim = jsonio::unsigned_integer(m, "hidden_dim", "model");
    if (m.contains("feature_dim")) c.model.feature_dim = jsonio::unsigned_integer(m, "feature_dim", "model");
  }

  if (j.contains("pretrain")) {
    const json& p = j.at("pretrain");
    jsonio::reject_unknown(
        p, {"epochs", "batch_size", "lr", "momentum", "weight_decay", "warmup_iters", "milestones"}, "pretrain");
    if (p.contains("epochs")) c.pretrain.epochs = jsonio::unsigned_integer(p, "epochs", "pretrain");
    if (p.contains("batch_size")) c.pretrain.batch_size = jsonio::unsigned_integer(p, "batch_size", "pretrain");
    detail::read_sgd(p, "pretrain", c.pretrain.sgd);
  }

  if (j.contains("finetune")) {
    const json& f = j.at("finetune");
    jsonio::reject_unknown(f,
                           {"iterations", "batch_size", "shots", "novel_init_std", "sinkhorn", "lr", "momentum",
                            "weight_decay", "warmup_iters", "milestones"},
                           "finetune");
    if (f.contains("iterations")) c.finetune.iterations = jsonio::unsigned_integer(f, "iterations", "finetune");
    if (f.contains("batch_size")) c.finetune.batch_size = jsonio::unsigned_integer(f, "batch_size", "finetune");
    if (f.contains("shots")) c.shots = jsonio::unsigned_integer(f, "shots", "finetune");
    if (f.contains("novel_init_std")) c.finetune.novel_init_std = jsonio::number(f, "novel_init_std", "finetune");
    detail::read_sgd(f, "finetune", c.finetune.sgd);
    if (f.contains("sinkhorn")) {
      const json& s = f.at("sinkhorn");
      const std::string sp = "finetune.sinkhorn";
      jsonio::reject_unknown(s, {"eps_schedule", "max_iter", "tol", "newton_steps"}, sp);
      if (s.contains("eps_schedule")) c.finetune.sinkhorn.eps_schedule = jsonio::reals(s, "eps_schedule", sp);
      if (s.contains("max_iter")) c.finetune.sinkhorn.max_iter = jsonio::unsigned_integer(s, "max_iter", sp);
      if (s.contains("tol")) c.finetune.sinkhorn.tol = jsonio::number(s, "tol", sp);
      if (s.contains("newton_steps")) {
        c.finetune.sinkhorn.newton_steps = jsonio::unsigned_integer(s, "newton_steps", sp);
      }
    }
  }

  if (j.contains("losses")) {
    const json& l = j.at("losses");
    jsonio::reject_unknown(l, {"lambda1", "lambda2", "tau", "phi", "projection_dim", "cost_mode"}, "losses");
    if (l.contains("lambda1")) c.weights.lambda1 = jsonio::number(l, "lambda1", "losses");
    if (l.contains("lambda2")) c.weights.lambda2 = jsonio::number(l, "lambda2", "losses");
    if (l.contains("tau")) c.finetune.hpc.tau = jsonio::number(l, "tau", "losses");
    if (l.contains("phi")) c.finetune.hpc.phi = jsonio::number(l, "phi", "losses");
    if (l.contains("projection_dim")) {
      c.finetune.hpc.projection_dim = jsonio::unsigned_integer(l, "projection_dim", "losses");
    }
    if (l.contains("cost_mode")) c.finetune.cost_mode = cost_mode_from_string(jsonio::string(l, "cost_mode", "losses"));
  }
  c.model.projection_dim = c.finetune.hpc.projection_dim;

  if (j.contains("paths")) {
    const json& p = j.at("paths");
    jsonio::reject_unknown(p, {"world", "checkpoint", "store", "reports"}, "paths");
    if (p.contains("world")) c.paths.world = jsonio::string(p, "world", "paths");
    if (p.contains("checkpoint")) c.paths.checkpoint = jsonio::string(p, "checkpoint", "paths");
    if (p.contains("store")) c.paths.store = jsonio::string(p, "store", "paths");
    if (p.contains("reports")) c.paths.reports = jsonio::string(p, "reports", "paths");
  }

  if (j.contains("ablation")) {
    const json& a = j.at("ablation");
    jsonio::reject_unknown(a, {"seeds"}, "ablation");
    if (a.contains("seeds")) {
      const json& s = a.at("seeds");
      if (!s.is_array()) throw ConfigError("expected array at 'ablation.seeds'");
      c.ablation_seeds.clear();
      for (std::size_t i = 0; i < s.size(); ++i) {
        c.ablation_seeds.push_back(jsonio::as_unsigned(s[i], jsonio::index("ablation.seeds", i)));
      }
    }
  }

  validate(c);
  return c;
}

inline RunConfig load_run_config(const std::string& path) { return run_config_from_json(jsonio::read_file(path)); }

inline void save_run_config(const RunConfig& c, const std::string& path) { jsonio::write_file(path, to_json(c)); }

// Precedence: explicit flag, then PROTODRIFT_SEED, then the config file.
inline std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, std::uint64_t from_config,
                                  const char* env_name = "PROTODRIFT_SEED") {
  if (flag) return *flag;
  if (const char* env = std::getenv(env_name); env && *env) {
    char* end = nullptr;
    errno = 0;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (errno || *end != '\0' || env[0] == '-') {
      throw ConfigError(std::string(env_name) + " is not a non-negative integer: '" + env + "'");
    }
    return static_cast<std::uint64_t>(v);
  }
  return from_config;
}

}  // namespace protodrift
