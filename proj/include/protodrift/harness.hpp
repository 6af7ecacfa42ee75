#pragma once

// Two-stage protocol: base pretraining, prototype extraction, replay-free
// incremental fine-tuning, evaluation and the five-variant ablation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <future>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "protodrift/error.hpp"
#include "protodrift/hpc.hpp"
#include "protodrift/json_io.hpp"
#include "protodrift/model.hpp"
#include "protodrift/optim.hpp"
#include "protodrift/otcal.hpp"
#include "protodrift/protostore.hpp"
#include "protodrift/rng.hpp"
#include "protodrift/synth.hpp"
#include "protodrift/tensor.hpp"

namespace protodrift {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  SgdConfig sgd{0.01, 0.9, 1e-4, 20, {{660, 0.1}, {990, 0.1}}};

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct LossWeights {
  double lambda1 = 0.5;  // HPC
  double lambda2 = 0.5;  // calibration

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct FinetuneConfig {
  std::size_t iterations = 200;
  std::size_t batch_size = 32;
  SgdConfig sgd{0.001, 0.9, 1e-4, 20, {}};
  HpcConfig hpc;
  CostMode cost_mode = CostMode::semantic;
  SinkhornOptions sinkhorn;
  double novel_init_std = 0.01;
  std::uint64_t seed = 0;

  friend bool operator==(const FinetuneConfig&, const FinetuneConfig&) = default;
};

namespace detail {

inline std::vector<std::size_t> row_indices(const ClassRegistry& reg, const Dataset& data) {
  std::vector<std::size_t> out;
  out.reserve(data.size());
  for (const auto& p : data) out.push_back(reg.index_of(p.y));
  return out;
}

inline std::string param_list(const ParameterMap& grads) {
  std::string s;
  for (const auto& [k, v] : grads) s += (s.empty() ? "" : ",") + k;
  return s;
}

}  // namespace detail

// Trains extractor, RoI head and classifier on base classes with softmax
// cross-entropy. Zero epochs returns the seeded initialization.
inline Checkpoint pretrain_base(const World& world, const ModelDims& dims_in, const TrainConfig& cfg,
                                std::uint64_t seed) {
  validate(cfg.sgd);
  if (cfg.batch_size == 0) throw ConfigError("pretrain batch_size must be positive");
  ClassRegistry reg;
  for (const auto& c : world.classes.classes())
    if (c.base) reg.add(c);
  if (reg.empty()) throw Error("world has no base classes");

  ModelDims dims = dims_in;
  dims.raw_dim = world.config.raw_dim;
  Checkpoint ckpt = init_checkpoint(dims, reg, seed);
  if (cfg.epochs == 0) return ckpt;

  const Dataset data = filter_classes(world.train, reg.ids());
  const Tensor inputs = stack_inputs(data);
  const auto targets = detail::row_indices(reg, data);

  const std::set<std::string> trainable{param::kW1,   param::kB1,   param::kW2,  param::kB2,
                                        param::kRoiW, param::kRoiB, param::kClsW, param::kClsB};
  OptimizerState opt{cfg.sgd, {}};
  Rng rng = make_rng(seed, "pretrain.shuffle");
  std::vector<std::size_t> order(data.size());
  std::size_t iter = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++iter, ++batches) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      std::vector<std::size_t> tgt;
      for (auto i : idx) tgt.push_back(targets[i]);

      ComputeTape tape;
      BoundModel m(tape, ckpt.params, trainable);
      double loss = 0.0;
      try {
        NodeId x = tape.constant(gather_rows(inputs, idx));
        NodeId l = softmax_cross_entropy(tape, m.logits(m.roi_features(m.backbone(x))), tgt);
        loss = tape.value(l).item();
        tape.backward(l);
        sgd_step(ckpt.params, tape.parameter_grads(), opt, iter);
      } catch (const Error& e) {
        throw Error("pretraining diverged at iteration " + std::to_string(iter) + ": " + e.what());
      }
      epoch_loss += loss;
    }
    ckpt.log.push_back(epoch_loss / static_cast<double>(batches));
  }
  return ckpt;
}

struct SessionResult {
  Checkpoint checkpoint;
  PrototypeStore store;
};

// Replay-free by signature: the only data it sees is the K-shot support set.
inline SessionResult finetune_incremental(const Checkpoint& ckpt, const PrototypeStore& store, const Dataset& support,
                                          const LossWeights& weights, const FinetuneConfig& cfg) {
  validate(cfg.sgd);
  validate(cfg.hpc);
  if (!(weights.lambda1 >= 0.0) || !(weights.lambda2 >= 0.0)) throw ConfigError("loss weights must be non-negative");
  if (cfg.batch_size == 0) throw ConfigError("finetune batch_size must be positive");
  if (support.empty()) throw Error("support set is empty (K = 0)");

  std::vector<int> new_ids;
  for (const auto& p : support) {
    if (p.y == kBackgroundClass) throw Error("support set contains background samples");
    if (ckpt.registry.contains(p.y)) throw Error("class " + std::to_string(p.y) + " is already registered");
    if (std::find(new_ids.begin(), new_ids.end(), p.y) == new_ids.end()) new_ids.push_back(p.y);
  }
  std::sort(new_ids.begin(), new_ids.end());

  const auto base_ids = ckpt.registry.base_ids();
  if (store.base.size() != base_ids.size()) throw Error("prototype store does not cover the registry's base classes");
  for (std::size_t i = 0; i < base_ids.size(); ++i)
    if (store.base[i].class_id != base_ids[i]) throw Error("prototype store class order differs from registry");
  if (store.feature_dim != ckpt.feature_dim()) throw Error("prototype store feature width differs from checkpoint");

  SessionResult out{ckpt, store};
  Checkpoint& next = out.checkpoint;
  next.stage = "session-" + std::to_string(ckpt.session_index() + 1);
  next.log.clear();
  for (int id : new_ids) next.registry.add({id, class_name(id), false});

  {
    const Tensor& w = ckpt.params.at(param::kClsW);
    const Tensor& b = ckpt.params.at(param::kClsB);
    Rng rng = make_rng(cfg.seed, "novel_rows." + next.stage);
    std::vector<double> wv(w.values()), bv(b.values());
    std::normal_distribution<double> nd(0.0, cfg.novel_init_std);
    for (std::size_t r = 0; r < new_ids.size(); ++r) {
      for (std::size_t c = 0; c < w.cols(); ++c) wv.push_back(nd(rng));
      bv.push_back(0.0);
    }
    next.params[param::kClsW] = Tensor::matrix(next.registry.size(), w.cols(), std::move(wv));
    next.params[param::kClsB] = Tensor::vector(std::move(bv));
  }

  const Tensor inputs = stack_inputs(support);
  const Tensor frozen = backbone_features(ckpt, inputs);
  const auto targets = detail::row_indices(next.registry, support);
  std::vector<int> labels;
  std::vector<double> iou;
  for (const auto& p : support) {
    labels.push_back(p.y);
    iou.push_back(p.u);
  }

  std::optional<CostMatrix> cost;
  if (weights.lambda2 > 0.0) {
    auto novel = class_means(penultimate_features(ckpt, inputs), labels, new_ids);
    for (const auto& p : store.novel) novel.emplace(p.class_id, p.mean_feature);
    cost = build_cost_matrix(next.registry, store, novel, cfg.cost_mode);
  }
  const Tensor hpc_protos = store.all_means();
  std::vector<TransportPlan> warm_plans;

  const std::set<std::string> trainable{param::kRoiW, param::kRoiB, param::kClsW, param::kClsB, param::kProjW};
  OptimizerState opt{cfg.sgd, {}};
  Rng rng = make_rng(cfg.seed, "finetune.shuffle." + next.stage);
  std::vector<std::size_t> order(support.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const std::size_t batch = std::min(cfg.batch_size, order.size());

  double window = 0.0;
  std::size_t in_window = 0;
  for (std::size_t iter = 0; iter < cfg.iterations; ++iter) {
    if (cursor + batch > order.size()) {
      if (batch < order.size()) std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    std::span<const std::size_t> idx(order.data() + cursor, batch);
    cursor += batch;

    std::vector<std::size_t> tgt;
    ProjectedBatch pb;
    for (auto i : idx) {
      tgt.push_back(targets[i]);
      pb.labels.push_back(labels[i]);
      pb.iou.push_back(iou[i]);
    }

    ComputeTape tape;
    BoundModel m(tape, next.params, trainable);
    double loss = 0.0;
    try {
      NodeId feats = m.roi_features(tape.constant(gather_rows(frozen, idx)));
      NodeId total = softmax_cross_entropy(tape, m.logits(feats), tgt);
      if (weights.lambda1 > 0.0) {
        pb.embeddings = project(tape, feats, m[param::kProjW]);
        NodeId protos = project(tape, tape.constant(hpc_protos), m[param::kProjW]);
        total = tape.add(total, tape.scale(hpc_loss(tape, pb, protos, cfg.hpc), weights.lambda1));
      }
      if (weights.lambda2 > 0.0) {
        NodeId cal = calibration_loss(tape, m[param::kClsW], m[param::kClsB], store, *cost, cfg.sinkhorn,
                                       nullptr, &warm_plans);
        total = tape.add(total, tape.scale(cal, weights.lambda2));
      }
      loss = tape.value(total).item();
      tape.backward(total);
      sgd_step(next.params, tape.parameter_grads(), opt, iter);
    } catch (const Error& e) {
      throw Error("fine-tuning failed at iteration " + std::to_string(iter) + ": " + e.what());
    }
    window += loss;
    if (++in_window == 10 || iter + 1 == cfg.iterations) {
      next.log.push_back(window / static_cast<double>(in_window));
      window = 0.0;
      in_window = 0;
    }
  }

  for (const auto& [name, t] : ckpt.params) {
    if (param::is_extractor(name) && !(next.params.at(name) == t)) {
      throw Error("extractor parameter '" + name + "' changed during fine-tuning");
    }
  }

  auto enrolled = class_means(penultimate_features(next, inputs), labels, new_ids);
  for (int id : new_ids) out.store.novel.push_back({id, class_name(id), std::move(enrolled[id]), {}});
  return out;
}

struct Metrics {
  std::map<int, double> per_class;
  double b_acc = 0.0;
  double n_acc = 0.0;
  double all_acc = 0.0;
  std::size_t num_base = 0;
  std::size_t num_novel = 0;
};

// Macro-averaged per-class accuracy. Classes the model has no head for are
// scored (always wrong) as novel classes.
inline Metrics evaluate(const Checkpoint& ckpt, const Dataset& test_in) {
  Dataset test;
  for (const auto& p : test_in)
    if (p.y != kBackgroundClass) test.push_back(p);
  if (test.empty()) throw Error("cannot evaluate on an empty test set");
  const auto pred = predict(ckpt, test);

  std::map<int, std::pair<std::size_t, std::size_t>> counts;  // id -> (correct, total)
  for (std::size_t i = 0; i < test.size(); ++i) {
    auto& c = counts[test[i].y];
    c.first += pred[i] == test[i].y;
    ++c.second;
  }
  Metrics m;
  double bs = 0.0, ns = 0.0, all = 0.0;
  for (const auto& [id, c] : counts) {
    const double acc = static_cast<double>(c.first) / static_cast<double>(c.second);
    m.per_class[id] = acc;
    all += acc;
    auto row = ckpt.registry.find(id);
    if (row && ckpt.registry.at(*row).base) {
      bs += acc;
      ++m.num_base;
    } else {
      ns += acc;
      ++m.num_novel;
    }
  }
  m.b_acc = m.num_base ? bs / static_cast<double>(m.num_base) : 0.0;
  m.n_acc = m.num_novel ? ns / static_cast<double>(m.num_novel) : 0.0;
  m.all_acc = all / static_cast<double>(counts.size());
  return m;
}

inline json metrics_json(const Metrics& m, const std::string& variant, const std::string& seed) {
  json per = json::object();
  for (const auto& [id, acc] : m.per_class) per[std::to_string(id)] = acc;
  return {{"variant", variant}, {"seed", seed}, {"bAcc", m.b_acc}, {"nAcc", m.n_acc}, {"allAcc", m.all_acc},
          {"per_class", per}};
}

// Unit-norm projection-head embeddings of a dataset.
inline Tensor embeddings(const Checkpoint& ckpt, const Dataset& data) {
  ComputeTape tape;
  BoundModel m(tape, ckpt.params, {});
  NodeId f = m.roi_features(m.backbone(tape.constant(stack_inputs(data))));
  return tape.value(project(tape, f, m[param::kProjW]));
}

struct Separation {
  double intra = 0.0;  // mean cosine over same-class pairs
  double inter = 0.0;  // mean cosine over different-class pairs
  double gap() const { return intra - inter; }
};

inline Separation embedding_separation(const Checkpoint& ckpt, const Dataset& data) {
  const Tensor z = embeddings(ckpt, data);
  double intra = 0.0, inter = 0.0;
  std::size_t ni = 0, ne = 0;
  for (std::size_t i = 0; i < z.rows(); ++i)
    for (std::size_t j = i + 1; j < z.rows(); ++j) {
      double c = 0.0;
      for (std::size_t t = 0; t < z.cols(); ++t) c += z(i, t) * z(j, t);
      if (data[i].y == data[j].y) {
        intra += c;
        ++ni;
      } else {
        inter += c;
        ++ne;
      }
    }
  if (!ni || !ne) throw Error("separation needs at least two classes with two samples");
  return {intra / static_cast<double>(ni), inter / static_cast<double>(ne)};
}

// ---- ablation ----

struct ExperimentConfig {
  WorldConfig world;
  ModelDims model;
  TrainConfig pretrain;
  FinetuneConfig finetune;
  LossWeights weights;
  std::size_t shots = 10;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  bool parallel = false;
};

struct AblationRow {
  char variant = 'a';
  std::uint64_t seed = 0;
  Metrics metrics;
  Separation separation;
};

struct AblationTable {
  std::vector<AblationRow> rows;  // variant-major: a..e, seeds in order

  std::vector<const AblationRow*> variant(char v) const {
    std::vector<const AblationRow*> out;
    for (const auto& r : rows)
      if (r.variant == v) out.push_back(&r);
    return out;
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct VariantMedians {
  double b_acc, n_acc, all_acc;
};

inline VariantMedians variant_medians(const AblationTable& t, char v) {
  std::vector<double> b, n, a;
  for (const auto* r : t.variant(v)) {
    b.push_back(r->metrics.b_acc);
    n.push_back(r->metrics.n_acc);
    a.push_back(r->metrics.all_acc);
  }
  return {median(b), median(n), median(a)};
}

inline constexpr const char* kVariants = "abcde";

inline LossWeights variant_weights(char v, const LossWeights& full) {
  switch (v) {
    case 'b': return {0.0, 0.0};
    case 'c': return {full.lambda1, 0.0};
    case 'd': return {0.0, full.lambda2};
    case 'e': return full;
    default: throw Error(std::string("variant ") + v + " has no fine-tuning stage");
  }
}

// Seed of the K-shot draw for a given session (1-based).
inline std::uint64_t support_seed(std::uint64_t seed, std::size_t session) {
  return session == 1 ? mix_seed(seed, "support") : mix_seed(seed, "support.session-" + std::to_string(session));
}

struct SeedRun {
  World world;
  Checkpoint base;
  PrototypeStore store;
  Dataset support;
};

inline SeedRun prepare_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  SeedRun r;
  WorldConfig wc = cfg.world;
  wc.seed = seed;
  r.world = generate_world(wc);
  r.base = pretrain_base(r.world, cfg.model, cfg.pretrain, seed);
  r.store = extract_store(r.base, filter_classes(r.world.train, r.world.base_ids()));
  const auto novel = r.world.novel_ids();
  r.support = sample_kshot(r.world.train, novel, cfg.shots, support_seed(seed, 1));
  return r;
}

inline std::vector<AblationRow> ablate_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  const SeedRun run = prepare_seed(cfg, seed);
  FinetuneConfig fc = cfg.finetune;
  fc.seed = seed;
  std::vector<AblationRow> rows;
  rows.push_back({'a', seed, evaluate(run.base, run.world.test), embedding_separation(run.base, run.world.test)});
  for (char v : std::string("bcde")) {
    const auto res = finetune_incremental(run.base, run.store, run.support, variant_weights(v, cfg.weights), fc);
    rows.push_back({v, seed, evaluate(res.checkpoint, run.world.test),
                    embedding_separation(res.checkpoint, run.world.test)});
  }
  return rows;
}

// Five variants x every seed on identical data; rows merged in fixed order.
inline AblationTable run_ablation(const ExperimentConfig& cfg) {
  std::vector<std::vector<AblationRow>> per_seed(cfg.seeds.size());
  if (cfg.parallel) {
    std::vector<std::future<std::vector<AblationRow>>> jobs;
    for (auto s : cfg.seeds) jobs.push_back(std::async(std::launch::async, ablate_seed, std::cref(cfg), s));
    for (std::size_t i = 0; i < jobs.size(); ++i) per_seed[i] = jobs[i].get();
  } else {
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) per_seed[i] = ablate_seed(cfg, cfg.seeds[i]);
  }
  AblationTable t;
  for (char v : std::string(kVariants))
    for (const auto& rows : per_seed)
      for (const auto& r : rows)
        if (r.variant == v) t.rows.push_back(r);
  return t;
}

inline std::string ablation_csv(const AblationTable& t) {
  std::string out = "variant,seed,bAcc,nAcc,allAcc\n";
  for (const auto& r : t.rows) {
    out += fmt::format("{},{},{:.6f},{:.6f},{:.6f}\n", r.variant, r.seed, r.metrics.b_acc, r.metrics.n_acc,
                       r.metrics.all_acc);
  }
  for (char v : std::string(kVariants)) {
    if (t.variant(v).empty()) continue;
    const auto m = variant_medians(t, v);
    out += fmt::format("{},median,{:.6f},{:.6f},{:.6f}\n", v, m.b_acc, m.n_acc, m.all_acc);
  }
  return out;
}

}  // namespace protodrift
