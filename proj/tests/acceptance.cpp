// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "oracles/exact_ot.hpp"
#include "oracles/finite_diff.hpp"
#include "protodrift/harness.hpp"
#include "protodrift/hpc.hpp"
#include "protodrift/otcal.hpp"
#include "protodrift/protostore.hpp"
#include "protodrift/scatter.hpp"

using namespace protodrift;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;
};

Tensor to_tensor(const std::vector<std::vector<double>>& m) {
  Tensor t = Tensor::zeros({m.size(), m.front().size()});
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j) t(i, j) = m[i][j];
  return t;
}

Tensor gaussian(std::vector<std::size_t> shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& v : t.data()) v = nd(rng);
  return t;
}

Outcome gradients() {
  double ce = 0, hpc = 0, cal = 0;
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor logits = gaussian({4, 3}, rng, 2.0);
    std::vector<std::size_t> targets;
    for (int i = 0; i < 4; ++i) targets.push_back(rng() % 3);
    ComputeTape t;
    t.backward(softmax_cross_entropy(t, t.parameter("logits", logits), targets));
    ce = std::max(ce, oracle::compare_gradients({{"logits", logits}}, t.parameter_grads(), [&](const ParameterMap& p) {
                        ComputeTape u;
                        return u.value(softmax_cross_entropy(u, u.constant(p.at("logits")), targets)).item();
                      }).max_rel_error);
  }

  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    const Tensor z = gaussian({8, 5}, rng), p = gaussian({3, 5}, rng);
    std::vector<double> iou;
    std::vector<int> labels;
    std::uniform_real_distribution<double> u(0.4, 1.0);
    for (int i = 0; i < 8; ++i) {
      iou.push_back(u(rng));
      labels.push_back(static_cast<int>(rng() % 3));
    }
    auto build = [&](ComputeTape& t, NodeId zn, NodeId pn) {
      return hpc_loss(t, {t.l2_normalize(zn), iou, labels}, t.l2_normalize(pn), {});
    };
    ComputeTape t;
    t.backward(build(t, t.parameter("z", z), t.parameter("p", p)));
    hpc = std::max(hpc, oracle::compare_gradients({{"z", z}, {"p", p}}, t.parameter_grads(), [&](const ParameterMap& q) {
                          ComputeTape v;
                          return v.value(build(v, v.constant(q.at("z")), v.constant(q.at("p")))).item();
                        }).max_rel_error);
  }

  const SinkhornOptions tight{{0.1, 0.01, 0.001}, 200000, 1e-13};
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(300 + seed);
    PrototypeStore store;
    store.feature_dim = 3;
    for (int k = 0; k < 3; ++k) {
      std::vector<double> mean(3, 0.0);
      mean[k] = 1.0;
      store.base.push_back({k, class_name(k), mean, oracle::random_simplex(3, rng)});
    }
    std::uniform_real_distribution<double> u(0.1, 1.0);
    Tensor c = Tensor::zeros({4, 3});
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 3; ++j) c(i, j) = i == j ? 0.0 : u(rng);
    const CostMatrix cost{c, CostMode::semantic, {0, 1, 2, 3}, {0, 1, 2}};
    const Tensor w = gaussian({4, 3}, rng), b = gaussian({4}, rng, 0.5);
    ComputeTape t;
    t.backward(calibration_loss(t, t.parameter("w", w), t.parameter("b", b), store, cost, tight));
    cal = std::max(cal, oracle::compare_gradients({{"w", w}, {"b", b}}, t.parameter_grads(), [&](const ParameterMap& p) {
                          ComputeTape v;
                          CalibrationReport rep;
                          calibration_loss(v, v.constant(p.at("w")), v.constant(p.at("b")), store, cost, tight, &rep);
                          double m = 0;
                          for (double e : rep.entropic) m += e / static_cast<double>(rep.entropic.size());
                          return m;
                        }).max_rel_error);
  }
  return {ce <= 1e-4 && hpc <= 1e-4 && cal <= 1e-3,
          fmt::format("max rel err: cross-entropy {:.2e}, contrastive {:.2e}, calibration {:.2e}", ce, hpc, cal)};
}

Outcome ot_oracle() {
  std::mt19937_64 rng(2024);
  double worst_gap = 0, worst_marginal = 0;
  bool ok = true;
  for (int t = 0; t < 100; ++t) {
    const std::size_t q = 1 + rng() % 5, k = 1 + rng() % 5;
    const auto in = oracle::random_instance(q, k, rng);
    const Tensor c = to_tensor(in.cost);
    const auto plan = sinkhorn(in.f, in.d, c);
    double cmax = 0;
    for (double v : c.data()) cmax = std::max(cmax, v);
    const double gap = std::abs(wasserstein_cost(plan.plan, c) - oracle::min_cost_flow(in).cost);
    ok = ok && plan.epsilon == 1e-3 && gap <= 1e-2 * (1 + cmax) && plan.marginal_error <= 1e-6;
    worst_gap = std::max(worst_gap, gap);
    worst_marginal = std::max(worst_marginal, plan.marginal_error);
  }
  return {ok, fmt::format("100 instances: worst cost gap {:.2e}, worst marginal L1 {:.2e}", worst_gap, worst_marginal)};
}

Outcome hand_values() {
  ComputeTape t;
  NodeId z = t.constant(Tensor::matrix({{1, 0}, {1, 0}}));
  NodeId p = t.constant(Tensor::matrix({{0, 1}}));
  const double two = t.value(hpc_loss(t, {z, {1.0, 1.0}, {0, 0}}, p, {})).item();
  const double gated = t.value(hpc_loss(t, {z, {0.5, 0.5}, {0, 0}}, p, {})).item();
  const Tensor c = to_tensor({{0, 1}, {1, 0}});
  const double moved =
      wasserstein_cost(sinkhorn(std::vector<double>{0.3, 0.7}, std::vector<double>{0.7, 0.3}, c).plan, c);
  const bool ok = std::abs(two - std::log1p(std::exp(-10.0))) <= 1e-8 && gated == 0.0 && std::abs(moved - 0.4) <= 1e-3;
  return {ok, fmt::format("contrastive {:.10e}, gated {}, transport {:.6f}", two, gated, moved)};
}

struct Artifacts {
  std::string world, base, store, tuned, tuned_store, svg, csv;
  bool operator==(const Artifacts&) const = default;
};

Artifacts pipeline(std::uint64_t seed) {
  ExperimentConfig cfg;
  SeedRun r = prepare_seed(cfg, seed);
  FinetuneConfig fc = cfg.finetune;
  fc.seed = seed;
  const SessionResult res = finetune_incremental(r.base, r.store, r.support, cfg.weights, fc);
  ExperimentConfig small;
  small.world.samples_per_class_train = 40;
  small.world.samples_per_class_test = 20;
  small.pretrain.epochs = 3;
  small.finetune.iterations = 10;
  small.shots = 5;
  small.seeds = {seed, seed + 1};
  return {to_json(r.world).dump(),    to_json(r.base).dump(),  to_json(r.store).dump(),
          to_json(res.checkpoint).dump(), to_json(res.store).dump(), emit_scatter(res.checkpoint, r.world.test),
          ablation_csv(run_ablation(small))};
}

Outcome protocol() {
  ExperimentConfig cfg;
  const SeedRun full = prepare_seed(cfg, 0);
  FinetuneConfig fc = cfg.finetune;
  const SessionResult with_data = finetune_incremental(full.base, full.store, full.support, cfg.weights, fc);

  bool frozen = true;
  for (const auto& [name, t] : full.base.params)
    if (param::is_extractor(name)) frozen = frozen && with_data.checkpoint.params.at(name) == t;

  SeedRun bare = prepare_seed(cfg, 0);
  std::erase_if(bare.world.train, [&](const auto& p) { return bare.base.registry.contains(p.y); });
  bool replay_free = filter_classes(bare.world.train, bare.world.base_ids()).empty();
  replay_free = replay_free &&
                finetune_incremental(bare.base, bare.store, bare.support, cfg.weights, fc).checkpoint == with_data.checkpoint;

  const bool identical = pipeline(0) == pipeline(0);
  return {frozen && replay_free && identical,
          fmt::format("extractor frozen {}, replay-free {}, byte-identical replay {}", frozen, replay_free, identical)};
}

Outcome ablation(const AblationTable& t) {
  const auto a = variant_medians(t, 'a'), b = variant_medians(t, 'b'), c = variant_medians(t, 'c'),
             d = variant_medians(t, 'd'), e = variant_medians(t, 'e');
  bool a_zero = true;
  for (const auto* r : t.variant('a')) a_zero = a_zero && r->metrics.n_acc == 0.0;
  const bool novel = c.n_acc - b.n_acc >= 0.03;
  const bool base = d.b_acc - b.b_acc >= 0.03;
  bool best = true;
  for (const auto& m : {a, b, c, d}) best = best && e.all_acc >= m.all_acc;
  return {novel && base && best && a_zero,
          fmt::format("nAcc c-b {:+.4f} [{}], bAcc d-b {:+.4f} [{}], allAcc e {:.4f} vs a/b/c/d {:.4f}/{:.4f}/{:.4f}/{:.4f} "
                      "[{}], nAcc(a)=0 [{}]",
                      c.n_acc - b.n_acc, novel ? "ok" : "short", d.b_acc - b.b_acc, base ? "ok" : "short", e.all_acc,
                      a.all_acc, b.all_acc, c.all_acc, d.all_acc, best ? "ok" : "short", a_zero ? "ok" : "short")};
}

Outcome geometry(const AblationTable& t) {
  const auto b = t.variant('b'), e = t.variant('e');
  std::size_t wins = 0;
  std::string gaps;
  for (std::size_t i = 0; i < e.size(); ++i) {
    const double ge = e[i]->separation.intra - e[i]->separation.inter;
    const double gb = b[i]->separation.intra - b[i]->separation.inter;
    wins += ge > 0 && ge > gb;
    gaps += fmt::format(" {:.3f}/{:.3f}", ge, gb);
  }
  return {wins >= 4, fmt::format("{} of {} seeds; full/(b) gaps:{}", wins, e.size(), gaps)};
}

bool report(int id, const std::string& name, const Outcome& o, double seconds, double budget) {
  const bool in_time = budget <= 0 || seconds < budget;
  const bool pass = o.pass && in_time;
  std::cout << fmt::format("[{}] {} {}: {} ({:.1f} s{})\n", pass ? "PASS" : "FAIL", id, name, o.detail, seconds,
                           budget > 0 ? fmt::format(", budget {:.0f} s", budget) : "");
  std::cout.flush();
  return pass;
}

template <class F>
std::pair<Outcome, double> timed(F&& f) {
  const auto t0 = Clock::now();
  Outcome o = f();
  return {o, std::chrono::duration<double>(Clock::now() - t0).count()};
}

}  // namespace

int main() {
  bool all = true;
  try {
    auto [o1, s1] = timed(gradients);
    all &= report(1, "gradient suite", o1, s1, 30);
    auto [o2, s2] = timed(ot_oracle);
    all &= report(2, "transport vs exact oracle", o2, s2, 60);
    auto [o3, s3] = timed(hand_values);
    all &= report(3, "hand-computed values", o3, s3, 0);
    auto [o4, s4] = timed(protocol);
    all &= report(4, "protocol invariants", o4, s4, 0);

    const auto t0 = Clock::now();
    const AblationTable table = run_ablation(ExperimentConfig{});
    const double s5 = std::chrono::duration<double>(Clock::now() - t0).count();
    all &= report(5, "directional ablation", ablation(table), s5, 600);
    all &= report(6, "embedding geometry", geometry(table), 0, 0);
  } catch (const std::exception& e) {
    std::cout << "[FAIL] acceptance aborted: " << e.what() << "\n";
    return 1;
  }
  return all ? 0 : 1;
}
