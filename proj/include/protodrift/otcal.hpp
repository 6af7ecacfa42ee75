#pragma once

// Entropic optimal transport between the fine-tuned model's prediction f (Q
// classes) and the stored base prediction d (K_base classes) on each base
// prototype, and the calibration loss built on it.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "protodrift/error.hpp"
#include "protodrift/hpc.hpp"
#include "protodrift/protostore.hpp"
#include "protodrift/registry.hpp"
#include "protodrift/tensor.hpp"

namespace protodrift {

enum class CostMode { zero_one, semantic };

inline const char* to_string(CostMode m) { return m == CostMode::zero_one ? "zero_one" : "semantic"; }

inline CostMode cost_mode_from_string(const std::string& s) {
  if (s == "zero_one") return CostMode::zero_one;
  if (s == "semantic") return CostMode::semantic;
  throw ConfigError("unknown cost mode '" + s + "' (expected zero_one or semantic)");
}

struct CostMatrix {
  Tensor values;  // Q x K_base
  CostMode mode = CostMode::semantic;
  std::vector<int> row_ids;
  std::vector<int> col_ids;
};

// Rows follow the registry (all current classes), columns the base
// prototypes. Entries with matching class ids are exactly 0.
inline CostMatrix build_cost_matrix(const ClassRegistry& registry, const PrototypeStore& store,
                                    const std::map<int, std::vector<double>>& novel_means, CostMode mode) {
  CostMatrix c;
  c.mode = mode;
  c.row_ids = registry.ids();
  for (const auto& p : store.base) c.col_ids.push_back(p.class_id);
  if (c.col_ids.empty()) throw Error("cost matrix needs at least one base prototype");
  for (int id : c.col_ids) {
    if (!registry.contains(id)) throw Error("base class " + std::to_string(id) + " is not in the registry");
  }

  auto mean_of = [&](int id) -> const std::vector<double>& {
    if (const Prototype* p = store.find(id)) return p->mean_feature;
    auto it = novel_means.find(id);
    if (it == novel_means.end()) throw Error("class " + std::to_string(id) + " has no prototype mean for semantic cost");
    return it->second;
  };

  const std::size_t q = c.row_ids.size(), k = c.col_ids.size();
  c.values = Tensor::zeros({q, k});
  for (std::size_t i = 0; i < q; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      if (c.row_ids[i] == c.col_ids[j]) continue;
      if (mode == CostMode::zero_one) {
        c.values(i, j) = 1.0;
      } else {
        const auto& a = mean_of(c.row_ids[i]);
        const auto& b = mean_of(c.col_ids[j]);
        c.values(i, j) = a == b ? 0.0 : std::clamp(1.0 - cosine_sim(a, b), 0.0, 2.0);
      }
    }
  }
  return c;
}

struct SinkhornOptions {
  std::vector<double> eps_schedule{0.1, 0.01, 0.001};
  std::size_t max_iter = 2000;  // per epsilon stage
  double tol = 1e-9;            // L1 marginal violation
  // Newton steps on the column potentials after a stage that hit max_iter.
  std::size_t newton_steps = 50;

  friend bool operator==(const SinkhornOptions&, const SinkhornOptions&) = default;
};

struct TransportPlan {
  Tensor plan;                 // Q x K
  std::vector<double> alpha;   // row potentials (-inf where f_i = 0)
  std::vector<double> beta;    // column potentials (-inf where d_j = 0)
  double epsilon = 0.0;        // final stage
  std::size_t iterations = 0;  // summed over stages
  std::size_t newton_iterations = 0;
  double marginal_error = 0.0;
  bool converged = false;
  // <T,C> + eps * KL(T || f d^T) at the end of each stage.
  std::vector<double> stage_objectives;
  // <T,C> + eps * sum T (log T - 1) at the final eps; d/df_i of it is alpha_i.
  double entropic_value = 0.0;
};

namespace detail {

inline void check_marginal(std::span<const double> m, const char* what) {
  double s = 0.0;
  for (double v : m) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw Error(std::string("sinkhorn: ") + what + " has a negative or non-finite entry");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-6) {
    throw Error(std::string("sinkhorn: ") + what + " is off the simplex (sum " + std::to_string(s) + ")");
  }
}

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double lse(std::span<const double> v) {
  double mx = kNegInf;
  for (double x : v) mx = std::max(mx, x);
  if (mx == kNegInf) return kNegInf;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

inline constexpr double kNewtonTrust = 20.0;

// Newton's method on the semi-dual
//   G(beta) = sum_i f_i alpha_i(beta) + sum_j d_j beta_j,
// concave, with alpha re-derived from beta so rows always match f. Steps are
// backtracked until G rises by an Armijo fraction of the predicted gain.
inline bool newton_refine(const std::vector<double>& logf, const std::vector<double>& logd, std::span<const double> f,
                          std::span<const double> d, const Tensor& cost, double eps, const SinkhornOptions& opt,
                          std::vector<double>& alpha, std::vector<double>& beta, std::size_t& steps) {
  const std::size_t q = f.size(), k = d.size();
  std::vector<std::size_t> cols;
  for (std::size_t j = 0; j < k; ++j)
    if (logd[j] != kNegInf) cols.push_back(j);
  if (cols.size() < 2) return false;

  std::vector<double> terms(k);
  Eigen::MatrixXd plan(q, k);
  struct Eval {
    double objective, error;
  };
  auto evaluate = [&](const std::vector<double>& b, std::vector<double>& a) {
    plan.setZero();
    double g = 0.0;
    for (std::size_t i = 0; i < q; ++i) {
      if (logf[i] == kNegInf) continue;
      for (std::size_t j = 0; j < k; ++j) terms[j] = b[j] == kNegInf ? kNegInf : (b[j] - cost(i, j)) / eps;
      a[i] = eps * (logf[i] - lse(terms));
      g += f[i] * a[i];
      for (std::size_t j = 0; j < k; ++j)
        if (b[j] != kNegInf) plan(i, j) = std::exp((a[i] + b[j] - cost(i, j)) / eps);
    }
    double err = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      err += std::abs(plan.col(j).sum() - d[j]);
      if (b[j] != kNegInf) g += d[j] * b[j];
    }
    return Eval{g, err};
  };

  Eval cur = evaluate(beta, alpha);
  // Gauge: the potential of the heaviest column is held fixed.
  std::size_t pin = cols.front();
  for (std::size_t j : cols)
    if (d[j] > d[pin]) pin = j;
  std::vector<std::size_t> free;
  for (std::size_t j : cols)
    if (j != pin) free.push_back(j);
  const auto n = static_cast<Eigen::Index>(free.size());

  for (std::size_t it = 0; it < opt.newton_steps && cur.error > opt.tol; ++it) {
    ++steps;
    // M = diag(colsum) - sum_i T_i T_i^T / f_i is eps times the negated Hessian.
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd g(n);
    for (Eigen::Index a = 0; a < n; ++a) {
      const auto ja = static_cast<Eigen::Index>(free[static_cast<std::size_t>(a)]);
      const double colsum = plan.col(ja).sum();
      g(a) = d[static_cast<std::size_t>(ja)] - colsum;
      m(a, a) = colsum;
      for (Eigen::Index b = 0; b < n; ++b) {
        const auto jb = static_cast<Eigen::Index>(free[static_cast<std::size_t>(b)]);
        double s = 0.0;
        for (std::size_t i = 0; i < q; ++i)
          if (f[i] > 0.0) s += plan(static_cast<Eigen::Index>(i), ja) * plan(static_cast<Eigen::Index>(i), jb) / f[i];
        m(a, b) -= s;
      }
    }
    // A ridge keeps the solve defined when the plan is nearly a permutation,
    // and no potential moves by more than a few epsilon per step.
    m.diagonal().array() += 1e-12 + 1e-9 * m.diagonal().maxCoeff();
    Eigen::VectorXd step = eps * m.ldlt().solve(g);
    const double biggest = step.cwiseAbs().maxCoeff();
    if (biggest > kNewtonTrust * eps) step *= kNewtonTrust * eps / biggest;
    const double predicted = g.dot(step);
    if (!step.allFinite() || !(predicted > 0.0)) break;

    bool accepted = false;
    std::vector<double> trial_b, trial_a = alpha;
    double t = 1.0;
    for (int halving = 0; halving < 40; ++halving, t *= 0.5) {
      trial_b = beta;
      for (Eigen::Index a = 0; a < n; ++a) trial_b[free[static_cast<std::size_t>(a)]] += t * step(a);
      const Eval e = evaluate(trial_b, trial_a);
      if (std::isfinite(e.objective) && e.objective >= cur.objective + 1e-4 * t * predicted) {
        beta = trial_b;
        alpha = trial_a;
        cur = e;
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
  }
  cur = evaluate(beta, alpha);
  return cur.error <= opt.tol;
}

}  // namespace detail

// Log-domain Sinkhorn with epsilon scaling; potentials carry over between
// stages. Given a previous plan of the same shape (e.g. from the last training
// step), its potentials seed a solve at the final epsilon only.
inline TransportPlan sinkhorn(std::span<const double> f, std::span<const double> d, const Tensor& cost,
                              const SinkhornOptions& opt = {}, const TransportPlan* warm = nullptr) {
  using detail::kNegInf;
  const std::size_t q = f.size(), k = d.size();
  if (cost.rows() != q || cost.cols() != k || cost.rank() != 2) {
    throw Error("sinkhorn: cost " + cost.shape_string() + " vs marginals " + std::to_string(q) + "/" + std::to_string(k));
  }
  for (double c : cost.data())
    if (!(c >= 0.0) || !std::isfinite(c)) throw Error("sinkhorn: cost entries must be finite and non-negative");
  detail::check_marginal(f, "f");
  detail::check_marginal(d, "d");
  if (opt.eps_schedule.empty()) throw Error("sinkhorn: empty epsilon schedule");
  for (std::size_t s = 0; s < opt.eps_schedule.size(); ++s) {
    if (!(opt.eps_schedule[s] > 0.0) || (s && opt.eps_schedule[s] > opt.eps_schedule[s - 1])) {
      throw Error("sinkhorn: epsilon schedule must be positive and non-increasing");
    }
  }

  std::vector<double> logf(q), logd(k);
  for (std::size_t i = 0; i < q; ++i) logf[i] = f[i] > 0.0 ? std::log(f[i]) : kNegInf;
  for (std::size_t j = 0; j < k; ++j) logd[j] = d[j] > 0.0 ? std::log(d[j]) : kNegInf;

  TransportPlan out;
  out.alpha.assign(q, 0.0);
  out.beta.assign(k, 0.0);
  for (std::size_t i = 0; i < q; ++i)
    if (f[i] == 0.0) out.alpha[i] = kNegInf;
  for (std::size_t j = 0; j < k; ++j)
    if (d[j] == 0.0) out.beta[j] = kNegInf;
  auto& alpha = out.alpha;
  auto& beta = out.beta;

  std::vector<double> schedule = opt.eps_schedule;
  if (warm && warm->alpha.size() == q && warm->beta.size() == k) {
    bool usable = true;
    for (std::size_t i = 0; i < q; ++i) usable = usable && (f[i] == 0.0 || std::isfinite(warm->alpha[i]));
    for (std::size_t j = 0; j < k; ++j) usable = usable && (d[j] == 0.0 || std::isfinite(warm->beta[j]));
    if (usable) {
      for (std::size_t i = 0; i < q; ++i)
        if (f[i] != 0.0) alpha[i] = warm->alpha[i];
      for (std::size_t j = 0; j < k; ++j)
        if (d[j] != 0.0) beta[j] = warm->beta[j];
      schedule = {opt.eps_schedule.back()};
    }
  }

  std::vector<double> terms(std::max(q, k));
  auto lse = [&](std::size_t n) {
    double mx = kNegInf;
    for (std::size_t t = 0; t < n; ++t) mx = std::max(mx, terms[t]);
    if (mx == kNegInf) return kNegInf;
    double s = 0.0;
    for (std::size_t t = 0; t < n; ++t) s += std::exp(terms[t] - mx);
    return mx + std::log(s);
  };
  auto log_plan = [&](std::size_t i, std::size_t j, double eps) {
    if (alpha[i] == kNegInf || beta[j] == kNegInf) return kNegInf;
    return (alpha[i] + beta[j] - cost(i, j)) / eps;
  };
  auto row_error = [&](double eps) {
    double err = 0.0;
    for (std::size_t i = 0; i < q; ++i) {
      double r = 0.0;
      for (std::size_t j = 0; j < k; ++j) r += std::exp(log_plan(i, j, eps));
      err += std::abs(r - f[i]);
    }
    return err;
  };

  for (double eps : schedule) {
    out.converged = false;
    for (std::size_t it = 0; it < opt.max_iter; ++it) {
      for (std::size_t i = 0; i < q; ++i) {
        if (logf[i] == kNegInf) continue;
        for (std::size_t j = 0; j < k; ++j) terms[j] = beta[j] == kNegInf ? kNegInf : (beta[j] - cost(i, j)) / eps;
        alpha[i] = eps * (logf[i] - lse(k));
      }
      for (std::size_t j = 0; j < k; ++j) {
        if (logd[j] == kNegInf) continue;
        for (std::size_t i = 0; i < q; ++i) terms[i] = alpha[i] == kNegInf ? kNegInf : (alpha[i] - cost(i, j)) / eps;
        beta[j] = eps * (logd[j] - lse(q));
      }
      ++out.iterations;
      if (row_error(eps) <= opt.tol) {
        out.converged = true;
        break;
      }
    }
    if (!out.converged && opt.newton_steps > 0) {
      out.converged = detail::newton_refine(logf, logd, f, d, cost, eps, opt, alpha, beta, out.newton_iterations);
    }
    for (double a : alpha)
      if (std::isnan(a) || a == std::numeric_limits<double>::infinity()) throw Error("sinkhorn: non-finite potential");
    for (double b : beta)
      if (std::isnan(b) || b == std::numeric_limits<double>::infinity()) throw Error("sinkhorn: non-finite potential");

    // <T,C> + eps * (sum T log(T/R) - sum T + sum R), R = f d^T, sum R = 1.
    double transport = 0.0, kl = 1.0;
    for (std::size_t i = 0; i < q; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const double lt = log_plan(i, j, eps);
        if (lt == kNegInf) continue;
        const double t = std::exp(lt);
        transport += t * cost(i, j);
        kl += t * (lt - logf[i] - logd[j]) - t;
      }
    out.stage_objectives.push_back(transport + eps * kl);
    out.epsilon = eps;
  }

  const double eps = out.epsilon;
  out.plan = Tensor::zeros({q, k});
  double value = 0.0;
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const double lt = log_plan(i, j, eps);
      const double t = std::exp(lt);
      out.plan(i, j) = t;
      if (t > 0.0) value += t * cost(i, j) + eps * t * (lt - 1.0);
    }
  out.entropic_value = value;

  double row_err = 0.0, col_err = 0.0;
  for (std::size_t i = 0; i < q; ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < k; ++j) r += out.plan(i, j);
    row_err += std::abs(r - f[i]);
  }
  for (std::size_t j = 0; j < k; ++j) {
    double c = 0.0;
    for (std::size_t i = 0; i < q; ++i) c += out.plan(i, j);
    col_err += std::abs(c - d[j]);
  }
  out.marginal_error = std::max(row_err, col_err);
  if (!out.plan.all_finite()) throw Error("sinkhorn: non-finite transport plan");
  return out;
}

// Frobenius inner product <T, C>.
inline double wasserstein_cost(const Tensor& plan, const Tensor& cost) {
  if (plan.shape() != cost.shape()) {
    throw Error("wasserstein_cost shape mismatch: " + plan.shape_string() + " vs " + cost.shape_string());
  }
  double s = 0.0;
  for (std::size_t i = 0; i < plan.size(); ++i) s += plan[i] * cost[i];
  return s;
}

struct CalibrationReport {
  std::vector<double> per_prototype;  // W_k
  std::vector<double> entropic;       // entropic value per prototype
  double loss = 0.0;                  // mean of W_k
};

inline constexpr double kCalibrationMaxMarginalError = 1e-4;

// L_cal = (1/K) sum_k <T_k, C>, with T_k the Sinkhorn plan between
// softmax(W p_k + b) and the stored d_k. The gradient w.r.t. f is the centered
// row potential alpha - mean(alpha), the exact derivative of the entropic
// value, injected on the tape and chained through the softmax.
inline NodeId calibration_loss(ComputeTape& tape, NodeId classifier_w, NodeId classifier_b,
                               const PrototypeStore& store, const CostMatrix& cost,
                               const SinkhornOptions& opt = {}, CalibrationReport* report = nullptr,
                               std::vector<TransportPlan>* warm = nullptr) {
  if (store.base.empty()) throw Error("calibration_loss: prototype store is empty");
  const std::size_t q = tape.value(classifier_w).rows();
  const std::size_t kb = store.base.size();
  if (q < kb) throw Error("calibration_loss: classifier has fewer classes than the base set");
  if (cost.values.rows() != q || cost.values.cols() != kb) {
    throw Error("calibration_loss: cost matrix " + cost.values.shape_string() + " does not match " + std::to_string(q) +
                " classes x " + std::to_string(kb) + " base prototypes");
  }

  NodeId protos = tape.constant(store.base_means());
  NodeId logits = tape.add_bias(tape.matmul(protos, tape.transpose(classifier_w)), classifier_b);
  NodeId probs = tape.softmax(logits);
  const Tensor& f = tape.value(probs);

  Tensor grad = Tensor::zeros({kb, q});
  CalibrationReport rep;
  double total = 0.0;
  for (std::size_t k = 0; k < kb; ++k) {
    const TransportPlan* prev = warm && warm->size() == kb ? &(*warm)[k] : nullptr;
    TransportPlan plan = sinkhorn(f.row(k), store.base[k].base_distribution, cost.values, opt, prev);
    if (prev && plan.marginal_error > kCalibrationMaxMarginalError) {
      plan = sinkhorn(f.row(k), store.base[k].base_distribution, cost.values, opt);
    }
    if (plan.marginal_error > kCalibrationMaxMarginalError) {
      throw Error("calibration_loss: Sinkhorn did not converge for prototype " +
                  std::to_string(store.base[k].class_id) + " (marginal error " + std::to_string(plan.marginal_error) +
                  ")");
    }
    const double w = wasserstein_cost(plan.plan, cost.values);
    rep.per_prototype.push_back(w);
    rep.entropic.push_back(plan.entropic_value);
    total += w;

    // Classes with underflowed probability carry alpha = -inf; the softmax
    // Jacobian gives them zero weight, so they are left out.
    double mean_alpha = 0.0;
    std::size_t live = 0;
    for (double a : plan.alpha)
      if (std::isfinite(a)) mean_alpha += a, ++live;
    mean_alpha /= static_cast<double>(live);
    for (std::size_t i = 0; i < q; ++i)
      if (std::isfinite(plan.alpha[i])) grad(k, i) = (plan.alpha[i] - mean_alpha) / static_cast<double>(kb);
    if (warm) {
      if (warm->size() != kb) warm->resize(kb);
      (*warm)[k] = std::move(plan);
    }
  }
  rep.loss = total / static_cast<double>(kb);
  if (report) *report = std::move(rep);
  return tape.surrogate(probs, total / static_cast<double>(kb), std::move(grad));
}

}  // namespace protodrift
