#pragma once

// Exact discrete optimal transport for small instances, independent of the
// Sinkhorn code: successive shortest paths (Bellman-Ford) on the
// source -> rows -> columns -> sink network, plus a brute-force vertex
// enumeration used to cross-check it on 3x3 problems.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

struct Instance {
  std::vector<double> f, d;
  std::vector<std::vector<double>> cost;  // f.size() x d.size()
};

struct ExactPlan {
  std::vector<std::vector<double>> plan;
  double cost = 0.0;
};

inline ExactPlan min_cost_flow(const Instance& in) {
  const int q = static_cast<int>(in.f.size()), k = static_cast<int>(in.d.size());
  const int src = q + k, dst = q + k + 1, n = q + k + 2;
  struct Edge {
    int to;
    double cap, cost;
    int rev;
  };
  std::vector<std::vector<Edge>> g(n);
  auto add = [&](int a, int b, double cap, double cost) {
    g[a].push_back({b, cap, cost, static_cast<int>(g[b].size())});
    g[b].push_back({a, 0.0, -cost, static_cast<int>(g[a].size()) - 1});
  };
  for (int i = 0; i < q; ++i) add(src, i, in.f[i], 0.0);
  for (int i = 0; i < q; ++i)
    for (int j = 0; j < k; ++j) add(i, q + j, 1e300, in.cost[i][j]);
  for (int j = 0; j < k; ++j) add(q + j, dst, in.d[j], 0.0);

  double remaining = 0.0;
  for (double v : in.f) remaining += v;
  constexpr double kTiny = 1e-15;
  while (remaining > kTiny) {
    std::vector<double> dist(n, std::numeric_limits<double>::infinity());
    std::vector<int> pv(n, -1), pe(n, -1);
    dist[src] = 0.0;
    for (int round = 0; round < n; ++round) {
      bool changed = false;
      for (int u = 0; u < n; ++u) {
        if (!std::isfinite(dist[u])) continue;
        for (int e = 0; e < static_cast<int>(g[u].size()); ++e) {
          const Edge& ed = g[u][e];
          if (ed.cap > kTiny && dist[u] + ed.cost < dist[ed.to] - 1e-15) {
            dist[ed.to] = dist[u] + ed.cost;
            pv[ed.to] = u;
            pe[ed.to] = e;
            changed = true;
          }
        }
      }
      if (!changed) break;
    }
    if (!std::isfinite(dist[dst])) break;
    double push = remaining;
    for (int v = dst; v != src; v = pv[v]) push = std::min(push, g[pv[v]][pe[v]].cap);
    for (int v = dst; v != src; v = pv[v]) {
      Edge& ed = g[pv[v]][pe[v]];
      ed.cap -= push;
      g[v][ed.rev].cap += push;
    }
    remaining -= push;
  }

  ExactPlan out;
  out.plan.assign(q, std::vector<double>(k, 0.0));
  for (int i = 0; i < q; ++i)
    for (const Edge& ed : g[i])
      if (ed.to >= q && ed.to < q + k) {
        const double flow = g[ed.to][ed.rev].cap;
        out.plan[i][ed.to - q] = flow;
        out.cost += flow * in.cost[i][ed.to - q];
      }
  return out;
}

// Minimum over every basic feasible solution: choose q+k-1 cells, solve the
// marginal equations restricted to them, keep non-negative solutions.
inline double vertex_enumeration(const Instance& in) {
  const int q = static_cast<int>(in.f.size()), k = static_cast<int>(in.d.size());
  const int cells = q * k, basis = q + k - 1;
  std::vector<int> pick(cells, 0);
  std::fill(pick.end() - basis, pick.end(), 1);
  double best = std::numeric_limits<double>::infinity();
  do {
    std::vector<int> idx;
    for (int c = 0; c < cells; ++c)
      if (pick[c]) idx.push_back(c);
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(q + k, basis);
    Eigen::VectorXd b(q + k);
    for (int i = 0; i < q; ++i) b(i) = in.f[i];
    for (int j = 0; j < k; ++j) b(q + j) = in.d[j];
    for (int t = 0; t < basis; ++t) {
      a(idx[t] / k, t) = 1.0;
      a(q + idx[t] % k, t) = 1.0;
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
    if (lu.rank() < basis) continue;
    const Eigen::VectorXd x = lu.solve(b);
    if ((a * x - b).cwiseAbs().maxCoeff() > 1e-12 || x.minCoeff() < -1e-12) continue;
    double c = 0.0;
    for (int t = 0; t < basis; ++t) c += x(t) * in.cost[idx[t] / k][idx[t] % k];
    best = std::min(best, c);
  } while (std::next_permutation(pick.begin(), pick.end()));
  return best;
}

// A random feasible plan: convex mixture of north-west-corner plans taken
// under random row and column orders.
template <class Rng>
std::vector<std::vector<double>> random_feasible_plan(const Instance& in, Rng& rng, int mixtures = 4) {
  const std::size_t q = in.f.size(), k = in.d.size();
  std::vector<std::vector<double>> out(q, std::vector<double>(k, 0.0));
  std::vector<double> w(mixtures);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  double ws = 0.0;
  for (auto& v : w) ws += (v = u(rng));
  for (int m = 0; m < mixtures; ++m) {
    std::vector<std::size_t> ro(q), co(k);
    for (std::size_t i = 0; i < q; ++i) ro[i] = i;
    for (std::size_t j = 0; j < k; ++j) co[j] = j;
    std::shuffle(ro.begin(), ro.end(), rng);
    std::shuffle(co.begin(), co.end(), rng);
    std::vector<double> fr(in.f), dr(in.d);
    std::size_t a = 0, b = 0;
    while (a < q && b < k) {
      const double t = std::min(fr[ro[a]], dr[co[b]]);
      out[ro[a]][co[b]] += w[m] / ws * t;
      fr[ro[a]] -= t;
      dr[co[b]] -= t;
      if (fr[ro[a]] <= dr[co[b]]) ++a; else ++b;
    }
  }
  return out;
}

template <class Rng>
std::vector<double> random_simplex(std::size_t n, Rng& rng) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> v(n);
  double s = 0.0;
  for (auto& x : v) s += (x = e(rng));
  for (auto& x : v) x /= s;
  return v;
}

template <class Rng>
Instance random_instance(std::size_t q, std::size_t k, Rng& rng) {
  Instance in;
  in.f = random_simplex(q, rng);
  in.d = random_simplex(k, rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  in.cost.assign(q, std::vector<double>(k));
  for (auto& row : in.cost)
    for (auto& c : row) c = u(rng);
  return in;
}

}  // namespace oracle
