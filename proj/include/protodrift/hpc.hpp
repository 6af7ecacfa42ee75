#pragma once

// Projection head and the hybrid prototypical contrastive (HPC) loss.
//
// For every anchor i with IoU u_i >= phi and at least one same-label partner:
//
//   L_i = -1/(N_{y_i}-1) * sum_{j != i, y_j = y_i} log( e^{s_ij/tau} / D_i )
//   D_i = sum_{l != i} e^{s_il/tau} + sum_k e^{sim(z_i, p_k)/tau}
//
// and the loss is (1/N) sum_i L_i, dividing by the full batch size N.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iostream>
#include <optional>
#include <span>
#include <vector>

#include "protodrift/error.hpp"
#include "protodrift/tensor.hpp"

namespace protodrift {

struct HpcConfig {
  double tau = 0.1;
  double phi = 0.7;
  std::size_t projection_dim = 128;

  friend bool operator==(const HpcConfig&, const HpcConfig&) = default;
};

inline void validate(const HpcConfig& c) {
  if (!(c.tau > 0.0)) throw ConfigError("hpc tau must be positive");
  if (!(c.phi >= 0.0 && c.phi <= 1.0)) throw ConfigError("hpc phi must be in [0,1]");
  if (c.projection_dim == 0) throw ConfigError("projection_dim must be positive");
}

// Rows of features . head^T, L2-normalized. Throws on a zero projected row.
inline NodeId project(ComputeTape& tape, NodeId features, NodeId head) {
  const Tensor& f = tape.value(features);
  const Tensor& h = tape.value(head);
  if (h.rank() != 2 || h.cols() != f.cols()) {
    throw Error("project shape mismatch: features " + f.shape_string() + ", head " + h.shape_string());
  }
  NodeId lin = tape.matmul(features, tape.transpose(head));
  try {
    return tape.l2_normalize(lin);
  } catch (const Error& e) {
    throw Error(std::string("degenerate projection head: ") + e.what());
  }
}

inline double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("cosine_sim length mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (!(aa > 0.0) || !(bb > 0.0)) throw Error("cosine_sim of zero vector");
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

struct ProjectedBatch {
  NodeId embeddings;           // N x P, unit rows
  std::vector<double> iou;     // N, in [0,1]
  std::vector<int> labels;     // N
};

inline NodeId hpc_loss(ComputeTape& tape, const ProjectedBatch& batch, std::optional<NodeId> prototypes,
                       const HpcConfig& cfg) {
  validate(cfg);
  const Tensor& z = tape.value(batch.embeddings);
  const std::size_t n = z.rows();
  if (batch.iou.size() != n || batch.labels.size() != n) {
    throw Error("hpc_loss: batch of " + std::to_string(n) + " embeddings with " + std::to_string(batch.iou.size()) +
                " IoU scores and " + std::to_string(batch.labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!(batch.iou[i] >= 0.0 && batch.iou[i] <= 1.0)) throw Error("hpc_loss: IoU outside [0,1]");
    double s = 0.0;
    for (double v : z.row(i)) s += v * v;
    if (std::abs(std::sqrt(s) - 1.0) > 1e-9) throw Error("hpc_loss: embedding row " + std::to_string(i) + " is not unit-norm");
  }
  std::size_t k = 0;
  if (prototypes) {
    const Tensor& p = tape.value(*prototypes);
    if (p.cols() != z.cols()) throw Error("hpc_loss: prototype width differs from embedding width");
    k = p.rows();
  }

  // Same-label counts and the weights of every positive pair.
  Tensor weights = Tensor::zeros({n, n + k});
  bool any_anchor = false;
  bool any_positive_pair = false;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t same = 0;
    for (std::size_t j = 0; j < n; ++j) same += batch.labels[j] == batch.labels[i];
    if (same >= 2) any_positive_pair = true;
    if (batch.iou[i] < cfg.phi || same < 2) continue;
    any_anchor = true;
    const double w = -1.0 / (static_cast<double>(n) * static_cast<double>(same - 1));
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && batch.labels[j] == batch.labels[i]) weights(i, j) = w;
  }

  if (!any_anchor) {
    if (k == 0 && !any_positive_pair) {
      std::clog << "warning: hpc_loss has no prototypes and no positive pairs; returning 0\n";
    }
    return tape.constant(Tensor::scalar(0.0));
  }

  NodeId keys = prototypes ? tape.concat_rows(batch.embeddings, *prototypes) : batch.embeddings;
  NodeId sims = tape.scale(tape.matmul(batch.embeddings, tape.transpose(keys)), 1.0 / cfg.tau);
  Tensor mask = Tensor::filled({n, n + k}, 1.0);
  for (std::size_t i = 0; i < n; ++i) mask(i, i) = 0.0;
  NodeId logp = tape.masked_log_softmax(sims, std::move(mask));
  return tape.weighted_sum(logp, std::move(weights));
}

}  // namespace protodrift
