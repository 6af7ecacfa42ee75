#pragma once

// 2-D PCA view of projection-head embeddings, written as a standalone SVG.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "protodrift/error.hpp"
#include "protodrift/harness.hpp"
#include "protodrift/model.hpp"
#include "protodrift/synth.hpp"
#include "protodrift/tensor.hpp"

namespace protodrift {

struct PcaProjection {
  std::vector<double> xs, ys;
  double explained_first = 0.0, explained_second = 0.0;
};

// Top-2 principal components. Each axis is sign-fixed so that its
// largest-magnitude loading is positive.
inline PcaProjection pca2(const Tensor& points) {
  if (points.rows() < 3) throw Error("PCA scatter needs at least 3 samples, got " + std::to_string(points.rows()));
  const auto n = static_cast<Eigen::Index>(points.rows());
  const auto p = static_cast<Eigen::Index>(points.cols());
  Eigen::MatrixXd x(n, p);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < p; ++j) x(i, j) = points(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw Error("PCA eigen-decomposition failed");
  const auto& vals = es.eigenvalues();  // ascending
  if (!(vals(p - 1) > 1e-12)) throw Error("degenerate PCA: embeddings have zero variance");

  PcaProjection out;
  out.explained_first = vals(p - 1);
  out.explained_second = p > 1 ? vals(p - 2) : 0.0;
  Eigen::MatrixXd axes(p, 2);
  for (int a = 0; a < 2; ++a) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(p);
    if (p > a) v = es.eigenvectors().col(p - 1 - a);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    axes.col(a) = v;
  }
  const Eigen::MatrixXd proj = x * axes;
  for (Eigen::Index i = 0; i < n; ++i) {
    out.xs.push_back(proj(i, 0));
    out.ys.push_back(proj(i, 1));
  }
  return out;
}

inline std::string scatter_svg(const PcaProjection& pc, const std::vector<int>& labels) {
  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  std::map<int, std::string> color;
  for (int y : labels) color.emplace(y, "");
  std::size_t ci = 0;
  for (auto& [id, c] : color) {
    c = ci < std::size(palette) ? std::string(palette[ci])
                                : fmt::format("hsl({},60%,45%)", (ci * 47) % 360);
    ++ci;
  }

  constexpr double width = 720, height = 540, margin = 40, legend = 140;
  const auto [xmin, xmax] = std::minmax_element(pc.xs.begin(), pc.xs.end());
  const auto [ymin, ymax] = std::minmax_element(pc.ys.begin(), pc.ys.end());
  const double xspan = std::max(*xmax - *xmin, 1e-12), yspan = std::max(*ymax - *ymin, 1e-12);
  const double plot_w = width - 2 * margin - legend, plot_h = height - 2 * margin;

  std::string svg = fmt::format(
      "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\">\n"
      "<rect x=\"0\" y=\"0\" width=\"{0}\" height=\"{1}\" fill=\"white\"/>\n"
      "<rect x=\"{2}\" y=\"{2}\" width=\"{3}\" height=\"{4}\" fill=\"none\" stroke=\"#444\"/>\n"
      "<text x=\"{2}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">PC1 vs PC2 of proposal embeddings</text>\n",
      width, height, margin, plot_w, plot_h);
  svg += "<g id=\"points\">\n";
  for (std::size_t i = 0; i < pc.xs.size(); ++i) {
    const double px = margin + (pc.xs[i] - *xmin) / xspan * plot_w;
    const double py = margin + plot_h - (pc.ys[i] - *ymin) / yspan * plot_h;
    svg += fmt::format("<circle class=\"marker\" cx=\"{:.3f}\" cy=\"{:.3f}\" r=\"3\" fill=\"{}\" data-class=\"{}\"/>\n", px,
                       py, color[labels[i]], labels[i]);
  }
  svg += "</g>\n<g id=\"legend\" font-family=\"sans-serif\" font-size=\"12\">\n";
  double ly = margin + 10;
  for (const auto& [id, c] : color) {
    const double lx = width - legend + 10;
    svg += fmt::format("<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"10\" height=\"10\" fill=\"{}\"/>", lx, ly - 9, c);
    svg += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\">{}</text>\n", lx + 16, ly, class_name(id));
    ly += 18;
  }
  svg += "</g>\n</svg>\n";
  return svg;
}

inline std::string emit_scatter(const Checkpoint& ckpt, const Dataset& data_in) {
  Dataset data;
  for (const auto& p : data_in)
    if (p.y != kBackgroundClass) data.push_back(p);
  if (data.size() < 3) throw Error("scatter needs at least 3 samples");
  std::vector<int> labels;
  for (const auto& p : data) labels.push_back(p.y);
  std::vector<int> distinct(labels);
  std::sort(distinct.begin(), distinct.end());
  if (std::unique(distinct.begin(), distinct.end()) - distinct.begin() < 2) {
    throw Error("scatter needs at least 2 classes");
  }
  return scatter_svg(pca2(embeddings(ckpt, data)), labels);
}

}  // namespace protodrift
