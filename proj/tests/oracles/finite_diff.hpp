#pragma once

// Central finite differences over every entry of every named parameter.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "protodrift/tensor.hpp"

namespace oracle {

using protodrift::ParameterMap;

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;
};

// |a - n| / max(|a|, |n|, floor), maximized over all entries.
inline GradCheck compare_gradients(const ParameterMap& params, const ParameterMap& analytic,
                                   const std::function<double(const ParameterMap&)>& value, double h = 1e-5,
                                   double floor = 1e-6) {
  GradCheck out;
  for (const auto& [name, t] : params) {
    auto it = analytic.find(name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      ParameterMap p = params;
      p[name][i] = t[i] + h;
      const double up = value(p);
      p[name][i] = t[i] - h;
      const double down = value(p);
      const double numeric = (up - down) / (2.0 * h);
      const double a = it == analytic.end() ? 0.0 : it->second[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = name + "[" + std::to_string(i) + "] analytic " + std::to_string(a) + " numeric " +
                    std::to_string(numeric);
      }
    }
  }
  return out;
}

}  // namespace oracle
