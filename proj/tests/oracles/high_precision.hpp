#pragma once

// 50-digit reference values for softmax cross-entropy and arithmetic means.

#include <vector>

#include <boost/multiprecision/cpp_dec_float.hpp>

namespace oracle {

using big = boost::multiprecision::cpp_dec_float_50;

inline double cross_entropy(const std::vector<std::vector<double>>& logits, const std::vector<std::size_t>& targets) {
  big total = 0;
  for (std::size_t r = 0; r < logits.size(); ++r) {
    big z = 0;
    for (double v : logits[r]) z += boost::multiprecision::exp(big(v));
    total += boost::multiprecision::log(z) - big(logits[r][targets[r]]);
  }
  return static_cast<double>(total / big(logits.size()));
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  big z = 0;
  for (double v : x) z += boost::multiprecision::exp(big(v));
  std::vector<double> out;
  for (double v : x) out.push_back(static_cast<double>(boost::multiprecision::exp(big(v)) / z));
  return out;
}

inline std::vector<double> mean_rows(const std::vector<std::vector<double>>& rows) {
  std::vector<big> acc(rows.front().size(), big(0));
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) acc[i] += big(r[i]);
  std::vector<double> out;
  for (auto& a : acc) out.push_back(static_cast<double>(a / big(rows.size())));
  return out;
}

}  // namespace oracle
