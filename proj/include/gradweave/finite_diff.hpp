// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>

#include "gradweave/graph.hpp"
#include "gradweave/tensor.hpp"

namespace gradweave {

/// Named parameter tensors, the domain of a scalar objective.
using ParamSet = std::map<std::string, Tensor>;

/// Central-difference gradient estimate, (f(x+eps e) - f(x-eps e)) / (2 eps)
/// per coordinate. Independent of the tape: only evaluates f.
inline GradientMap finite_diff_gradient(const std::function<double(const ParamSet&)>& f,
                                        ParamSet params, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_gradient: eps must be > 0");
  GradientMap out;
  for (auto& [path, tensor] : params) {
    Tensor grad(tensor.shape());
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double saved = tensor[i];
      tensor[i] = saved + eps;
      const double fp = f(params);
      tensor[i] = saved - eps;
      const double fm = f(params);
      tensor[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw std::runtime_error("finite_diff_gradient: non-finite objective at probe point for " +
                                 path);
      }
      grad[i] = (fp - fm) / (2.0 * eps);
    }
    out.emplace(path, std::move(grad));
  }
  return out;
}

/// Single-coordinate central difference; used by spot-check gradient audits.
inline double finite_diff_coordinate(const std::function<double(const ParamSet&)>& f,
                                     ParamSet& params, const std::string& path, std::size_t i,
                                     double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_coordinate: eps must be > 0");
  Tensor& t = params.at(path);
  const double saved = t[i];
  t[i] = saved + eps;
  const double fp = f(params);
  t[i] = saved - eps;
  const double fm = f(params);
  t[i] = saved;
  if (!std::isfinite(fp) || !std::isfinite(fm)) {
    throw std::runtime_error("finite_diff_coordinate: non-finite objective at probe point");
  }
  return (fp - fm) / (2.0 * eps);
}

struct GradCompareResult {
  double max_rel_err = 0.0;
  std::string worst_path;
  std::size_t worst_index = 0;
  std::size_t compared = 0;
};

inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Worst relative error between two gradient maps over shared paths.
inline GradCompareResult compare_gradients(const GradientMap& got, const GradientMap& want,
                                           double floor = 1e-6) {
  GradCompareResult r;
  for (const auto& [path, g] : got) {
    auto it = want.find(path);
    if (it == want.end()) continue;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double e = relative_error(g[i], it->second[i], floor);
      ++r.compared;
      if (e > r.max_rel_err) {
        r.max_rel_err = e;
        r.worst_path = path;
        r.worst_index = i;
      }
    }
  }
  return r;
}

}  // namespace gradweave
