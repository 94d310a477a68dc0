#pragma once

#include <cmath>
#include <vector>

#include "flowtok/graph.hpp"
#include "flowtok/tensor.hpp"

namespace testutil {

struct GradCheckResult {
  double max_rel = 0.0;
  double max_abs = 0.0;
};

/// Central-difference check of d(loss)/d(params) against the tape.
///
/// `build` receives a graph plus one Var per entry of `params` (in order) and
/// must return a scalar loss Var. Parameters are re-seeded from `params` on
/// every evaluation, so `build` must be a pure function of them.
template <typename T, typename BuildFn>
GradCheckResult grad_check(std::vector<flowtok::Tensor<T>> params, BuildFn build, T h = T(1e-5)) {
  using flowtok::Graph;
  using flowtok::Tensor;

  auto eval = [&](const std::vector<Tensor<T>>& p) -> T {
    Graph<T> g;
    std::vector<typename Graph<T>::Var> vars;
    vars.reserve(p.size());
    for (const auto& t : p) vars.push_back(g.constant(t));
    auto loss = build(g, vars);
    return g.val(loss)[0];
  };

  // analytic pass
  std::vector<Tensor<T>> analytic;
  {
    Graph<T> g;
    std::vector<typename Graph<T>::Var> vars;
    vars.reserve(params.size());
    for (const auto& t : params) vars.push_back(g.param(t));
    auto loss = build(g, vars);
    g.backward(loss);
    for (auto v : vars) analytic.push_back(g.grad(v));
  }

  GradCheckResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    for (std::size_t i = 0; i < params[pi].numel(); ++i) {
      const T orig = params[pi][i];
      params[pi][i] = orig + h;
      const T up = eval(params);
      params[pi][i] = orig - h;
      const T down = eval(params);
      params[pi][i] = orig;
      const double numeric = (static_cast<double>(up) - static_cast<double>(down)) / (2.0 * h);
      const double a = static_cast<double>(analytic[pi][i]);
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), 1e-8});
      res.max_abs = std::max(res.max_abs, abs_err);
      res.max_rel = std::max(res.max_rel, rel);
    }
  }
  return res;
}

}  // namespace testutil
