#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tardis/tensor.hpp"

namespace tardis {

struct GradCheckOptions {
  double step = 1e-5;
  /// Denominator floor: entries whose gradients are both below this
  /// magnitude are compared in absolute terms.
  double floor = 1e-3;
  /// Perturbs the first analytic gradient entry; used to self-test the checker.
  bool inject_fault = false;
};

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool finite = true;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;

  [[nodiscard]] double max_rel_error() const {
    double m = 0.0;
    for (const auto& p : params) {
      m = std::max(m, p.finite ? p.max_rel_error : INFINITY);
    }
    return m;
  }
  [[nodiscard]] bool all_finite() const {
    return std::all_of(params.begin(), params.end(), [](const ParamCheck& p) { return p.finite; });
  }
  [[nodiscard]] bool passed(double tol) const { return all_finite() && max_rel_error() < tol; }
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

inline double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compares backward() against central differences (f(x+h) - f(x-h)) / 2h
/// for every element of every parameter. `fn` must be deterministic.
inline GradCheckReport check_gradients(const std::function<Tensor()>& fn,
                                       std::vector<NamedTensor> params,
                                       const GradCheckOptions& opt = {}) {
  for (auto& p : params) {
    p.tensor.clear_grad();
  }
  {
    Graph graph;
    Tensor loss = fn();
    graph.backward(loss);
  }
  GradCheckReport report;
  bool fault_pending = opt.inject_fault;
  for (auto& p : params) {
    ParamCheck pc;
    pc.name = p.name;
    std::vector<double> analytic(p.tensor.size(), 0.0);
    if (p.tensor.has_grad()) {
      std::copy(p.tensor.grad().begin(), p.tensor.grad().end(), analytic.begin());
    }
    if (fault_pending && !analytic.empty()) {
      analytic[0] += 1e-2 * std::max(1.0, std::abs(analytic[0]));
      fault_pending = false;
    }
    auto values = p.tensor.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + opt.step;
      const double fp = fn().item();
      values[i] = orig - opt.step;
      const double fm = fn().item();
      values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
        pc.finite = false;
        pc.worst_index = i;
        pc.analytic = analytic[i];
        pc.numeric = numeric;
        continue;
      }
      const double err = relative_error(analytic[i], numeric, opt.floor);
      if (err > pc.max_rel_error) {
        pc.max_rel_error = err;
        pc.worst_index = i;
        pc.analytic = analytic[i];
        pc.numeric = numeric;
      }
    }
    report.params.push_back(std::move(pc));
  }
  for (auto& p : params) {
    p.tensor.clear_grad();
  }
  return report;
}

}  // namespace tardis
