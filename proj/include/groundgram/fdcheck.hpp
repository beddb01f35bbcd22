#pragma once

#include <functional>
#include <string>
#include <vector>

#include "groundgram/tape.hpp"

namespace gg {

// Central-difference gradient audit. `f(need_grad)` must evaluate the loss
// deterministically (fixed RNG draws); when need_grad is true it must also
// leave gradients in each parameter's grad buffer (zeroed here first).
struct FdReport {
  struct Entry {
    std::string name;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
  };
  std::vector<Entry> per_param;
  double worst_rel_err = 0.0;

  const Entry* worst() const {
    const Entry* w = nullptr;
    for (const auto& e : per_param)
      if (!w || e.max_rel_err > w->max_rel_err) w = &e;
    return w;
  }
};

using LossFn = std::function<double(bool need_grad)>;

inline double fd_rel_err(double analytic, double numeric) {
  double denom = std::max(std::abs(analytic) + std::abs(numeric), 1e-4);
  return std::abs(analytic - numeric) / denom;
}

inline FdReport finite_diff_check(const std::vector<Param*>& params, const LossFn& f,
                                  double h = 1e-4) {
  for (Param* p : params) p->zero_grad();
  f(true);
  // stash analytic gradients; FD evals may route through the same buffers
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Param* p : params) analytic.push_back(p->grad);

  FdReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Param* p = params[pi];
    FdReport::Entry e;
    e.name = p->name;
    for (int64_t i = 0; i < p->value.size(); ++i) {
      double keep = p->value[i];
      p->value[i] = keep + h;
      double up = f(false);
      p->value[i] = keep - h;
      double dn = f(false);
      p->value[i] = keep;
      double numeric = (up - dn) / (2.0 * h);
      double rel = fd_rel_err(analytic[pi][i], numeric);
      e.max_rel_err = std::max(e.max_rel_err, rel);
      e.max_abs_err = std::max(e.max_abs_err, std::abs(analytic[pi][i] - numeric));
    }
    report.worst_rel_err = std::max(report.worst_rel_err, e.max_rel_err);
    report.per_param.push_back(std::move(e));
  }
  // restore analytic gradients for the caller
  for (size_t pi = 0; pi < params.size(); ++pi) params[pi]->grad = analytic[pi];
  return report;
}

}  // namespace gg
