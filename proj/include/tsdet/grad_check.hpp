// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>

#include "tsdet/parameters.hpp"
#include "tsdet/tensor.hpp"

namespace tsdet {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = true;
  std::size_t checked = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckOptions {
  double h = 1e-3;
  double tol = 1e-4;
  double abs_tol = 1e-6;
  // 0 probes every entry; otherwise at most this many per tensor, chosen
  // with `probe_seed`.
  std::size_t max_probes_per_tensor = 0;
  std::uint64_t probe_seed = 0;
};

// The callable records a scalar loss on the tape, registering whatever
// parameters it reads through tape.parameter().
template <typename Real>
using ScalarFn = std::function<BasicVar<Real>(BasicTape<Real>&, BasicParameterSet<Real>&)>;

// Compares reverse-mode gradients against central differences
// (f(x+h) - f(x-h)) / 2h. An entry passes when its absolute error is within
// abs_tol or its relative error is within tol.
template <typename Real>
GradCheckReport grad_check(const ScalarFn<Real>& f, BasicParameterSet<Real> point, const GradCheckOptions& opt = {}) {
  if (!(opt.h > 0)) throw Error("grad_check: step h must be positive");
  point.zero_grad();
  {
    BasicTape<Real> tape;
    auto loss = f(tape, point);
    if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericError("grad_check: non-finite loss at the base point");
    tape.backward(loss);
  }
  auto eval = [&](std::size_t p, std::size_t k) {
    BasicTape<Real> tape;
    const double v = static_cast<double>(f(tape, point).item());
    if (!std::isfinite(v))
      throw NumericError("grad_check: non-finite loss probing parameter '" + point.name(p) + "' index " + std::to_string(k));
    return v;
  };

  GradCheckReport report;
  std::mt19937_64 rng(opt.probe_seed);
  for (std::size_t p = 0; p < point.size(); ++p) {
    auto& t = point.at(p);
    std::vector<std::size_t> probes(t.numel());
    for (std::size_t k = 0; k < probes.size(); ++k) probes[k] = k;
    if (opt.max_probes_per_tensor && probes.size() > opt.max_probes_per_tensor) {
      std::shuffle(probes.begin(), probes.end(), rng);
      probes.resize(opt.max_probes_per_tensor);
    }
    for (std::size_t k : probes) {
      const Real orig = t.data[k];
      t.data[k] = static_cast<Real>(orig + opt.h);
      const double up = eval(p, k);
      t.data[k] = static_cast<Real>(orig - opt.h);
      const double down = eval(p, k);
      t.data[k] = orig;
      const double numeric = (up - down) / (2.0 * opt.h);
      const double analytic = t.grad.empty() ? 0.0 : static_cast<double>(t.grad[k]);
      const double err = std::abs(analytic - numeric);
      const double scale = std::max(std::abs(analytic), std::abs(numeric));
      const double rel = err <= opt.abs_tol ? 0.0 : err / scale;
      ++report.checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = point.name(p);
        report.worst_index = k;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
      }
    }
  }
  report.pass = report.max_rel_err <= opt.tol;
  return report;
}

}  // namespace tsdet
