// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "confpo/autodiff.hpp"

namespace confpo::ad {

/// Scalar function recorded on a tape from a single tensor input.
using ScalarFn = std::function<Var(Tape&, const Var&)>;

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
inline double grad_check(const ScalarFn& fn, const Tensor& point, double h = 1e-4) {
  if (!(h > 0.0 && h <= 1e-2)) throw ValidationError("grad_check: step " + std::to_string(h) + " outside (0, 1e-2]");

  Tensor analytic;
  {
    Tape tape;
    const Var x = tape.variable("x", point);
    const Var y = fn(tape, x);
    if (y.value().size() != 1) throw ShapeError("grad_check: function must be scalar, got " + shape_str(y.shape()));
    if (!std::isfinite(y.value()[0])) throw ValidationError("grad_check: non-finite function value");
    tape.backward(y);
    analytic = tape.grad(x);
  }

  auto eval = [&](const Tensor& at) {
    Tape tape;
    tape.set_grad_enabled(false);
    const double v = fn(tape, tape.variable("x", at)).value().item();
    if (!std::isfinite(v)) throw ValidationError("grad_check: non-finite function value");
    return v;
  };

  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double x0 = point[i];
    probe[i] = x0 + h;
    const double fp = eval(probe);
    probe[i] = x0 - h;
    const double fm = eval(probe);
    probe[i] = x0;
    const double numeric = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace confpo::ad
