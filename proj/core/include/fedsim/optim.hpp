#pragma once

#include <functional>

#include "fedsim/params.hpp"

namespace fedsim {

// w - eta * g over shape-compatible sets; inputs untouched.
ParamSet sgd_step(const ParamSet& params, const ParamSet& grads, double eta);

// Central-difference gradient oracle: (f(w + eps e) - f(w - eps e)) / (2 eps)
// per coordinate. Exact for quadratics; at a kink the symmetric difference
// averages the two one-sided slopes (|w| at 0 reports 0).
ParamSet finite_diff_grad(const std::function<double(const ParamSet&)>& f,
                          const ParamSet& params, double eps);

} // namespace fedsim
