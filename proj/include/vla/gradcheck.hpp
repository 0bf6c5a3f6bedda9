#pragma once

#include <functional>
#include <vector>

#include "vla/tensor.hpp"

namespace vla {

// Builds a scalar loss on the given tape from a differentiable input tensor.
using TensorFn = std::function<Tensor(Tape&, Tensor)>;

// Compares the tape gradient of f at `point` against central differences.
// Returns max over coordinates of |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
double grad_check(const TensorFn& f, const Shape& shape, const std::vector<double>& point,
                  double h = 1e-5);

// Same check against a scalar function of raw values (used to spot-check full
// model losses at selected parameter coordinates). `eval` must be
// deterministic; `coords` lists flat indices into `values`.
double grad_check_coords(const std::function<double()>& eval, std::vector<double>& values,
                         const std::vector<double>& analytic_grad,
                         const std::vector<std::size_t>& coords, double h = 1e-5);

}  // namespace vla
