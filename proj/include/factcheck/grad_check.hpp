#pragma once

#include <functional>
#include <string>
#include <vector>

#include "factcheck/params.hpp"
#include "factcheck/tensor.hpp"

namespace factcheck {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  int worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  bool ok(double tolerance) const { return max_rel_err < tolerance; }
  std::string to_string() const;
};

// Compares analytic gradients against central finite differences for every
// named parameter. `loss_fn` must rebuild the graph from the parameters'
// current values on each call (a pure function of its parameters and inputs).
// Throws if the loss or any gradient is non-finite, naming the parameter.
GradCheckReport grad_check(
    const std::function<ad::Tensor()>& loss_fn,
    const std::vector<std::pair<std::string, ad::Tensor>>& params,
    double h = 1e-5);

GradCheckReport grad_check(const std::function<ad::Tensor()>& loss_fn,
                           ParameterStore& store, double h = 1e-5);

// Relative error between an analytic and a numeric derivative; zero when
// both are negligibly small.
double relative_error(double analytic, double numeric);

}  // namespace factcheck
