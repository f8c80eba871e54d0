#include "factcheck/grad_check.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace factcheck {

double relative_error(double analytic, double numeric) {
  const double a = std::abs(analytic), n = std::abs(numeric);
  if (a < 1e-10 && n < 1e-10) return 0.0;
  return std::abs(analytic - numeric) / std::max({a, n, 1e-8});
}

std::string GradCheckReport::to_string() const {
  std::ostringstream os;
  for (const auto& e : entries) {
    os << e.name << ": max rel err " << e.max_rel_err;
    if (e.worst_index >= 0) {
      os << " (entry " << e.worst_index << ", analytic " << e.analytic
         << ", numeric " << e.numeric << ")";
    }
    os << "\n";
  }
  os << "overall max rel err " << max_rel_err << "\n";
  return os.str();
}

GradCheckReport grad_check(
    const std::function<ad::Tensor()>& loss_fn,
    const std::vector<std::pair<std::string, ad::Tensor>>& params, double h) {
  // Analytic pass: fresh gradients, one backward sweep.
  for (const auto& [name, t] : params) {
    ad::Tensor handle = t;
    handle.zero_grad();
  }
  ad::Tensor loss = loss_fn();
  if (!std::isfinite(loss.item())) {
    throw std::runtime_error("grad_check: non-finite loss");
  }
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, t] : params) {
    if (!t.requires_grad()) {
      analytic.emplace_back();
      continue;
    }
    std::vector<double> g(t.grad().begin(), t.grad().end());
    for (double e : g) {
      if (!std::isfinite(e)) {
        throw std::runtime_error("grad_check: non-finite gradient in " + name);
      }
    }
    analytic.push_back(std::move(g));
  }

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& name = params[p].first;
    ad::Tensor t = params[p].second;
    if (!t.requires_grad()) continue;
    GradCheckEntry entry;
    entry.name = name;
    auto values = t.leaf_value();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      const double up = loss_fn().item();
      values[i] = orig - h;
      const double down = loss_fn().item();
      values[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw std::runtime_error("grad_check: non-finite loss while probing " +
                                 name);
      }
      const double numeric = (up - down) / (2.0 * h);
      const double err = relative_error(analytic[p][i], numeric);
      if (err > entry.max_rel_err) {
        entry.max_rel_err = err;
        entry.worst_index = static_cast<int>(i);
        entry.analytic = analytic[p][i];
        entry.numeric = numeric;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

GradCheckReport grad_check(const std::function<ad::Tensor()>& loss_fn,
                           ParameterStore& store, double h) {
  return grad_check(loss_fn, store.items(), h);
}

}  // namespace factcheck
