#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "factcheck/rng.hpp"
#include "factcheck/tensor.hpp"

namespace factcheck {

enum class Init { Zeros, Ones, GlorotUniform, Normal };

// Named model parameters. Names are unique; creation order is preserved so
// that optimizer sweeps and checkpoints are deterministic.
class ParameterStore {
 public:
  ad::Tensor create(const std::string& name, ad::Shape shape, Init init,
                    Rng& rng, bool trainable = true);
  // Registers an externally built leaf (used by tests).
  void insert(const std::string& name, ad::Tensor leaf);

  bool has(const std::string& name) const;
  ad::Tensor get(const std::string& name) const;

  const std::vector<std::pair<std::string, ad::Tensor>>& items() const {
    return items_;
  }
  std::size_t count() const { return items_.size(); }
  std::int64_t total_size() const;

  void zero_grads();

  // Versioned binary checkpoint: a flat map from parameter name to shape and
  // row-major 64-bit values. Round-trips bit-exactly. See README for layout.
  void save(const std::string& path) const;
  // Fills existing parameters from a checkpoint; the name/shape sets must
  // match exactly.
  void load(const std::string& path);

 private:
  std::vector<std::pair<std::string, ad::Tensor>> items_;
  std::map<std::string, std::size_t> index_;
};

// Adaptive-moment gradient descent on a store's trainable parameters.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(double lr = 1e-3, double beta1 = 0.9,
                         double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Applies one update using the gradients currently accumulated in the
  // store, then leaves the gradients untouched (caller zeroes them).
  void step(ParameterStore& store);

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

}  // namespace factcheck
