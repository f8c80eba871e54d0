#include "factcheck/params.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace factcheck {

namespace {

constexpr std::uint32_t kCheckpointMagic = 0x46434b50;  // "FCKP"
constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<double> init_values(const ad::Shape& shape, Init init, Rng& rng) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> v(static_cast<std::size_t>(n), 0.0);
  switch (init) {
    case Init::Zeros:
      break;
    case Init::Ones:
      std::fill(v.begin(), v.end(), 1.0);
      break;
    case Init::GlorotUniform: {
      const int fan_in = shape.size() == 2 ? shape[0] : static_cast<int>(n);
      const int fan_out = shape.size() == 2 ? shape[1] : 1;
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      for (double& e : v) e = rng.uniform(-limit, limit);
      break;
    }
    case Init::Normal: {
      // Scaled for embedding tables: std 1/sqrt(cols).
      const double sd =
          shape.size() == 2 ? 1.0 / std::sqrt(static_cast<double>(shape[1])) : 0.02;
      for (double& e : v) e = sd * rng.normal();
      break;
    }
  }
  return v;
}

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

ad::Tensor ParameterStore::create(const std::string& name, ad::Shape shape,
                                  Init init, Rng& rng, bool trainable) {
  if (index_.count(name)) {
    throw std::invalid_argument("parameter name already registered: " + name);
  }
  auto t = ad::Tensor::leaf(shape, init_values(shape, init, rng), trainable);
  index_[name] = items_.size();
  items_.emplace_back(name, t);
  return t;
}

void ParameterStore::insert(const std::string& name, ad::Tensor leaf) {
  if (index_.count(name)) {
    throw std::invalid_argument("parameter name already registered: " + name);
  }
  index_[name] = items_.size();
  items_.emplace_back(name, std::move(leaf));
}

bool ParameterStore::has(const std::string& name) const {
  return index_.count(name) != 0;
}

ad::Tensor ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw std::invalid_argument("unknown parameter: " + name);
  }
  return items_[it->second].second;
}

std::int64_t ParameterStore::total_size() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : items_) n += t.size();
  return n;
}

void ParameterStore::zero_grads() {
  for (auto& [name, t] : items_) {
    if (t.requires_grad()) t.zero_grad();
  }
}

void ParameterStore::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path);
  write_pod(os, kCheckpointMagic);
  write_pod(os, kCheckpointVersion);
  write_pod(os, static_cast<std::uint64_t>(items_.size()));
  for (const auto& [name, t] : items_) {
    write_pod(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(os, static_cast<std::uint32_t>(t.shape().size()));
    for (int d : t.shape()) write_pod(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.value().data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

void ParameterStore::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  if (read_pod<std::uint32_t>(is) != kCheckpointMagic) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(version));
  }
  const auto count = read_pod<std::uint64_t>(is);
  if (count != items_.size()) {
    throw std::runtime_error("checkpoint: expected " +
                             std::to_string(items_.size()) + " parameters, file has " +
                             std::to_string(count));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto rank = read_pod<std::uint32_t>(is);
    ad::Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(read_pod<std::uint32_t>(is));
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw std::runtime_error("checkpoint: unknown parameter " + name);
    }
    auto& t = items_[it->second].second;
    if (t.shape() != shape) {
      throw std::runtime_error("checkpoint: shape mismatch for " + name +
                               ": model has " + ad::shape_str(t.shape()) +
                               ", file has " + ad::shape_str(shape));
    }
    is.read(reinterpret_cast<char*>(t.leaf_value().data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated data for " + name);
  }
}

void AdamOptimizer::step(ParameterStore& store) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (const auto& [name, t] : store.items()) {
    if (!t.requires_grad() || !t.has_grad()) continue;
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(static_cast<std::size_t>(t.size()), 0.0);
      v.assign(static_cast<std::size_t>(t.size()), 0.0);
    }
    ad::Tensor handle = t;  // tensors are shared handles
    auto values = handle.leaf_value();
    auto grads = t.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grads[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      values[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

}  // namespace factcheck
