#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "factcheck/tensor.hpp"
#include "oracle_helpers.hpp"

using namespace factcheck;
using ad::Tensor;

namespace {

Tensor leaf_mat(const oracle::Mat& m, bool grad = false) {
  std::vector<double> flat;
  for (const auto& row : m) flat.insert(flat.end(), row.begin(), row.end());
  return Tensor::leaf({static_cast<int>(m.size()),
                       static_cast<int>(m[0].size())},
                      std::move(flat), grad);
}

// Scalar objective used by the per-op gradient checks: sum(op_out * R) with a
// weighting R derived from the output shape only, so every output entry
// influences the loss and repeated calls see identical weights.
Tensor weighted_sum(const Tensor& t) {
  std::uint64_t seed = 0x9e3779b9;
  for (int d : t.shape()) seed = seed * 31 + static_cast<std::uint64_t>(d);
  oracle::TestRng wrng(seed);
  std::vector<double> w(static_cast<std::size_t>(t.size()));
  for (double& x : w) x = wrng.uniform(-1.0, 1.0);
  return ad::sum_all(ad::mul(t, Tensor::leaf(t.shape(), std::move(w))));
}

// Finite-difference check of one differentiable op against its backward pass.
double max_fd_error(const std::function<Tensor()>& loss_fn,
                    std::vector<Tensor> params) {
  for (auto& p : params) p.zero_grad();
  Tensor loss = loss_fn();
  loss.backward();
  double worst = 0.0;
  for (auto& p : params) {
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto values = p.leaf_value();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + 1e-5;
      const double up = loss_fn().item();
      values[i] = orig - 1e-5;
      const double down = loss_fn().item();
      values[i] = orig;
      const double numeric = (up - down) / 2e-5;
      worst = std::max(worst, oracle::rel_err(analytic[i], numeric));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("matmul identity and small cases") {
  Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  Tensor v = Tensor::matrix(2, 1, {3, 4});
  Tensor out = ad::matmul(eye, v);
  CHECK(out.at(0, 0) == 3.0);
  CHECK(out.at(1, 0) == 4.0);

  Tensor a = Tensor::matrix(1, 2, {1, 2});
  Tensor b = Tensor::matrix(2, 1, {3, 4});
  CHECK(ad::matmul(a, b).item() == 11.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  oracle::TestRng rng(42);
  const auto am = rng.mat(3, 4);
  const auto bm = rng.mat(4, 2);
  const auto expect = oracle::matmul(am, bm);
  Tensor out = ad::matmul(leaf_mat(am), leaf_mat(bm));
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 2; ++j) {
      CHECK(std::abs(out.at(i, j) - expect[i][j]) < 1e-12);
    }
  }
}

TEST_CASE("matmul shape error names both shapes") {
  Tensor a = Tensor::matrix(2, 3, std::vector<double>(6, 0.0));
  Tensor b = Tensor::matrix(2, 2, std::vector<double>(4, 0.0));
  try {
    ad::matmul(a, b);
    FAIL("expected shape error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("softmax uniform logits") {
  Tensor out = ad::softmax(Tensor::vec({0, 0, 0}), 0);
  for (int i = 0; i < 3; ++i) CHECK(out.at(i) == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("softmax is stable for large logits") {
  Tensor out = ad::softmax(Tensor::vec({1000, 0}), 0);
  CHECK(std::abs(out.at(0) - 1.0) < 1e-12);
  CHECK(std::abs(out.at(1) - 0.0) < 1e-12);
  CHECK(std::isfinite(out.at(0)));
}

TEST_CASE("softmax matches direct exp/sum oracle") {
  // Frozen values computed with the direct oracle exp(x_i)/sum_j exp(x_j).
  const std::vector<double> frozen = {0.09003057317038046, 0.24472847105479767,
                                      0.6652409557748219};
  Tensor out = ad::softmax(Tensor::vec({1, 2, 3}), 0);
  const auto direct = oracle::softmax({1, 2, 3});
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(out.at(i) - frozen[static_cast<std::size_t>(i)]) < 1e-12);
    CHECK(std::abs(out.at(i) - direct[static_cast<std::size_t>(i)]) < 1e-12);
  }
}

TEST_CASE("softmax slices are normalized and nonnegative") {
  oracle::TestRng rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    const int r = 1 + rng.uniform_int(5), c = 1 + rng.uniform_int(5);
    auto m = rng.mat(r, c, -10.0, 10.0);
    for (int axis : {0, 1}) {
      Tensor out = ad::softmax(leaf_mat(m), axis);
      const int nslices = axis == 0 ? c : r;
      const int len = axis == 0 ? r : c;
      for (int s = 0; s < nslices; ++s) {
        double total = 0.0;
        for (int i = 0; i < len; ++i) {
          const double v = axis == 0 ? out.at(i, s) : out.at(s, i);
          CHECK(v >= 0.0);
          total += v;
        }
        CHECK(std::abs(total - 1.0) < 1e-9);
      }
    }
  }
}

TEST_CASE("masked softmax gives exact zeros and zero gradient") {
  Tensor x = Tensor::leaf({1, 4}, {0.3, -0.2, 0.9, 0.5}, true);
  std::vector<unsigned char> keep = {1, 1, 0, 1};
  Tensor out = ad::softmax_masked(x, 1, keep);
  CHECK(out.at(0, 2) == 0.0);
  CHECK(std::abs(out.at(0, 0) + out.at(0, 1) + out.at(0, 3) - 1.0) < 1e-12);
  ad::sum_all(ad::mul(out, Tensor::matrix(1, 4, {1.0, 2.0, 3.0, 4.0})))
      .backward();
  CHECK(x.grad()[2] == 0.0);  // masked key receives no gradient
}

TEST_CASE("elementwise basics") {
  CHECK(ad::tanh(Tensor::vec({0})).at(0) == 0.0);

  Tensor joined = ad::concat(Tensor::matrix(1, 2, {1, 2}),
                             Tensor::matrix(1, 1, {3}), 1);
  CHECK(joined.cols() == 3);
  CHECK(joined.at(0, 0) == 1.0);
  CHECK(joined.at(0, 1) == 2.0);
  CHECK(joined.at(0, 2) == 3.0);

  Tensor scaled = ad::row_scale(Tensor::matrix(2, 2, {1, 1, 2, 2}),
                                Tensor::vec({0.5, 1.0}));
  CHECK(scaled.at(0, 0) == 0.5);
  CHECK(scaled.at(0, 1) == 0.5);
  CHECK(scaled.at(1, 0) == 2.0);
  CHECK(scaled.at(1, 1) == 2.0);
}

TEST_CASE("backward on sum of parameters yields all ones") {
  Tensor p = Tensor::leaf({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  ad::sum_all(p).backward();
  REQUIRE(p.has_grad());
  for (double g : p.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward of sum(matmul) matches closed form") {
  // d/dA sum(A B) = ones(m,n) B^T, entry (i,k) = sum_j B[k][j].
  oracle::TestRng rng(3);
  const auto am = rng.mat(3, 4);
  const auto bm = rng.mat(4, 2);
  Tensor a = leaf_mat(am, true);
  Tensor b = leaf_mat(bm, true);
  ad::sum_all(ad::matmul(a, b)).backward();
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 4; ++k) {
      double expect = 0.0;
      for (int j = 0; j < 2; ++j) expect += bm[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
      CHECK(std::abs(a.grad()[static_cast<std::size_t>(i * 4 + k)] - expect) < 1e-12);
    }
  }
}

TEST_CASE("backward requires a scalar root") {
  Tensor p = Tensor::leaf({2}, {1, 2}, true);
  CHECK_THROWS_AS(ad::scale(p, 2.0).backward(), std::invalid_argument);
}

TEST_CASE("repeated backward accumulates into leaf gradients") {
  Tensor p = Tensor::leaf({2}, {1.0, 2.0}, true);
  Tensor loss = ad::sum_all(ad::mul(p, p));
  loss.backward();
  std::vector<double> once(p.grad().begin(), p.grad().end());
  loss.backward();
  for (std::size_t i = 0; i < once.size(); ++i) {
    CHECK(p.grad()[i] == doctest::Approx(2.0 * once[i]));
  }
}

TEST_CASE("every differentiable op passes central finite differences") {
  oracle::TestRng rng(11);
  const double tol = 1e-6;

  SUBCASE("add/sub/mul/scale/add_scalar") {
    Tensor a = leaf_mat(rng.mat(3, 4), true);
    Tensor b = leaf_mat(rng.mat(3, 4), true);
    CHECK(max_fd_error([&] { return weighted_sum(ad::add(a, b)); }, {a, b}) < tol);
    CHECK(max_fd_error([&] { return weighted_sum(ad::sub(a, b)); }, {a, b}) < tol);
    CHECK(max_fd_error([&] { return weighted_sum(ad::mul(a, b)); }, {a, b}) < tol);
    CHECK(max_fd_error([&] { return weighted_sum(ad::scale(a, -1.7)); }, {a}) < tol);
    CHECK(max_fd_error([&] { return weighted_sum(ad::add_scalar(a, 0.4)); }, {a}) < tol);
  }

  SUBCASE("matmul/transpose/add_rowvec") {
    Tensor a = leaf_mat(rng.mat(3, 4), true);
    Tensor b = leaf_mat(rng.mat(4, 2), true);
    Tensor v = Tensor::leaf({4}, rng.vec(4), true);
    CHECK(max_fd_error([&] { return weighted_sum(ad::matmul(a, b)); }, {a, b}) < tol);
    CHECK(max_fd_error([&] { return weighted_sum(ad::transpose(a)); }, {a}) < tol);
    CHECK(max_fd_error([&] { return weighted_sum(ad::add_rowvec(a, v)); }, {a, v}) < tol);
  }

  SUBCASE("tanh/relu") {
    Tensor a = leaf_mat(rng.mat(3, 4), true);  // entries away from relu kink
    CHECK(max_fd_error([&] { return weighted_sum(ad::tanh(a)); }, {a}) < tol);
    auto m = rng.mat(3, 4);
    for (auto& row : m) {
      for (double& x : row) {
        if (std::abs(x) < 0.05) x = 0.1;
      }
    }
    Tensor c = leaf_mat(m, true);
    CHECK(max_fd_error([&] { return weighted_sum(ad::relu(c)); }, {c}) < tol);
  }

  SUBCASE("softmax both axes and masked") {
    Tensor a = leaf_mat(rng.mat(3, 4), true);
    CHECK(max_fd_error([&] { return weighted_sum(ad::softmax(a, 0)); }, {a}) < tol);
    CHECK(max_fd_error([&] { return weighted_sum(ad::softmax(a, 1)); }, {a}) < tol);
    std::vector<unsigned char> keep(12, 1);
    keep[1] = keep[6] = keep[11] = 0;
    CHECK(max_fd_error(
              [&] { return weighted_sum(ad::softmax_masked(a, 1, keep)); },
              {a}) < tol);
  }

  SUBCASE("concat/slice/reshape/gather") {
    Tensor a = leaf_mat(rng.mat(2, 3), true);
    Tensor b = leaf_mat(rng.mat(2, 3), true);
    CHECK(max_fd_error([&] { return weighted_sum(ad::concat(a, b, 0)); }, {a, b}) < tol);
    CHECK(max_fd_error([&] { return weighted_sum(ad::concat(a, b, 1)); }, {a, b}) < tol);
    Tensor m = leaf_mat(rng.mat(4, 3), true);
    CHECK(max_fd_error([&] { return weighted_sum(ad::slice_rows(m, 1, 2)); }, {m}) < tol);
    CHECK(max_fd_error([&] { return weighted_sum(ad::slice_cols(m, 1, 2)); }, {m}) < tol);
    CHECK(max_fd_error([&] { return weighted_sum(ad::reshape(m, {3, 4})); }, {m}) < tol);
    std::vector<int> ids = {2, 0, 2, 3};  // repeated id exercises scatter-add
    CHECK(max_fd_error([&] { return weighted_sum(ad::gather_rows(m, ids)); }, {m}) < tol);
  }

  SUBCASE("row_scale/sum_all/l2_norm/squash") {
    Tensor m = leaf_mat(rng.mat(3, 4), true);
    Tensor alpha = Tensor::leaf({3}, rng.vec(3, 0.2, 1.0), true);
    CHECK(max_fd_error([&] { return weighted_sum(ad::row_scale(m, alpha)); }, {m, alpha}) < tol);
    CHECK(max_fd_error([&] { return ad::sum_all(ad::mul(m, m)); }, {m}) < tol);
    CHECK(max_fd_error([&] { return weighted_sum(ad::l2_norm_rows(m)); }, {m}) < tol);
    CHECK(max_fd_error([&] { return weighted_sum(ad::squash_rows(m)); }, {m}) < tol);
  }

  SUBCASE("layer_norm") {
    Tensor x = leaf_mat(rng.mat(3, 6), true);
    Tensor gain = Tensor::leaf({6}, rng.vec(6, 0.5, 1.5), true);
    Tensor bias = Tensor::leaf({6}, rng.vec(6), true);
    CHECK(max_fd_error(
              [&] { return weighted_sum(ad::layer_norm_rows(x, gain, bias)); },
              {x, gain, bias}) < tol);
  }

  SUBCASE("cross_entropy") {
    Tensor logits = leaf_mat(rng.mat(4, 3), true);
    std::vector<int> targets = {0, 2, 1, 1};
    CHECK(max_fd_error([&] { return ad::cross_entropy_rows(logits, targets); },
                       {logits}) < tol);
    std::vector<unsigned char> mask = {1, 0, 1, 1};
    CHECK(max_fd_error(
              [&] { return ad::cross_entropy_rows(logits, targets, mask); },
              {logits}) < tol);
  }
}

TEST_CASE("cross entropy of uniform logits is ln 2") {
  Tensor logits = Tensor::matrix(3, 2, std::vector<double>(6, 0.0));
  Tensor loss = ad::cross_entropy_rows(logits, {1, 0, 1});
  CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("gradient buffers exist with matching shapes after backward") {
  Tensor a = Tensor::leaf({2, 2}, {1, 2, 3, 4}, true);
  Tensor b = Tensor::leaf({2, 2}, {0.5, 0.5, 0.5, 0.5}, true);
  ad::sum_all(ad::matmul(a, b)).backward();
  CHECK(a.grad().size() == a.value().size());
  CHECK(b.grad().size() == b.value().size());
}
