#include <vector>

#include "doctest.h"
#include "ovseg/autograd.hpp"
#include "ovseg/error.hpp"
#include "test_util.hpp"

using namespace ovseg;
using ag::Matrix;
using ag::Var;

namespace {

// Checks d(sum(w .* op(inputs)))/d(input) against central differences.
void check_op(const std::function<Var(std::vector<Var>&)>& op, std::vector<Matrix> inits, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::vector<Var> inputs;
  for (auto& m : inits) inputs.push_back(ag::parameter(m));
  const Var probe = op(inputs);
  const Var w = ag::constant(random_matrix(probe.rows(), probe.cols(), rng));
  auto scalar = [&] {
    ag::NoGradGuard g;
    return ag::sum(ag::mul(op(inputs), w)).item();
  };
  const Var loss = ag::sum(ag::mul(op(inputs), w));
  ag::backward(loss);
  for (auto& in : inputs) {
    const Matrix analytic = in.grad();
    const Matrix numeric = numeric_gradient(scalar, in);
    CHECK(max_relative_error(analytic, numeric) < 1e-5);
  }
}

}  // namespace

TEST_CASE("elementwise and matrix ops match finite differences") {
  std::mt19937_64 rng(11);
  const Matrix a = random_matrix(3, 4, rng), b = random_matrix(3, 4, rng), c = random_matrix(4, 2, rng);
  check_op([](auto& v) { return ag::matmul(v[0], v[1]); }, {a, c});
  check_op([](auto& v) { return ag::matmul_nt(v[0], v[1]); }, {a, b});
  check_op([](auto& v) { return ag::transpose(v[0]); }, {a});
  check_op([](auto& v) { return ag::mul(v[0], v[1]); }, {a, b});
  check_op([](auto& v) { return ag::div(v[0], ag::add_scalar(ag::exp(v[1]), 0.5)); }, {a, b});
  check_op([](auto& v) { return ag::sub(ag::exp(v[0]), ag::sigmoid(v[1])); }, {a, b});
  check_op([](auto& v) { return ag::log(ag::add_scalar(ag::exp(v[0]), 1.0)); }, {a});
  check_op([](auto& v) { return ag::gelu(v[0]); }, {a});
  check_op([](auto& v) { return ag::add_row(v[0], v[1]); }, {a, random_matrix(1, 4, rng)});
  check_op([](auto& v) { return ag::div_rows(v[0], ag::add_scalar(ag::exp(v[1]), 0.1)); },
           {a, random_matrix(3, 1, rng)});
  check_op([](auto& v) { return ag::mul_scalar(v[0], v[1]); }, {a, random_matrix(1, 1, rng)});
  check_op([](auto& v) { return ag::linear(v[0], v[1], v[2]); }, {a, c, random_matrix(1, 2, rng)});
}

TEST_CASE("reductions and reshaping match finite differences") {
  std::mt19937_64 rng(12);
  const Matrix a = random_matrix(4, 3, rng);
  check_op([](auto& v) { return ag::sum_rows(v[0]); }, {a});
  check_op([](auto& v) { return ag::sum_cols(v[0]); }, {a});
  check_op([](auto& v) { return ag::mean_rows(v[0]); }, {a});
  check_op([](auto& v) { return ag::mean(v[0]); }, {a});
  check_op([](auto& v) { return ag::slice_rows(v[0], 1, 2); }, {a});
  check_op([](auto& v) { return ag::row(v[0], 2); }, {a});
  check_op(
      [](auto& v) {
        const std::vector<int> idx{2, 0, 2};
        return ag::gather_rows(v[0], idx);
      },
      {a});
  check_op(
      [](auto& v) {
        const std::vector<int> idx{1, 1, 0};
        return ag::gather_cols(v[0], idx);
      },
      {a});
  check_op(
      [](auto& v) {
        const std::vector<Var> parts{v[0], v[1]};
        return ag::concat_rows(parts);
      },
      {a, random_matrix(2, 3, rng)});
}

TEST_CASE("network primitives match finite differences") {
  std::mt19937_64 rng(13);
  const Matrix x = random_matrix(5, 6, rng);
  check_op([](auto& v) { return ag::softmax_rows(v[0]); }, {x});
  check_op([](auto& v) { return ag::layer_norm(v[0], v[1], v[2]); },
           {x, random_matrix(1, 6, rng), random_matrix(1, 6, rng)});
  check_op([](auto& v) { return ag::l2_normalize_rows(v[0]); }, {x});
  check_op([](auto& v) { return ag::cross_entropy_diagonal(v[0]); }, {random_matrix(4, 4, rng)});
  for (int heads : {1, 2, 3}) {
    ag::AttentionOptions opts{heads, -1, 0.5};
    check_op([&](auto& v) { return ag::attention(v[0], v[1], v[2], opts); },
             {random_matrix(4, 6, rng), random_matrix(5, 6, rng), random_matrix(5, 6, rng)});
  }
  ag::AttentionOptions masked{2, 3, 1.0};
  check_op([&](auto& v) { return ag::attention(v[0], v[1], v[2], masked); },
           {random_matrix(4, 6, rng), random_matrix(5, 6, rng), random_matrix(5, 6, rng)});
}

TEST_CASE("attention ignores keys past key_len") {
  std::mt19937_64 rng(14);
  const Matrix q = random_matrix(3, 4, rng);
  Matrix k = random_matrix(5, 4, rng), v = random_matrix(5, 4, rng);
  ag::NoGradGuard g;
  const ag::AttentionOptions opts{2, 3, 1.0};
  const Matrix before = ag::attention(ag::constant(q), ag::constant(k), ag::constant(v), opts).value();
  k.bottomRows(2).setRandom();
  v.bottomRows(2).setRandom();
  const Matrix after = ag::attention(ag::constant(q), ag::constant(k), ag::constant(v), opts).value();
  CHECK(before == after);
}

TEST_CASE("graph bookkeeping") {
  SUBCASE("no-grad guard records nothing") {
    Var p = ag::parameter(Matrix::Ones(2, 2));
    {
      ag::NoGradGuard g;
      CHECK_FALSE(ag::grad_enabled());
      Var y = ag::sum(ag::mul(p, p));
      CHECK_FALSE(y.requires_grad());
    }
    CHECK(ag::grad_enabled());
  }
  SUBCASE("detach stops gradients") {
    Var p = ag::parameter(Matrix::Constant(1, 1, 3.0));
    Var y = ag::add(ag::mul(p, p), ag::mul(ag::detach(p), p));
    ag::backward(y);
    CHECK(p.grad()(0, 0) == doctest::Approx(6.0 + 3.0));
  }
  SUBCASE("shared subexpressions accumulate") {
    Var p = ag::parameter(Matrix::Constant(1, 1, 2.0));
    Var s = ag::exp(p);
    Var y = ag::add(s, s);
    ag::backward(y);
    CHECK(p.grad()(0, 0) == doctest::Approx(2 * std::exp(2.0)));
  }
  SUBCASE("zero rows cannot be normalized") {
    CHECK_THROWS_AS(ag::l2_normalize_rows(ag::constant(Matrix::Zero(1, 3))), NumericError);
  }
}
