#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "mfsig/autodiff.hpp"
#include "mfsig/errors.hpp"

using namespace mfsig::nn;
using testutil::central_diff;
using testutil::random_tensor;
using testutil::rel_close;

namespace {

// Checks d(weighted sum of op output)/d(each input) against central
// differences for one op builder acting on `inputs`.
void check_gradient(const std::function<Value(Tape&, const std::vector<Value>&)>& build,
                    std::vector<Tensor> inputs, double rel_tol = 1e-5) {
  Tape tape;
  std::vector<Value> vals;
  for (auto& in : inputs) vals.push_back(tape.leaf(in));
  Value out = build(tape, vals);

  // fixed pseudo-random weights make the loss scalar but generic
  auto rng = testutil::test_rng(17);
  Tensor w = random_tensor(tape.value(out).rows(), tape.value(out).cols(), rng, 0.3, 1.0);
  Value loss = sum_all(tape, mul(tape, out, tape.constant(w)));
  tape.backward(loss);

  for (std::size_t which = 0; which < inputs.size(); ++which) {
    auto f = [&](std::span<const double> flat) {
      Tape t2;
      std::vector<Value> vs;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        Tensor ti = inputs[i];
        if (i == which) ti.data.assign(flat.begin(), flat.end());
        vs.push_back(t2.constant(ti));
      }
      Value o = build(t2, vs);
      double acc = 0;
      const Tensor& ov = t2.value(o);
      for (std::size_t k = 0; k < ov.data.size(); ++k) acc += ov.data[k] * w.data[k];
      return acc;
    };
    auto fd = central_diff(f, inputs[which].data);
    const Tensor& an = tape.grad(vals[which]);
    REQUIRE(an.data.size() == fd.size());
    for (std::size_t k = 0; k < fd.size(); ++k) {
      INFO("input ", which, " coord ", k, " analytic ", an.data[k], " fd ", fd[k]);
      CHECK(rel_close(an.data[k], fd[k], rel_tol));
    }
  }
}

}  // namespace

TEST_CASE("matmul_nt forward matches reference") {
  Tape tape;
  // [2x3] * [2x3]^T -> [2x2]
  Value x = tape.constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  Value w = tape.constant(Tensor::matrix(2, 3, {1, 0, 1, 0, 1, 0}));
  Value y = matmul_nt(tape, x, w);
  const Tensor& yv = tape.value(y);
  CHECK(yv.at(0, 0) == doctest::Approx(4));   // 1+3
  CHECK(yv.at(0, 1) == doctest::Approx(2));
  CHECK(yv.at(1, 0) == doctest::Approx(10));  // 4+6
  CHECK(yv.at(1, 1) == doctest::Approx(5));
}

TEST_CASE("gradients of every primitive match central finite differences") {
  auto rng = testutil::test_rng(1);
  const int instances = 50;
  for (int it = 0; it < instances; ++it) {
    const std::size_t B = 1 + (rng.next_u64() % 4);
    const std::size_t n = 1 + (rng.next_u64() % 4);
    const std::size_t m = 1 + (rng.next_u64() % 4);

    check_gradient(
        [](Tape& t, const std::vector<Value>& v) { return matmul_nt(t, v[0], v[1]); },
        {random_tensor(B, n, rng), random_tensor(m, n, rng)});
    check_gradient([](Tape& t, const std::vector<Value>& v) { return matmul(t, v[0], v[1]); },
                   {random_tensor(B, n, rng), random_tensor(n, m, rng)});
    check_gradient(
        [](Tape& t, const std::vector<Value>& v) { return add_bias(t, v[0], v[1]); },
        {random_tensor(B, n, rng), random_tensor(1, n, rng)});
    check_gradient([](Tape& t, const std::vector<Value>& v) { return add(t, v[0], v[1]); },
                   {random_tensor(B, n, rng), random_tensor(B, n, rng)});
    check_gradient([](Tape& t, const std::vector<Value>& v) { return sub(t, v[0], v[1]); },
                   {random_tensor(B, n, rng), random_tensor(B, n, rng)});
    check_gradient([](Tape& t, const std::vector<Value>& v) { return mul(t, v[0], v[1]); },
                   {random_tensor(B, n, rng), random_tensor(B, n, rng)});
    check_gradient([](Tape& t, const std::vector<Value>& v) { return scale(t, v[0], -1.7); },
                   {random_tensor(B, n, rng)});
    check_gradient(
        [](Tape& t, const std::vector<Value>& v) { return add_scalar(t, v[0], 0.33); },
        {random_tensor(B, n, rng)});
    check_gradient([](Tape& t, const std::vector<Value>& v) { return tanh_v(t, v[0]); },
                   {random_tensor(B, n, rng)});
    check_gradient([](Tape& t, const std::vector<Value>& v) { return silu_v(t, v[0]); },
                   {random_tensor(B, n, rng)});
    check_gradient([](Tape& t, const std::vector<Value>& v) { return exp_v(t, v[0]); },
                   {random_tensor(B, n, rng)});
    check_gradient([](Tape& t, const std::vector<Value>& v) { return sqrt_v(t, v[0]); },
                   {random_tensor(B, n, rng, 0.5, 2.0)});
    check_gradient([](Tape& t, const std::vector<Value>& v) { return sin_v(t, v[0]); },
                   {random_tensor(B, n, rng)});
    check_gradient([](Tape& t, const std::vector<Value>& v) { return cos_v(t, v[0]); },
                   {random_tensor(B, n, rng)});
    check_gradient([](Tape& t, const std::vector<Value>& v) { return square_v(t, v[0]); },
                   {random_tensor(B, n, rng)});
    check_gradient([](Tape& t, const std::vector<Value>& v) { return sum_all(t, v[0]); },
                   {random_tensor(B, n, rng)});
    check_gradient([](Tape& t, const std::vector<Value>& v) { return mean_all(t, v[0]); },
                   {random_tensor(B, n, rng)});
    check_gradient([](Tape& t, const std::vector<Value>& v) { return sum_cols(t, v[0]); },
                   {random_tensor(B, n, rng)});
    check_gradient([n](Tape& t, const std::vector<Value>& v) { return tile_cols(t, v[0], n); },
                   {random_tensor(B, 1, rng)});
    check_gradient(
        [](Tape& t, const std::vector<Value>& v) { return concat_cols(t, v[0], v[1]); },
        {random_tensor(B, n, rng), random_tensor(B, m, rng)});
    check_gradient(
        [n](Tape& t, const std::vector<Value>& v) { return slice_cols(t, v[0], 1, n); },
        {random_tensor(B, n + 2, rng)});
    check_gradient(
        [n, m](Tape& t, const std::vector<Value>& v) { return matvec(t, v[0], v[1], m, n); },
        {random_tensor(B, m * n, rng), random_tensor(B, n, rng)});
    check_gradient(
        [B](Tape& t, const std::vector<Value>& v) { return broadcast_rows(t, v[0], B); },
        {random_tensor(1, n, rng)});
  }
}

TEST_CASE("gradient flows through composite expressions") {
  // loss = mean(square(tanh(x W^T + b))) exercised end to end
  auto rng = testutil::test_rng(2);
  Tensor x = random_tensor(3, 4, rng);
  Tensor w = random_tensor(5, 4, rng);
  Tensor b = random_tensor(1, 5, rng);

  Tape tape;
  Value xv = tape.leaf(x);
  Value wv = tape.leaf(w);
  Value bv = tape.leaf(b);
  Value out = mean_all(tape, square_v(tape, tanh_v(tape, add_bias(tape, matmul_nt(tape, xv, wv), bv))));
  tape.backward(out);

  auto f = [&](std::span<const double> flat) {
    Tape t2;
    Tensor xm = x;
    xm.data.assign(flat.begin(), flat.end());
    Value o = mean_all(
        t2, square_v(t2, tanh_v(t2, add_bias(t2, matmul_nt(t2, t2.constant(xm), t2.constant(w)),
                                             t2.constant(b)))));
    return t2.value(o).data[0];
  };
  auto fd = central_diff(f, x.data);
  const Tensor& gx = tape.grad(xv);
  for (std::size_t k = 0; k < fd.size(); ++k) CHECK(rel_close(gx.data[k], fd[k], 1e-5));
}

TEST_CASE("backward rejects non-scalar loss") {
  Tape tape;
  Value x = tape.leaf(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  CHECK_THROWS_AS(tape.backward(x), mfsig::UsageError);
}

TEST_CASE("shape mismatches are reported as usage errors") {
  Tape tape;
  Value a = tape.constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  Value b = tape.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  CHECK_THROWS_AS(add(tape, a, b), mfsig::UsageError);
  CHECK_THROWS_AS(matmul(tape, a, b), mfsig::UsageError);
  CHECK_THROWS_AS(slice_cols(tape, a, 2, 2), mfsig::UsageError);
}

TEST_CASE("no gradient flows into constants") {
  Tape tape;
  Value c = tape.constant(Tensor::scalar(2.0));
  Value x = tape.leaf(Tensor::scalar(3.0));
  Value loss = sum_all(tape, mul(tape, x, c));
  tape.backward(loss);
  CHECK(tape.grad(x).data[0] == doctest::Approx(2.0));
  CHECK_FALSE(tape.has_grad(c));
}
