#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "helpers.hpp"
#include "mfsig/adam.hpp"
#include "mfsig/autodiff.hpp"
#include "mfsig/errors.hpp"
#include "mfsig/net.hpp"

using namespace mfsig::nn;
using testutil::rel_close;

namespace {

// Scalar-by-scalar reference forward pass, written against the layer math
// directly instead of the tape ops.
std::vector<double> reference_forward(const NetParams& net, const std::vector<double>& x) {
  std::vector<double> h = x;
  for (const auto& l : net.layers) {
    std::vector<double> next(l.weight.rows());
    for (std::size_t i = 0; i < l.weight.rows(); ++i) {
      double acc = l.bias.data[i];
      for (std::size_t j = 0; j < l.weight.cols(); ++j) acc += l.weight.at(i, j) * h[j];
      switch (l.act) {
        case Act::Identity: next[i] = acc; break;
        case Act::Tanh: next[i] = std::tanh(acc); break;
        case Act::Silu: next[i] = acc / (1.0 + std::exp(-acc)); break;
      }
    }
    h = std::move(next);
  }
  return h;
}

}  // namespace

TEST_CASE("zero net maps any batch to zero") {
  auto rng = testutil::test_rng(3);
  NetParams net = NetParams::make_mlp(3, {4}, 2, Act::Tanh, rng);
  for (auto& l : net.layers) {
    l.weight.fill(0.0);
    l.bias.fill(0.0);
  }
  Tensor batch = testutil::random_tensor(5, 3, rng);
  Tensor out = forward_eval(net, batch);
  for (double v : out.data) CHECK(v == 0.0);
}

TEST_CASE("single identity layer passes the batch through") {
  auto rng = testutil::test_rng(4);
  NetParams net = NetParams::make_mlp(3, {}, 3, Act::Tanh, rng);
  net.layers[0].weight = Tensor::identity(3);
  net.layers[0].bias.fill(0.0);
  Tensor batch = testutil::random_tensor(4, 3, rng);
  Tensor out = forward_eval(net, batch);
  for (std::size_t k = 0; k < batch.data.size(); ++k)
    CHECK(out.data[k] == doctest::Approx(batch.data[k]));
}

TEST_CASE("two-layer tanh net matches hand-rolled forward pass") {
  auto rng = testutil::test_rng(5);
  NetParams net = NetParams::make_mlp(3, {5, 4}, 2, Act::Tanh, rng);
  Tensor batch = testutil::random_tensor(4, 3, rng);
  Tensor out = forward_eval(net, batch);
  for (std::size_t r = 0; r < 4; ++r) {
    std::vector<double> row(batch.data.begin() + r * 3, batch.data.begin() + (r + 1) * 3);
    auto ref = reference_forward(net, row);
    for (std::size_t j = 0; j < 2; ++j) CHECK(out.at(r, j) == doctest::Approx(ref[j]).epsilon(1e-12));
  }
}

TEST_CASE("mlp_forward rejects wrong batch width") {
  auto rng = testutil::test_rng(6);
  NetParams net = NetParams::make_mlp(3, {4}, 2, Act::Tanh, rng);
  Tape tape;
  Value in = tape.constant(Tensor::zeros({2, 5}));
  CHECK_THROWS_AS(forward(tape, bind(tape, net, false), in), mfsig::ConfigError);
}

TEST_CASE("loss = sum of outputs of linear net gives all-ones bias gradient") {
  auto rng = testutil::test_rng(7);
  NetParams net = NetParams::make_mlp(2, {}, 2, Act::Tanh, rng);
  Tape tape;
  BoundNet bn = bind(tape, net, true);
  Value in = tape.constant(Tensor::matrix(1, 2, {1.0, 2.0}));
  Value loss = sum_all(tape, forward(tape, bn, in));
  tape.backward(loss);
  NetGrads g = collect_grads(tape, bn);
  // d(sum(Wx+b))/dW_ij = x_j, /db_i = 1
  CHECK(g.w[0].at(0, 0) == doctest::Approx(1.0));
  CHECK(g.w[0].at(0, 1) == doctest::Approx(2.0));
  CHECK(g.b[0].data[0] == doctest::Approx(1.0));
  CHECK(g.b[0].data[1] == doctest::Approx(1.0));
}

TEST_CASE("grad of 0.5*||Wx||^2 at W=I, x=(1,2) is [[1,2],[2,4]]") {
  NetParams net;
  net.input_dim = 2;
  net.output_dim = 2;
  Layer l;
  l.weight = Tensor::identity(2);
  l.bias = Tensor::zeros({2});
  l.act = Act::Identity;
  net.layers.push_back(l);

  Tape tape;
  BoundNet bn = bind(tape, net, true);
  Value in = tape.constant(Tensor::matrix(1, 2, {1.0, 2.0}));
  Value out = forward(tape, bn, in);
  Value loss = scale(tape, sum_all(tape, square_v(tape, out)), 0.5);
  tape.backward(loss);
  NetGrads g = collect_grads(tape, bn);
  CHECK(g.w[0].at(0, 0) == doctest::Approx(1.0));
  CHECK(g.w[0].at(0, 1) == doctest::Approx(2.0));
  CHECK(g.w[0].at(1, 0) == doctest::Approx(2.0));
  CHECK(g.w[0].at(1, 1) == doctest::Approx(4.0));
}

TEST_CASE("random 3-layer net gradient matches finite differences") {
  auto rng = testutil::test_rng(8);
  NetParams net = NetParams::make_mlp(3, {4, 4, 3}, 2, Act::Silu, rng);
  Tensor batch = testutil::random_tensor(4, 3, rng);

  Tape tape;
  BoundNet bn = bind(tape, net, true);
  Value loss = mean_all(tape, square_v(tape, forward(tape, bn, tape.constant(batch))));
  tape.backward(loss);
  NetGrads g = collect_grads(tape, bn);

  for (std::size_t layer = 0; layer < net.layers.size(); ++layer) {
    auto f = [&](std::span<const double> flat) {
      NetParams mod = net;
      mod.layers[layer].weight.data.assign(flat.begin(), flat.end());
      Tape t2;
      Value l2 = mean_all(
          t2, square_v(t2, forward(t2, bind(t2, mod, false), t2.constant(batch))));
      return t2.value(l2).data[0];
    };
    auto fd = testutil::central_diff(f, net.layers[layer].weight.data);
    for (std::size_t k = 0; k < fd.size(); ++k) {
      INFO("layer ", layer, " coord ", k);
      CHECK(rel_close(g.w[layer].data[k], fd[k], 1e-5));
    }
  }
}

TEST_CASE("gradient accumulates across repeated forwards of one binding") {
  // two forwards of the same net on one tape: dL/db doubles
  auto rng = testutil::test_rng(9);
  NetParams net = NetParams::make_mlp(2, {}, 1, Act::Tanh, rng);
  Tape tape;
  BoundNet bn = bind(tape, net, true);
  Value in = tape.constant(Tensor::matrix(1, 2, {0.5, -0.5}));
  Value out = add(tape, forward(tape, bn, in), forward(tape, bn, in));
  tape.backward(sum_all(tape, out));
  NetGrads g = collect_grads(tape, bn);
  CHECK(g.b[0].data[0] == doctest::Approx(2.0));
}

TEST_CASE("adam: zero gradients leave params unchanged and bump step_count") {
  auto rng = testutil::test_rng(10);
  NetParams net = NetParams::make_mlp(2, {3}, 1, Act::Tanh, rng);
  NetParams before = net;
  AdamState st = AdamState::for_net(net);
  NetGrads g;
  for (const auto& l : net.layers) {
    g.w.push_back(Tensor::zeros(l.weight.shape));
    g.b.push_back(Tensor::zeros(l.bias.shape));
  }
  adam_step(net, g, st, 1e-2);
  CHECK(st.step_count == 1);
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    for (std::size_t k = 0; k < net.layers[i].weight.data.size(); ++k)
      CHECK(net.layers[i].weight.data[k] == before.layers[i].weight.data[k]);
}

TEST_CASE("adam: first step moves by ~ -rate*sign(g)") {
  NetParams net;
  net.input_dim = 1;
  net.output_dim = 1;
  Layer l;
  l.weight = Tensor::matrix(1, 1, {0.0});
  l.bias = Tensor::zeros({1});
  net.layers.push_back(l);
  AdamState st = AdamState::for_net(net);
  NetGrads g;
  g.w.push_back(Tensor::matrix(1, 1, {0.37}));
  g.b.push_back(Tensor::zeros({1}));
  const double rate = 1e-3;
  adam_step(net, g, st, rate);
  // first-step update: -rate * g / (|g| + eps) within eps-scale correction
  CHECK(std::fabs(net.layers[0].weight.data[0] + rate) < 1e-7);
}

TEST_CASE("adam: two constant-gradient steps match the hand-iterated recursion") {
  NetParams net;
  net.input_dim = 1;
  net.output_dim = 1;
  Layer l;
  l.weight = Tensor::matrix(1, 1, {1.0});
  l.bias = Tensor::zeros({1});
  net.layers.push_back(l);
  AdamState st = AdamState::for_net(net);
  NetGrads g;
  const double grad = -0.8;
  g.w.push_back(Tensor::matrix(1, 1, {grad}));
  g.b.push_back(Tensor::zeros({1}));
  const double rate = 5e-3;

  // hand recursion
  double m = 0, v = 0, p = 1.0;
  for (int t = 1; t <= 2; ++t) {
    m = 0.9 * m + 0.1 * grad;
    v = 0.999 * v + 0.001 * grad * grad;
    const double mhat = m / (1 - std::pow(0.9, t));
    const double vhat = v / (1 - std::pow(0.999, t));
    p -= rate * mhat / (std::sqrt(vhat) + 1e-8);
  }

  adam_step(net, g, st, rate);
  adam_step(net, g, st, rate);
  CHECK(net.layers[0].weight.data[0] == doctest::Approx(p).epsilon(1e-12));
  CHECK(st.step_count == 2);
}

TEST_CASE("adam: NaN gradient raises a training error") {
  auto rng = testutil::test_rng(11);
  NetParams net = NetParams::make_mlp(1, {}, 1, Act::Tanh, rng);
  AdamState st = AdamState::for_net(net);
  NetGrads g;
  g.w.push_back(Tensor::matrix(1, 1, {std::nan("")}));
  g.b.push_back(Tensor::zeros({1}));
  CHECK_THROWS_AS(adam_step(net, g, st, 1e-3), mfsig::TrainError);
}

TEST_CASE("adam: per-coordinate update magnitude bounds") {
  // first step and constant-gradient runs never exceed the rate; arbitrary
  // sequences stay below rate*(1-b1)/sqrt(1-b2)
  auto rng = testutil::test_rng(12);
  const double rate = 1e-2;
  NetParams net;
  net.input_dim = 1;
  net.output_dim = 1;
  Layer l;
  l.weight = Tensor::matrix(1, 1, {0.0});
  l.bias = Tensor::zeros({1});
  net.layers.push_back(l);
  AdamState st = AdamState::for_net(net);
  const double hard_bound = rate * (1 - st.beta1) / std::sqrt(1 - st.beta2);
  double prev = 0.0;
  for (int t = 0; t < 500; ++t) {
    NetGrads g;
    g.w.push_back(Tensor::matrix(1, 1, {rng.normal() * std::exp(3.0 * rng.normal())}));
    g.b.push_back(Tensor::zeros({1}));
    adam_step(net, g, st, rate);
    const double step = std::fabs(net.layers[0].weight.data[0] - prev);
    prev = net.layers[0].weight.data[0];
    if (t == 0) CHECK(step <= rate * (1 + 1e-9));
    CHECK(step <= hard_bound * (1 + 1e-9));
  }
  // constant gradients: bound rate*(1+eps-correction) holds at every step
  AdamState st2 = AdamState::for_net(net);
  prev = net.layers[0].weight.data[0];
  for (int t = 0; t < 200; ++t) {
    NetGrads g;
    g.w.push_back(Tensor::matrix(1, 1, {0.73}));
    g.b.push_back(Tensor::zeros({1}));
    adam_step(net, g, st2, rate);
    const double step = std::fabs(net.layers[0].weight.data[0] - prev);
    prev = net.layers[0].weight.data[0];
    CHECK(step <= rate * (1 + 1e-9));
  }
}

TEST_CASE("deterministic init: same seed gives bit-identical parameters") {
  auto r1 = testutil::test_rng(13);
  auto r2 = testutil::test_rng(13);
  NetParams a = NetParams::make_mlp(4, {8, 8}, 2, Act::Tanh, r1);
  NetParams b = NetParams::make_mlp(4, {8, 8}, 2, Act::Tanh, r2);
  CHECK(param_hash(a) == param_hash(b));
}

TEST_CASE("checkpoint round-trip is lossless") {
  auto rng = testutil::test_rng(14);
  NetParams net = NetParams::make_mlp(3, {7, 5}, 4, Act::Silu, rng);
  auto file = std::filesystem::temp_directory_path() / "mfsig_ckpt_test.bin";
  save_net(net, file);
  NetParams back = load_net(file);
  CHECK(param_hash(net) == param_hash(back));
  CHECK(back.input_dim == 3);
  CHECK(back.output_dim == 4);
  CHECK(back.layers.size() == 3);
  CHECK(back.layers[0].act == Act::Silu);
  CHECK(back.layers[2].act == Act::Identity);
  std::filesystem::remove(file);
}

TEST_CASE("lr schedule: periodic decay, milestones, stage factor") {
  mfsig::nn::LrSchedule s;
  s.initial_rate = 1.0;
  s.decay_factor = 0.8;
  s.decay_every = 500;
  CHECK(s.rate(0, 0) == doctest::Approx(1.0));
  CHECK(s.rate(499, 0) == doctest::Approx(1.0));
  CHECK(s.rate(500, 0) == doctest::Approx(0.8));
  CHECK(s.rate(1700, 0) == doctest::Approx(std::pow(0.8, 3)));

  s.decay_until = 1000;
  CHECK(s.rate(5000, 0) == doctest::Approx(std::pow(0.8, 2)));

  mfsig::nn::LrSchedule m;
  m.initial_rate = 2.5e-4;
  m.decay_factor = 0.3;
  m.milestones = {1000, 1500};
  CHECK(m.rate(999, 0) == doctest::Approx(2.5e-4));
  CHECK(m.rate(1000, 0) == doctest::Approx(2.5e-4 * 0.3));
  CHECK(m.rate(1600, 0) == doctest::Approx(2.5e-4 * 0.09));

  m.stage_factor = 0.9;
  m.stage_factor_after = 20;
  CHECK(m.rate(0, 20) == doctest::Approx(2.5e-4));
  CHECK(m.rate(0, 22) == doctest::Approx(2.5e-4 * 0.81));
  CHECK(m.rate(0, 22) > 0.0);
}
