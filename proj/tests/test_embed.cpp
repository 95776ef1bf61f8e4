#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "mfsig/embed.hpp"
#include "mfsig/errors.hpp"

using namespace mfsig;
using namespace mfsig::embed;

namespace {

// 1-D common-path features for n2 paths at one time t: the signature (or its
// log) of the time-augmented path (s, W0_s) sampled on a fine grid.
struct ToyWorld {
  std::size_t n2, n1, n_times;
  double T = 1.0;
  std::vector<double> w0;          // [n2][n_times+1] common path at coarse nodes
  std::vector<double> x;           // [time][n2][n1] state X = W + W0
  std::vector<double> features;    // [time][n2][F]
  std::size_t F;
  FeatureKind kind;
  std::size_t depth;

  ToyWorld(std::size_t n2_, std::size_t n1_, std::size_t n_times_, FeatureKind kind_,
           std::size_t depth_, std::uint64_t seed)
      : n2(n2_), n1(n1_), n_times(n_times_), kind(kind_), depth(depth_) {
    F = feature_length(kind, 1, depth);
    const double dt = T / static_cast<double>(n_times);
    w0.assign(n2 * (n_times + 1), 0.0);
    x.assign((n_times + 1) * n2 * n1, 0.0);
    features.assign((n_times + 1) * n2 * F, 0.0);
    for (std::size_t i2 = 0; i2 < n2; ++i2) {
      auto rng = path::Rng::stream(seed, path::StreamKind::CommonIncrements, i2);
      sig::SigStream stream(1, depth, true);
      double w = 0.0;
      stream.start(0.0, {&w, 1});
      emit(0, i2, stream);
      for (std::size_t s = 1; s <= n_times; ++s) {
        w += std::sqrt(dt) * rng.normal();
        w0[i2 * (n_times + 1) + s] = w;
        stream.extend(s * dt, {&w, 1});
        emit(s, i2, stream);
      }
      for (std::size_t i1 = 0; i1 < n1; ++i1) {
        auto rngi = path::Rng::stream(seed, path::StreamKind::IdioIncrements, i2, i1);
        double wi = 0.0;
        for (std::size_t s = 0; s <= n_times; ++s) {
          x[(s * n2 + i2) * n1 + i1] = wi + w0[i2 * (n_times + 1) + s];
          wi += std::sqrt(dt) * rngi.normal();
        }
      }
    }
  }

  void emit(std::size_t node, std::size_t i2, const sig::SigStream& stream) {
    double* dst = features.data() + (node * n2 + i2) * F;
    if (kind == FeatureKind::Signature)
      sig::flatten_signature(stream.current(), {dst, F});
    else
      sig::flatten_log_signature(sig::log_signature(stream.current()), {dst, F});
  }

  double t_of(std::size_t node) const { return node * T / static_cast<double>(n_times); }

  // rows over (time, n2, n1), targets from a per-row closure
  EmbedDataset dataset(const std::function<double(std::size_t node, std::size_t i2,
                                                  std::size_t i1)>& target) const {
    EmbedDataset ds;
    const std::size_t N = (n_times + 1) * n2 * n1;
    ds.t_state = nn::Tensor::zeros({N, 2});
    ds.features = nn::Tensor::zeros({N, F});
    ds.targets = nn::Tensor::zeros({N, 1});
    std::size_t r = 0;
    for (std::size_t node = 0; node <= n_times; ++node)
      for (std::size_t i2 = 0; i2 < n2; ++i2)
        for (std::size_t i1 = 0; i1 < n1; ++i1) {
          ds.t_state.data[r * 2] = t_of(node);
          ds.t_state.data[r * 2 + 1] = x[(node * n2 + i2) * n1 + i1];
          const double* src = features.data() + (node * n2 + i2) * F;
          std::copy(src, src + F, ds.features.data.begin() + r * F);
          ds.targets.data[r] = target(node, i2, i1);
          ++r;
        }
    return ds;
  }
};

}  // namespace

TEST_CASE("feature_length matches the signature dimension formulas") {
  CHECK(feature_length(FeatureKind::Signature, 1, 3) == 15);
  CHECK(feature_length(FeatureKind::LogSignature, 1, 3) == 14);
  CHECK(feature_length(FeatureKind::Signature, 3, 2) == 21);
}

TEST_CASE("compute_targets: identically zero embedding gives zero targets") {
  auto ens = path::CondEnsemble::allocate(2, 2, 3, 1);
  for (std::size_t i = 0; i < ens.data.size(); ++i) ens.data[i] = double(i);
  ExactEmbed zero = [](double, std::span<const double>, const ParticleView&,
                       std::span<double> out) {
    for (double& v : out) v = 0.0;
  };
  std::vector<double> times{0.0, 0.5};
  auto tgt = compute_targets(zero, ens, 2, times);
  for (double v : tgt.values) CHECK(v == 0.0);
}

TEST_CASE("compute_targets: Dirac ensemble reproduces the single kernel value") {
  const std::size_t d = 2;
  auto ens = path::CondEnsemble::allocate(1, 1, 4, d);
  // all particles at x' = (0.3, -0.4)
  for (std::size_t i1 = 0; i1 < 4; ++i1) {
    ens.particles(0, 0)[i1 * d] = 0.3;
    ens.particles(0, 0)[i1 * d + 1] = -0.4;
  }
  ExactEmbed kernel = [d](double, std::span<const double> query, const ParticleView& ps,
                          std::span<double> out) {
    double acc = 0.0;
    for (std::size_t i = 0; i < ps.count; ++i) {
      double sq = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = query[k] - ps.row(i)[k];
        sq += diff * diff;
      }
      acc += std::exp(-sq / static_cast<double>(d));
    }
    out[0] = acc / static_cast<double>(ps.count);
  };
  std::vector<double> times{0.25};
  auto tgt = compute_targets(kernel, ens, 1, times);
  // query = particle itself -> distance 0 within the ensemble? No: the query
  // is each particle, all at the same point, so m = exp(0) = 1.
  for (std::size_t i1 = 0; i1 < 4; ++i1) CHECK(tgt.at(0, 0, i1)[0] == doctest::Approx(1.0));
}

TEST_CASE("compute_targets: 3-particle kernel mean matches the hand sum") {
  const std::size_t d = 1;
  auto ens = path::CondEnsemble::allocate(1, 1, 3, d);
  const double p0 = 0.1, p1 = -0.7, p2 = 1.3;
  ens.particles(0, 0)[0] = p0;
  ens.particles(0, 0)[1] = p1;
  ens.particles(0, 0)[2] = p2;
  ExactEmbed kernel = [](double, std::span<const double> query, const ParticleView& ps,
                         std::span<double> out) {
    double acc = 0.0;
    for (std::size_t i = 0; i < ps.count; ++i) {
      const double diff = query[0] - ps.row(i)[0];
      acc += std::exp(-diff * diff);
    }
    out[0] = acc / static_cast<double>(ps.count);
  };
  std::vector<double> times{0.5};
  auto tgt = compute_targets(kernel, ens, 1, times);
  auto hand = [&](double xq) {
    return (std::exp(-(xq - p0) * (xq - p0)) + std::exp(-(xq - p1) * (xq - p1)) +
            std::exp(-(xq - p2) * (xq - p2))) / 3.0;
  };
  CHECK(std::fabs(tgt.at(0, 0, 0)[0] - hand(p0)) < 1e-12);
  CHECK(std::fabs(tgt.at(0, 0, 1)[0] - hand(p1)) < 1e-12);
  CHECK(std::fabs(tgt.at(0, 0, 2)[0] - hand(p2)) < 1e-12);
}

TEST_CASE("embed_predict: Archi. 1 with zero net predicts zero") {
  auto rng = testutil::test_rng(50);
  EmbedArch arch = EmbedArch::make(ArchVariant::LinearFunctional, FeatureKind::Signature, 2,
                                   1, 1, 1, {4}, nn::Act::Tanh, rng);
  for (auto& l : arch.net.layers) {
    l.weight.fill(0.0);
    l.bias.fill(0.0);
  }
  nn::Tensor ts = testutil::random_tensor(5, 2, rng);
  nn::Tensor feat = testutil::random_tensor(5, arch.feature_len(), rng);
  nn::Tensor out = embed_eval(arch, ts, feat);
  for (double v : out.data) CHECK(v == 0.0);
}

TEST_CASE("embed_predict: Archi. 1 selecting the constant signature slot predicts 1") {
  auto rng = testutil::test_rng(51);
  EmbedArch arch = EmbedArch::make(ArchVariant::LinearFunctional, FeatureKind::Signature, 2,
                                   1, 1, 1, {}, nn::Act::Tanh, rng);
  // single linear layer; zero weights, bias = e_1 -> coefficient vector e_1
  arch.net.layers[0].weight.fill(0.0);
  arch.net.layers[0].bias.fill(0.0);
  arch.net.layers[0].bias.data[0] = 1.0;

  const std::size_t F = arch.feature_len();
  nn::Tensor ts = testutil::random_tensor(6, 2, rng);
  nn::Tensor feat = testutil::random_tensor(6, F, rng);
  for (std::size_t r = 0; r < 6; ++r) feat.data[r * F] = 1.0;  // signature constant slot
  nn::Tensor out = embed_eval(arch, ts, feat);
  for (double v : out.data) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("embed_predict: Archi. 2 equals a direct forward on the concatenated input") {
  auto rng = testutil::test_rng(52);
  EmbedArch arch = EmbedArch::make(ArchVariant::DirectNet, FeatureKind::LogSignature, 2, 1,
                                   1, 2, {6}, nn::Act::Silu, rng);
  const std::size_t F = arch.feature_len();
  nn::Tensor ts = testutil::random_tensor(4, 2, rng);
  nn::Tensor feat = testutil::random_tensor(4, F, rng);

  nn::Tensor via_embed = embed_eval(arch, ts, feat);

  nn::Tensor joined = nn::Tensor::zeros({4, 2 + F});
  for (std::size_t r = 0; r < 4; ++r) {
    joined.data[r * (2 + F)] = ts.data[r * 2];
    joined.data[r * (2 + F) + 1] = ts.data[r * 2 + 1];
    for (std::size_t k = 0; k < F; ++k) joined.data[r * (2 + F) + 2 + k] = feat.data[r * F + k];
  }
  nn::Tensor direct = nn::forward_eval(arch.net, joined);
  for (std::size_t k = 0; k < via_embed.data.size(); ++k)
    CHECK(via_embed.data[k] == doctest::Approx(direct.data[k]).epsilon(1e-14));
}

TEST_CASE("embed_predict rejects mismatched feature length") {
  auto rng = testutil::test_rng(53);
  EmbedArch arch = EmbedArch::make(ArchVariant::DirectNet, FeatureKind::Signature, 2, 1, 1,
                                   1, {4}, nn::Act::Tanh, rng);
  nn::Tape tape;
  nn::Value ts = tape.constant(nn::Tensor::zeros({2, 2}));
  nn::Value feat = tape.constant(nn::Tensor::zeros({2, 3}));  // wrong width
  CHECK_THROWS_AS(embed_predict(tape, nn::bind(tape, arch.net, false), arch, ts, feat),
                  mfsig::UsageError);
}

TEST_CASE("train_embed: zero targets with a zero output layer start at loss 0") {
  auto rng = testutil::test_rng(54);
  EmbedArch arch = EmbedArch::make(ArchVariant::DirectNet, FeatureKind::LogSignature, 2, 1,
                                   1, 1, {4}, nn::Act::Tanh, rng);
  arch.net.layers.back().weight.fill(0.0);
  arch.net.layers.back().bias.fill(0.0);
  EmbedDataset ds;
  ds.t_state = testutil::random_tensor(10, 2, rng);
  ds.features = testutil::random_tensor(10, arch.feature_len(), rng);
  ds.targets = nn::Tensor::zeros({10, 1});
  CHECK(embed_loss(arch, ds) == 0.0);
}

TEST_CASE("train_embed reduces the loss on a learnable problem") {
  auto rng = testutil::test_rng(55);
  ToyWorld world(8, 4, 10, FeatureKind::LogSignature, 2, 99);
  // target: W0_t (a smooth functional of the signature)
  auto ds = world.dataset([&](std::size_t node, std::size_t i2, std::size_t) {
    return world.w0[i2 * (world.n_times + 1) + node];
  });
  EmbedArch arch = EmbedArch::make(ArchVariant::DirectNet, world.kind, world.depth, 1, 1, 1,
                                   {16, 16}, nn::Act::Silu, rng);
  nn::AdamState adam = nn::AdamState::for_net(arch.net);
  nn::LrSchedule sched;
  sched.initial_rate = 3e-3;
  const double before = embed_loss(arch, ds);
  auto res = train_embed(arch, adam, ds, sched, 300, 1);
  CHECK(res.final_loss < before);
  CHECK(res.final_loss < 0.05 * before + 1e-4);
  CHECK(res.loss_trace.size() == 300);
}

TEST_CASE("Archi. 1 recovers a target inside the hypothesis class to MAE <= 1e-2") {
  // E[x' | F0] for X = W + W0 is W0_t, the level-1 signature coordinate of
  // the augmented path; a constant coefficient vector fits it exactly.
  auto rng = testutil::test_rng(56);
  ToyWorld world(12, 6, 10, FeatureKind::Signature, 2, 123);
  auto ds = world.dataset([&](std::size_t node, std::size_t i2, std::size_t) {
    return world.w0[i2 * (world.n_times + 1) + node];
  });
  EmbedArch arch = EmbedArch::make(ArchVariant::LinearFunctional, world.kind, world.depth,
                                   1, 1, 1, {12}, nn::Act::Tanh, rng);
  nn::AdamState adam = nn::AdamState::for_net(arch.net);
  nn::LrSchedule sched;
  sched.initial_rate = 1e-2;
  sched.decay_factor = 0.7;
  sched.decay_every = 200;
  train_embed(arch, adam, ds, sched, 800, 1);

  auto mae = mae_at_time(arch, ds.t_state, ds.features, ds.targets, world.n_times + 1,
                         world.n2 * world.n1);
  double avg = 0.0;
  for (double v : mae) avg += v;
  avg /= static_cast<double>(mae.size());
  CHECK(avg <= 1e-2);
}

TEST_CASE("feature ablation: shuffling signatures across common paths hurts MAE") {
  auto rng = testutil::test_rng(57);
  ToyWorld world(12, 6, 10, FeatureKind::LogSignature, 2, 321);
  auto ds = world.dataset([&](std::size_t node, std::size_t i2, std::size_t) {
    return world.w0[i2 * (world.n_times + 1) + node];
  });
  EmbedArch arch = EmbedArch::make(ArchVariant::DirectNet, world.kind, world.depth, 1, 1, 1,
                                   {16, 16}, nn::Act::Silu, rng);
  nn::AdamState adam = nn::AdamState::for_net(arch.net);
  nn::LrSchedule sched;
  sched.initial_rate = 3e-3;
  train_embed(arch, adam, ds, sched, 400, 1);

  auto mae = mae_at_time(arch, ds.t_state, ds.features, ds.targets, world.n_times + 1,
                         world.n2 * world.n1);
  // break the (path, feature) pairing: rotate feature rows across n2 within
  // each time slice
  nn::Tensor shuffled = ds.features;
  const std::size_t F = world.F;
  const std::size_t rows_per_time = world.n2 * world.n1;
  for (std::size_t node = 0; node <= world.n_times; ++node)
    for (std::size_t i2 = 0; i2 < world.n2; ++i2)
      for (std::size_t i1 = 0; i1 < world.n1; ++i1) {
        const std::size_t src_r = node * rows_per_time + ((i2 + 1) % world.n2) * world.n1 + i1;
        const std::size_t dst_r = node * rows_per_time + i2 * world.n1 + i1;
        std::copy(ds.features.data.begin() + src_r * F, ds.features.data.begin() + (src_r + 1) * F,
                  shuffled.data.begin() + dst_r * F);
      }
  auto mae_shuffled = mae_at_time(arch, ds.t_state, shuffled, ds.targets, world.n_times + 1,
                                  rows_per_time);
  double avg = 0.0, avg_shuffled = 0.0;
  for (double v : mae) avg += v;
  for (double v : mae_shuffled) avg_shuffled += v;
  CHECK(avg_shuffled > avg);
  CHECK(avg_shuffled > 2.0 * avg);  // the network genuinely uses the features
}

TEST_CASE("mae_at_time: exact reference gives zero; untrained net is a sane ceiling") {
  auto rng = testutil::test_rng(58);
  ToyWorld world(6, 4, 8, FeatureKind::LogSignature, 2, 7);
  auto ds = world.dataset([&](std::size_t node, std::size_t i2, std::size_t) {
    return world.w0[i2 * (world.n_times + 1) + node];
  });
  EmbedArch arch = EmbedArch::make(ArchVariant::DirectNet, world.kind, world.depth, 1, 1, 1,
                                   {8}, nn::Act::Tanh, rng);
  // reference == prediction -> identically zero curve
  nn::Tensor pred = embed_eval(arch, ds.t_state, ds.features);
  auto zero_curve = mae_at_time(arch, ds.t_state, ds.features, pred, world.n_times + 1,
                                world.n2 * world.n1);
  for (double v : zero_curve) CHECK(v == 0.0);

  // untrained MAE against the real targets upper-bounds the trained MAE
  auto untrained = mae_at_time(arch, ds.t_state, ds.features, ds.targets, world.n_times + 1,
                               world.n2 * world.n1);
  nn::AdamState adam = nn::AdamState::for_net(arch.net);
  nn::LrSchedule sched;
  sched.initial_rate = 3e-3;
  train_embed(arch, adam, ds, sched, 300, 1);
  auto trained = mae_at_time(arch, ds.t_state, ds.features, ds.targets, world.n_times + 1,
                             world.n2 * world.n1);
  double u = 0, t = 0;
  for (double v : untrained) u += v;
  for (double v : trained) t += v;
  CHECK(u >= t);
}
