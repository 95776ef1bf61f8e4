#include "mfsig/embed.hpp"

#include <cmath>
#include <string>

#include "mfsig/errors.hpp"

namespace mfsig::embed {

std::size_t feature_length(FeatureKind kind, std::size_t q, std::size_t depth) {
  const std::size_t full = sig::sig_dim(q, depth);
  return kind == FeatureKind::Signature ? full : full - 1;
}

EmbedArch EmbedArch::make(ArchVariant variant, FeatureKind feature, std::size_t depth,
                          std::size_t q, std::size_t state_dim, std::size_t out_dim,
                          const std::vector<std::size_t>& hidden, nn::Act act,
                          path::Rng& rng) {
  EmbedArch a;
  a.variant = variant;
  a.feature = feature;
  a.depth = depth;
  a.q = q;
  a.state_dim = state_dim;
  a.out_dim = out_dim;
  const std::size_t F = a.feature_len();
  const std::size_t in = variant == ArchVariant::LinearFunctional ? 1 + state_dim
                                                                  : 1 + state_dim + F;
  const std::size_t out = variant == ArchVariant::LinearFunctional ? out_dim * F : out_dim;
  a.net = nn::NetParams::make_mlp(in, hidden, out, act, rng);
  return a;
}

void EmbedArch::validate() const {
  net.validate();
  const std::size_t F = feature_len();
  const std::size_t want_in =
      variant == ArchVariant::LinearFunctional ? 1 + state_dim : 1 + state_dim + F;
  const std::size_t want_out =
      variant == ArchVariant::LinearFunctional ? out_dim * F : out_dim;
  if (net.input_dim != want_in || net.output_dim != want_out)
    throw ConfigError("embed arch: network dims do not match variant/feature choice");
}

nn::Value embed_predict(nn::Tape& tape, const nn::BoundNet& net, const EmbedArch& arch,
                        nn::Value t_state, nn::Value features) {
  const std::size_t F = arch.feature_len();
  if (tape.value(features).cols() != F)
    throw UsageError("embed_predict: feature length " +
                     std::to_string(tape.value(features).cols()) + " != declared " +
                     std::to_string(F));
  if (arch.variant == ArchVariant::LinearFunctional) {
    nn::Value coeffs = nn::forward(tape, net, t_state);
    return nn::matvec(tape, coeffs, features, arch.out_dim, F);
  }
  return nn::forward(tape, net, nn::concat_cols(tape, t_state, features));
}

nn::Tensor embed_eval(const EmbedArch& arch, const nn::Tensor& t_state,
                      const nn::Tensor& features) {
  nn::Tape tape;
  nn::Value out = embed_predict(tape, nn::bind(tape, arch.net, false), arch,
                                tape.constant(t_state), tape.constant(features));
  return tape.value(out);
}

EmbedTarget compute_targets(const ExactEmbed& m, const path::CondEnsemble& ens,
                            std::size_t out_dim, std::span<const double> times) {
  if (times.size() != ens.n_times)
    throw UsageError("compute_targets: times/ensemble length mismatch");
  EmbedTarget tgt;
  tgt.n_times = ens.n_times;
  tgt.n2 = ens.n2;
  tgt.n1 = ens.n1;
  tgt.out_dim = out_dim;
  tgt.values.assign(ens.n_times * ens.n2 * ens.n1 * out_dim, 0.0);
  for (std::size_t ti = 0; ti < ens.n_times; ++ti) {
    for (std::size_t i2 = 0; i2 < ens.n2; ++i2) {
      ParticleView view{ens.particles(ti, i2).data(), ens.n1, ens.dim};
      for (std::size_t i1 = 0; i1 < ens.n1; ++i1) {
        std::span<double> out{
            tgt.values.data() + ((ti * ens.n2 + i2) * ens.n1 + i1) * out_dim, out_dim};
        m(times[ti], ens.particle(ti, i2, i1), view, out);
        for (double v : out)
          if (!std::isfinite(v))
            throw ConfigError("compute_targets: non-finite target at t_index=" +
                              std::to_string(ti) + " n2=" + std::to_string(i2) +
                              " n1=" + std::to_string(i1));
      }
    }
  }
  return tgt;
}

namespace {

double mse_step(EmbedArch& arch, nn::AdamState* adam, const EmbedDataset& data,
                double rate, int stage, long step) {
  nn::Tape tape;
  nn::BoundNet bound = nn::bind(tape, arch.net, adam != nullptr);
  nn::Value pred = embed_predict(tape, bound, arch, tape.constant(data.t_state),
                                 tape.constant(data.features));
  nn::Value err = nn::sub(tape, pred, tape.constant(data.targets));
  nn::Value loss = nn::mean_all(tape, nn::square_v(tape, err));
  const double loss_val = tape.value(loss).data[0];
  if (adam != nullptr) {
    tape.backward(loss);
    nn::NetGrads grads = nn::collect_grads(tape, bound);
    try {
      nn::adam_step(arch.net, grads, *adam, rate);
    } catch (const TrainError& e) {
      throw TrainError(std::string("embed training: ") + e.what(), stage, step);
    }
  }
  return loss_val;
}

}  // namespace

double embed_loss(const EmbedArch& arch, const EmbedDataset& data) {
  EmbedArch& mut = const_cast<EmbedArch&>(arch);
  return mse_step(mut, nullptr, data, 0.0, 0, 0);
}

TrainResult train_embed(EmbedArch& arch, nn::AdamState& adam, const EmbedDataset& data,
                        const nn::LrSchedule& schedule, long steps, int stage,
                        long step_offset) {
  if (data.t_state.rows() != data.targets.rows() ||
      data.t_state.rows() != data.features.rows())
    throw UsageError("train_embed: dataset rows misaligned");
  TrainResult res;
  double initial = -1.0;
  int high_streak = 0;
  for (long s = 0; s < steps; ++s) {
    const double rate = schedule.rate(step_offset + s, stage);
    const double loss = mse_step(arch, &adam, data, rate, stage, step_offset + s);
    if (initial < 0.0) initial = loss;
    res.loss_trace.push_back(loss);
    high_streak = loss > 10.0 * initial ? high_streak + 1 : 0;
    if (high_streak >= 100) {
      std::string tail;
      for (std::size_t i = res.loss_trace.size() - std::min<std::size_t>(5, res.loss_trace.size());
           i < res.loss_trace.size(); ++i)
        tail += " " + std::to_string(res.loss_trace[i]);
      throw TrainError("embed training diverged; trailing losses:" + tail, stage,
                       step_offset + s);
    }
  }
  res.final_loss = res.loss_trace.empty() ? embed_loss(arch, data) : res.loss_trace.back();
  return res;
}

std::vector<double> mae_at_time(const EmbedArch& arch, const nn::Tensor& t_state,
                                const nn::Tensor& features, const nn::Tensor& reference,
                                std::size_t n_times, std::size_t n_traj) {
  if (t_state.rows() != n_times * n_traj || reference.rows() != n_times * n_traj)
    throw UsageError("mae_at_time: row count mismatch");
  nn::Tensor pred = embed_eval(arch, t_state, features);
  std::vector<double> curve(n_times, 0.0);
  const std::size_t l = arch.out_dim;
  for (std::size_t ti = 0; ti < n_times; ++ti) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n_traj; ++j) {
      const std::size_t r = ti * n_traj + j;
      double sq = 0.0;
      for (std::size_t k = 0; k < l; ++k) {
        const double d = pred.data[r * l + k] - reference.data[r * l + k];
        sq += d * d;
      }
      acc += std::sqrt(sq);
    }
    curve[ti] = acc / static_cast<double>(n_traj);
  }
  return curve;
}

}  // namespace mfsig::embed
