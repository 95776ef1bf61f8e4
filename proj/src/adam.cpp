#include "mfsig/adam.hpp"

#include <cmath>

#include "mfsig/errors.hpp"

namespace mfsig::nn {

AdamState AdamState::for_net(const NetParams& net) {
  AdamState s;
  for (const auto& l : net.layers) {
    s.m_w.push_back(Tensor::zeros(l.weight.shape));
    s.v_w.push_back(Tensor::zeros(l.weight.shape));
    s.m_b.push_back(Tensor::zeros(l.bias.shape));
    s.v_b.push_back(Tensor::zeros(l.bias.shape));
  }
  return s;
}

namespace {

void update_buffer(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v,
                   const AdamState& s, double step_size, double bc2) {
  for (std::size_t k = 0; k < param.data.size(); ++k) {
    const double g = grad.data[k];
    m.data[k] = s.beta1 * m.data[k] + (1.0 - s.beta1) * g;
    v.data[k] = s.beta2 * v.data[k] + (1.0 - s.beta2) * g * g;
    const double denom = std::sqrt(v.data[k] / bc2) + s.epsilon;
    param.data[k] -= step_size * m.data[k] / denom;
  }
}

}  // namespace

void adam_step(NetParams& params, const NetGrads& grads, AdamState& state, double rate) {
  if (rate <= 0.0) throw UsageError("adam_step: rate must be positive");
  if (grads.w.size() != params.layers.size())
    throw UsageError("adam_step: gradient/parameter layer count mismatch");
  if (!grads.all_finite()) throw TrainError("adam_step: non-finite gradient", -1, state.step_count);

  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  const double step_size = rate / bc1;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    if (!grads.w[i].same_shape(params.layers[i].weight) ||
        !grads.b[i].same_shape(params.layers[i].bias))
      throw UsageError("adam_step: gradient shape mismatch at layer " + std::to_string(i));
    update_buffer(params.layers[i].weight, grads.w[i], state.m_w[i], state.v_w[i], state,
                  step_size, bc2);
    update_buffer(params.layers[i].bias, grads.b[i], state.m_b[i], state.v_b[i], state,
                  step_size, bc2);
  }
}

double LrSchedule::rate(long step, int stage) const {
  double r = initial_rate;
  const int stage_exp = stage > stage_factor_after ? stage - stage_factor_after : 0;
  for (int i = 0; i < stage_exp; ++i) r *= stage_factor;
  long decays = 0;
  if (!milestones.empty()) {
    for (long m : milestones)
      if (step >= m) ++decays;
  } else if (decay_every > 0) {
    const long capped = decay_until > 0 && step > decay_until ? decay_until : step;
    decays = capped / decay_every;
  }
  for (long i = 0; i < decays; ++i) r *= decay_factor;
  return r;
}

}  // namespace mfsig::nn
