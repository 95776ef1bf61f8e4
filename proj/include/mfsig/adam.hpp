#pragma once

#include <vector>

#include "mfsig/net.hpp"
#include "mfsig/tensor.hpp"

namespace mfsig::nn {

// Adam moment buffers aligned with a NetParams layout.
struct AdamState {
  std::vector<Tensor> m_w, v_w, m_b, v_b;
  long step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_net(const NetParams& net);
};

// Standard bias-corrected Adam update. Throws TrainError on non-finite
// gradients (caller supplies stage/step context via catch-and-rethrow).
void adam_step(NetParams& params, const NetGrads& grads, AdamState& state, double rate);

// Stepwise learning-rate schedule:
//   rate(step, stage) = initial * stage_factor^max(0, stage - stage_factor_after)
//                       * decay_factor^D(step)
// where D counts periodic decays (every `decay_every` steps, stopping at
// `decay_until` when set) or, when `milestones` is non-empty, the number of
// milestones <= step.
struct LrSchedule {
  double initial_rate = 1e-3;
  double decay_factor = 1.0;
  long decay_every = 0;
  long decay_until = 0;
  std::vector<long> milestones;
  double stage_factor = 1.0;
  int stage_factor_after = 0;

  double rate(long step, int stage) const;
};

}  // namespace mfsig::nn
