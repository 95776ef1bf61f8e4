#pragma once

#include <span>
#include <vector>

#include "mfsig/solver.hpp"

namespace mfsig::bench {

// --- Gaussian-kernel supervised benchmark -----------------------------------
// X = W + W^0, m(t, x, law) = E[exp(-|x - x'|^2 / q)] against the conditional
// law; all dynamics trivial, so the fictitious-play driver reduces to the
// supervised Step 2.
solver::FbsdeProblem gaussian_kernel_problem(std::size_t d);

// Closed form of the kernel embedding under the true conditional law:
// (q/(q+2t))^{q/2} exp(-|x - w0|^2 / (q + 2t)).
double gaussian_kernel_closed_form(std::size_t q, double t, std::span<const double> x,
                                   std::span<const double> w0);

// --- Analytic MV-FBSDE benchmark ---------------------------------------------
// Scalar backward variable; m1 = (E[exp(-|x-x'|^2/d)], E[x'], E[y']) in
// R^{d+2}; all other embeddings vanish.
solver::FbsdeProblem analytic_mvfbsde_problem(std::size_t d);

// Exact solution driven by the same noises: X = W + W^0,
// Y = sin(t + sum_i X_i / sqrt d), Z_i = Z0_i = cos(same) / sqrt d.
void analytic_bench_oracle(std::size_t d, double t, std::span<const double> w,
                           std::span<const double> w0, std::span<double> x,
                           std::span<double> y, std::span<double> z, std::span<double> z0);

// Closed form of m1 under the true conditional law (for MAE evaluation).
void analytic_m1_closed_form(std::size_t d, double t, std::span<const double> x,
                             std::span<const double> w0, std::span<double> out);

// --- Cucker-Smale flocking with common noise ---------------------------------
struct FlockingParams {
  std::size_t d = 3;
  double beta = 0.0;
  double r_scale = 0.5;  // R = r_scale * I
  double q_scale = 0.5;  // Q = q_scale * I
  double c_scale = 0.1;  // C = c_scale * I
  double d_scale = 0.3;  // D = d_scale * I
  double v0_mean = 1.0;  // v_0 ~ N(v0_mean * 1, I), x_0 ~ N(0, I)
};

// State (x, v) of dimension 2d, backward dimension 2d, noise dimension d;
// only m4 is active.
solver::FbsdeProblem flocking_problem(const FlockingParams& p);

// The alignment embedding m4: stacked pair
//   [ E[d_x w (v'-v)]^T Q E[w (v'-v)] ; E[w (v'-v)] E[-w] ]
// with w(r) = (1 + r^2)^{-beta} evaluated at |x - x'|; query and particles
// hold (x, v) records of width 2d.
void flocking_m4(double beta, double q_scale, std::size_t d, std::span<const double> query,
                 const embed::ParticleView& particles, std::span<double> out);

// eta(t) = (e^{2T} - e^{2t}) / (e^{2t} + e^{2T}) for R = Q = 0.5 I: solves
// eta' - eta^2 + 1 = 0 with eta(T) = 0.
double riccati_eta(double t, double T);

struct LqOracle {
  std::vector<double> y2;   // d
  std::vector<double> z2;   // d x q row-major
  std::vector<double> z02;  // d x q row-major (identically zero)
};

// beta = 0 closed form: Y^2 = eta(t)(v - E[v_0] - D W^0_t), Z^2 = eta(t) C,
// Z^{0,2} = 0 (and Y^1 = Z^1 = Z^{0,1} = 0). Throws UsageError when beta != 0.
LqOracle lq_oracle(const FlockingParams& p, double t, double T, std::span<const double> v,
                   std::span<const double> w0);

// --- Stage-evaluation hooks ---------------------------------------------------
// MEE of (X, Y, Z, Z0) against the closed-form solution on the same noises.
solver::EvalHook make_analytic_eval(std::size_t d);

// LQ-reduction diagnostics: MEE of the state against a closed-loop simulation
// under the oracle control, Y/Z/Z0 against the Riccati ansatz evaluated on
// the learned trajectory, plus extras:
//   mee_y2        - criterion metric |learned Y^2 - lq_oracle Y^2|
//   z02_mean_norm - mean Frobenius norm of the learned Z^{0,2} block
//   cond_mean_mee - |empirical E[v_t | F^0] - (E[v_0] + D W^0_t)|
//   mee_v_oracle  - v-part MEE against the closed-loop oracle simulation
solver::EvalHook make_flocking_lq_eval(const FlockingParams& p);

}  // namespace mfsig::bench
