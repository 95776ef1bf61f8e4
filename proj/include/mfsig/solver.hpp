#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mfsig/adam.hpp"
#include "mfsig/autodiff.hpp"
#include "mfsig/embed.hpp"
#include "mfsig/net.hpp"
#include "mfsig/pathsim.hpp"

namespace mfsig::solver {

// Batched tape values at one time node, handed to the coefficient callables.
// z and z0 are row-major flattenings of [dim_y x q] blocks. m[i] is the
// frozen embedding-network prediction for m_{i+1}, or invalid when that
// embedding is identically zero.
struct CoeffContext {
  double t = 0.0;
  nn::Value x, y, z, z0;
  std::array<nn::Value, 4> m;
};

using CoeffFn = std::function<nn::Value(nn::Tape&, const CoeffContext&)>;
using TerminalFn = std::function<nn::Value(nn::Tape&, double T, nn::Value x_T, nn::Value m5)>;

// Coefficient bundle defining one problem instance. Callables are pure and
// operate on whole batches through the tape. Ensemble records are laid out
// [x | y | z row-major] with record_dim entries.
struct FbsdeProblem {
  std::string name;
  std::size_t dim_x = 1;      // forward dimension
  std::size_t dim_y = 1;      // backward dimension
  std::size_t q = 1;          // noise dimension (idiosyncratic == common)
  std::size_t embed_dim = 1;  // l
  double horizon = 1.0;
  path::Mu0Sampler mu0;

  CoeffFn drift;     // b   -> [B x dim_x]
  CoeffFn vol;       // sig -> [B x dim_x*q]
  CoeffFn vol0;      // sig0-> [B x dim_x*q]
  CoeffFn driver;    // h   -> [B x dim_y]
  TerminalFn terminal;  // g -> [B x dim_y]

  std::array<bool, 5> m_zero{true, true, true, true, true};
  std::array<embed::ExactEmbed, 5> exact_m;  // set where m_zero is false

  std::size_t record_dim() const { return dim_x + dim_y + dim_y * q; }
  void validate() const;
};

struct SigConfig {
  std::size_t depth = 2;
  embed::FeatureKind feature = embed::FeatureKind::LogSignature;
  std::size_t width(std::size_t q) const { return embed::feature_length(feature, q, depth); }
};

// Flattened signature features of each common path restricted to [0, t_i],
// streamed over the fine grid so node i costs one Chen extension per fine
// sub-step. n_nodes = N_T + 1 (terminal node uses the full fine grid).
struct FeatureTable {
  std::size_t n_nodes = 0, n2 = 0, width = 0;
  std::vector<double> data;  // [node][n2][width]
  std::span<const double> row(std::size_t node, std::size_t i2) const {
    return {data.data() + (node * n2 + i2) * width, width};
  }
};

FeatureTable compute_features(const path::DriverBlock& drivers, const path::TimeGrid& grid,
                              const SigConfig& cfg);

// Decoupling fields: u maps x0 to Y_0; v and v0 map (t, x, features) to the
// row-major [dim_y x q] blocks Z_t and Z0_t.
struct DecouplingFields {
  nn::NetParams u, v, v0;

  static DecouplingFields make(const FbsdeProblem& p, const SigConfig& sig,
                               const std::vector<std::size_t>& u_hidden,
                               const std::vector<std::size_t>& field_hidden, nn::Act u_act,
                               nn::Act field_act, path::Rng& rng);
};

// Embedding networks per non-zero m_i (index i-1).
struct EmbedSet {
  std::array<std::optional<embed::EmbedArch>, 5> m;
};

struct SimBindings {
  nn::BoundNet u, v, v0;
};

// Trajectories of one simulated block at every coarse node plus the terminal
// mismatch g(X_T, m5(...)) - Y_T. The tape is retained only when the
// simulation ran with gradient recording for Step 3.
struct SimOutput {
  std::size_t n1 = 0, n2 = 0, n_nodes = 0;

  std::vector<nn::Tensor> xs, ys, zs, z0s;  // per node, [B x dim]
  nn::Tensor mismatch;                      // [B x dim_y]
  double terminal_loss = 0.0;               // mean_b ||mismatch_b||^2
  FeatureTable features;

  nn::Tape tape;
  SimBindings bindings;
  std::vector<nn::Value> x_nodes, y_nodes, z_nodes, z0_nodes;
  nn::Value mismatch_v;

  // Empirical conditional ensembles for Step 2: records [x|y|z] at the coarse
  // nodes 0..N_T-1, and x alone at the terminal node.
  path::CondEnsemble theta_ensemble(const FbsdeProblem& p) const;
  path::CondEnsemble terminal_ensemble(const FbsdeProblem& p) const;
};

// Explicit Euler shooting pass over one driver block under frozen embedding
// networks; the decoupling fields record gradients iff train_fields is set.
SimOutput simulate(const FbsdeProblem& problem, const DecouplingFields& fields,
                   const EmbedSet& embeds, const path::DriverBlock& drivers,
                   const path::TimeGrid& grid, const SigConfig& sig, bool train_fields,
                   int stage = -1);

// Same recursion with arbitrary field/embedding evaluators (oracle plantings,
// reference configurations). m returns an invalid Value for vanishing m_i.
struct SimFns {
  std::function<nn::Value(nn::Tape&, nn::Value x0)> u;
  std::function<nn::Value(nn::Tape&, double t, nn::Value x, nn::Value features)> v, v0;
  std::function<nn::Value(nn::Tape&, std::size_t mi, double t, nn::Value x,
                          nn::Value features)>
      m;
};

SimOutput simulate_fns(const FbsdeProblem& problem, const SimFns& fns,
                       const path::DriverBlock& drivers, const path::TimeGrid& grid,
                       const SigConfig& sig, int stage = -1);

// Mean squared terminal mismatch as a differentiable tape value.
nn::Value bsde_loss(SimOutput& sim);

struct FieldAdams {
  nn::AdamState u, v, v0;
  static FieldAdams for_fields(const DecouplingFields& f);
};

struct TrainTrace {
  std::vector<double> losses;
  double final_loss = 0.0;
};

// Step 3: Adam on the terminal mismatch with drivers regenerated every
// regen_every steps under fresh sub-seeds.
TrainTrace train_bsde(const FbsdeProblem& problem, DecouplingFields& fields,
                      FieldAdams& adams, const EmbedSet& embeds, const path::TimeGrid& grid,
                      const SigConfig& sig, const nn::LrSchedule& schedule, long steps,
                      long regen_every, std::size_t n1, std::size_t n2, std::uint64_t seed,
                      int stage);

// Per-stage evaluation plugged in by the benchmarks (closed forms live there).
struct StageEval {
  double mee_x = 0, mee_y = 0, mee_z = 0, mee_z0 = 0;
  std::vector<double> mee_x_t, mee_y_t, mee_z_t, mee_z0_t;
  std::vector<std::pair<std::string, double>> extras;
};
using EvalHook = std::function<StageEval(const SimOutput& eval_sim,
                                         const path::DriverBlock& eval_drivers,
                                         const path::TimeGrid& grid)>;

struct FpConfig {
  path::TimeGrid grid;
  SigConfig sig;
  std::size_t n1 = 64, n2 = 16;

  embed::ArchVariant variant = embed::ArchVariant::DirectNet;
  std::vector<std::size_t> embed_hidden{24, 24};
  nn::Act embed_act = nn::Act::Silu;
  std::vector<std::size_t> u_hidden{24, 24};
  nn::Act u_act = nn::Act::Tanh;
  std::vector<std::size_t> field_hidden{24, 24};
  nn::Act field_act = nn::Act::Tanh;

  int stages = 10;
  long step2_iters = 120;
  long step3_iters = 160;
  long regen_every = 20;
  nn::LrSchedule step2_schedule;
  nn::LrSchedule step3_schedule;

  std::uint64_t seed = 1;
  std::size_t eval_n1 = 1;
  std::size_t eval_n2 = 1000;

  std::string checkpoint_dir;  // empty: no checkpoints written
};

struct StageRecord {
  int stage = 0;
  double embed_loss = 0.0;  // final Step-2 training loss (0 when skipped)
  double bsde_loss = 0.0;   // final Step-3 training loss
  StageEval eval;
  std::vector<double> step2_trace, step3_trace;
  double wall_seconds = 0.0;
};

struct FpState {
  int stage = 0;
  EmbedSet embeds;
  std::array<std::optional<nn::AdamState>, 5> embed_adams;
  DecouplingFields fields;
  FieldAdams field_adams;
  std::vector<StageRecord> history;
};

// The outer iteration: per stage, simulate under stage-(k-1) networks, refit
// the embeddings on the induced empirical conditional laws, then deep-BSDE
// update of the fields with the stage-k embeddings frozen.
FpState fictitious_play(const FbsdeProblem& problem, const FpConfig& cfg,
                        const EvalHook& eval_hook = nullptr);

// Deterministic sub-seed derivation (documented stream layout).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t a = 0,
                          std::uint64_t b = 0);

inline constexpr std::uint64_t kSeedStageDrivers = 101;
inline constexpr std::uint64_t kSeedStep3Drivers = 102;
inline constexpr std::uint64_t kSeedEvalDrivers = 103;
inline constexpr std::uint64_t kSeedFieldInit = 104;
inline constexpr std::uint64_t kSeedEmbedInit = 105;

}  // namespace mfsig::solver
