#pragma once

#include <functional>
#include <span>
#include <vector>

#include "mfsig/adam.hpp"
#include "mfsig/autodiff.hpp"
#include "mfsig/net.hpp"
#include "mfsig/pathsim.hpp"
#include "mfsig/signature.hpp"

namespace mfsig::embed {

enum class ArchVariant { LinearFunctional, DirectNet };  // Archi. 1 / Archi. 2
enum class FeatureKind { Signature, LogSignature };

// Width of the flattened feature vector of the time-augmented common path:
// signatures keep the leading constant 1, log-signatures drop the scalar
// grade (full tensor coordinates, no Lyndon compression).
std::size_t feature_length(FeatureKind kind, std::size_t q, std::size_t depth);

// One network per embedding function m_i, mapping
//   LinearFunctional: (t, state) -> coefficient vector in R^{out_dim * F},
//                     prediction = <coeffs_row, features> per output;
//   DirectNet:        (t, state, features) -> R^{out_dim}.
struct EmbedArch {
  ArchVariant variant = ArchVariant::DirectNet;
  FeatureKind feature = FeatureKind::LogSignature;
  std::size_t depth = 2;      // truncation order M
  std::size_t q = 1;          // common-noise dimension before augmentation
  std::size_t state_dim = 1;  // query-state width fed to the network
  std::size_t out_dim = 1;    // embedding dimension l
  nn::NetParams net;

  std::size_t feature_len() const { return feature_length(feature, q, depth); }

  static EmbedArch make(ArchVariant variant, FeatureKind feature, std::size_t depth,
                        std::size_t q, std::size_t state_dim, std::size_t out_dim,
                        const std::vector<std::size_t>& hidden, nn::Act act,
                        path::Rng& rng);
  void validate() const;
};

// Batched prediction on the tape. t_state is [B x (1 + state_dim)] (time
// prepended), features is [B x F].
nn::Value embed_predict(nn::Tape& tape, const nn::BoundNet& net, const EmbedArch& arch,
                        nn::Value t_state, nn::Value features);

// Plain evaluation without gradient bookkeeping.
nn::Tensor embed_eval(const EmbedArch& arch, const nn::Tensor& t_state,
                      const nn::Tensor& features);

// Uniform empirical measure over particle records of width `dim`.
struct ParticleView {
  const double* data = nullptr;
  std::size_t count = 0;
  std::size_t dim = 0;
  std::span<const double> row(std::size_t i) const { return {data + i * dim, dim}; }
};

// Exact embedding m_i evaluated at (t, query record, empirical measure).
using ExactEmbed =
    std::function<void(double t, std::span<const double> query, const ParticleView& particles,
                       std::span<double> out)>;

// Targets m_i(t_i, Theta^{n1,n2}, nu^{n2}) for supervised learning.
struct EmbedTarget {
  std::size_t n_times = 0, n2 = 0, n1 = 0, out_dim = 0;
  std::vector<double> values;  // [time][n2][n1][out_dim]

  std::span<const double> at(std::size_t time, std::size_t i2, std::size_t i1) const {
    return {values.data() + ((time * n2 + i2) * n1 + i1) * out_dim, out_dim};
  }
};

// Evaluates `m` for every particle against its own (t, n2) empirical
// measure. `times[i]` is the physical time of ensemble slot i.
EmbedTarget compute_targets(const ExactEmbed& m, const path::CondEnsemble& ens,
                            std::size_t out_dim, std::span<const double> times);

// Flat supervised-learning dataset (one row per (t, n1, n2) triple).
struct EmbedDataset {
  nn::Tensor t_state;   // [N x (1 + state_dim)]
  nn::Tensor features;  // [N x F]
  nn::Tensor targets;   // [N x out_dim]
  std::size_t rows() const { return t_state.rows(); }
};

struct TrainResult {
  std::vector<double> loss_trace;
  double final_loss = 0.0;
};

// Full-batch Adam on the mean squared error. Divergence (loss above 10x the
// initial value for 100 consecutive steps) raises TrainError with the trace
// attached to the message.
TrainResult train_embed(EmbedArch& arch, nn::AdamState& adam, const EmbedDataset& data,
                        const nn::LrSchedule& schedule, long steps, int stage,
                        long step_offset = 0);

// One MSE evaluation without updating parameters.
double embed_loss(const EmbedArch& arch, const EmbedDataset& data);

// MAE_{t_n} = mean_j | ref_j(t_n) - prediction_j(t_n) | with the Euclidean
// norm across the out_dim coordinates. Rows are grouped by time:
// row = time * n_traj + j. Returns one value per time node.
std::vector<double> mae_at_time(const EmbedArch& arch, const nn::Tensor& t_state,
                                const nn::Tensor& features, const nn::Tensor& reference,
                                std::size_t n_times, std::size_t n_traj);

}  // namespace mfsig::embed
