#pragma once

#include <filesystem>
#include <vector>

#include "mfsig/autodiff.hpp"
#include "mfsig/rng.hpp"
#include "mfsig/tensor.hpp"

namespace mfsig::nn {

enum class Act : std::uint8_t { Identity = 0, Tanh = 1, Silu = 2 };

struct Layer {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]
  Act act = Act::Identity;
};

// Feedforward network parameters. Adjacent layers chain; the last layer's
// activation is always Identity.
struct NetParams {
  std::vector<Layer> layers;
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;

  // Glorot-uniform init: +-sqrt(6/(fan_in+fan_out)).
  static NetParams make_mlp(std::size_t in, const std::vector<std::size_t>& hidden,
                            std::size_t out, Act hidden_act, path::Rng& rng);

  std::size_t param_count() const;
  void validate() const;  // throws ConfigError on broken chaining
};

// Parameter leaves bound once per tape so gradients accumulate across
// repeated forward passes of the same network.
struct BoundNet {
  const NetParams* net = nullptr;
  bool trainable = false;
  std::vector<Value> w, b;
};

BoundNet bind(Tape& tape, const NetParams& net, bool trainable);

// mlp_forward: batch [B x input_dim] -> [B x output_dim], recorded on the tape.
Value forward(Tape& tape, const BoundNet& net, Value input);

// Convenience eval without keeping handles around (still records on `tape`).
Tensor forward_eval(const NetParams& net, const Tensor& batch);

// Gradients aligned with NetParams, collected after Tape::backward.
struct NetGrads {
  std::vector<Tensor> w, b;
  bool all_finite() const;
};

NetGrads collect_grads(const Tape& tape, const BoundNet& net);

// Versioned binary checkpoint: magic "MFSG", u32 version, dims, then per layer
// activation tag, extents, row-major weights and bias as little-endian f64.
void save_net(const NetParams& net, const std::filesystem::path& file);
NetParams load_net(const std::filesystem::path& file);

// FNV-1a over the raw parameter bytes; used to assert params stay frozen.
std::uint64_t param_hash(const NetParams& net);

}  // namespace mfsig::nn
