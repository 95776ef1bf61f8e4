#include "mfsig/net.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "mfsig/errors.hpp"

namespace mfsig::nn {

NetParams NetParams::make_mlp(std::size_t in, const std::vector<std::size_t>& hidden,
                              std::size_t out, Act hidden_act, path::Rng& rng) {
  if (in == 0 || out == 0) throw ConfigError("make_mlp: zero input or output dim");
  NetParams p;
  p.input_dim = in;
  p.output_dim = out;
  std::size_t prev = in;
  auto push = [&](std::size_t width, Act act) {
    Layer l;
    l.weight = Tensor::zeros({width, prev});
    l.bias = Tensor::zeros({width});
    const double bound = std::sqrt(6.0 / static_cast<double>(prev + width));
    for (double& v : l.weight.data) v = rng.uniform(-bound, bound);
    l.act = act;
    p.layers.push_back(std::move(l));
    prev = width;
  };
  for (std::size_t h : hidden) push(h, hidden_act);
  push(out, Act::Identity);
  return p;
}

std::size_t NetParams::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.numel() + l.bias.numel();
  return n;
}

void NetParams::validate() const {
  if (layers.empty()) throw ConfigError("net: no layers");
  std::size_t prev = input_dim;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    if (l.weight.cols() != prev)
      throw ConfigError("net: layer " + std::to_string(i) + " input dim " +
                        std::to_string(l.weight.cols()) + " != " + std::to_string(prev));
    if (l.bias.numel() != l.weight.rows())
      throw ConfigError("net: layer " + std::to_string(i) + " bias size mismatch");
    prev = l.weight.rows();
  }
  if (prev != output_dim) throw ConfigError("net: output dim mismatch");
  if (layers.back().act != Act::Identity)
    throw ConfigError("net: last layer activation must be identity");
}

BoundNet bind(Tape& tape, const NetParams& net, bool trainable) {
  BoundNet b;
  b.net = &net;
  b.trainable = trainable;
  for (const auto& l : net.layers) {
    if (trainable) {
      b.w.push_back(tape.leaf(l.weight));
      b.b.push_back(tape.leaf(l.bias));
    } else {
      b.w.push_back(tape.constant(l.weight));
      b.b.push_back(tape.constant(l.bias));
    }
  }
  return b;
}

Value forward(Tape& tape, const BoundNet& net, Value input) {
  const Tensor& in = tape.value(input);
  if (in.cols() != net.net->input_dim)
    throw ConfigError("mlp_forward: batch width " + std::to_string(in.cols()) +
                      " != input_dim " + std::to_string(net.net->input_dim));
  Value h = input;
  for (std::size_t i = 0; i < net.net->layers.size(); ++i) {
    h = add_bias(tape, matmul_nt(tape, h, net.w[i]), net.b[i]);
    switch (net.net->layers[i].act) {
      case Act::Identity: break;
      case Act::Tanh: h = tanh_v(tape, h); break;
      case Act::Silu: h = silu_v(tape, h); break;
    }
  }
  return h;
}

Tensor forward_eval(const NetParams& net, const Tensor& batch) {
  Tape tape;
  Value in = tape.constant(batch);
  Value out = forward(tape, bind(tape, net, false), in);
  return tape.value(out);
}

bool NetGrads::all_finite() const {
  for (const auto& t : w)
    if (!t.all_finite()) return false;
  for (const auto& t : b)
    if (!t.all_finite()) return false;
  return true;
}

NetGrads collect_grads(const Tape& tape, const BoundNet& net) {
  NetGrads g;
  for (std::size_t i = 0; i < net.w.size(); ++i) {
    g.w.push_back(tape.has_grad(net.w[i]) ? tape.grad(net.w[i])
                                          : Tensor::zeros(net.net->layers[i].weight.shape));
    g.b.push_back(tape.has_grad(net.b[i]) ? tape.grad(net.b[i])
                                          : Tensor::zeros(net.net->layers[i].bias.shape));
  }
  return g;
}

namespace {

constexpr char kMagic[4] = {'M', 'F', 'S', 'G'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::istream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
}

}  // namespace

void save_net(const NetParams& net, const std::filesystem::path& file) {
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("save_net: cannot open " + file.string());
  os.write(kMagic, 4);
  write_pod(os, kVersion);
  write_pod(os, static_cast<std::uint64_t>(net.input_dim));
  write_pod(os, static_cast<std::uint64_t>(net.output_dim));
  write_pod(os, static_cast<std::uint32_t>(net.layers.size()));
  for (const auto& l : net.layers) {
    write_pod(os, static_cast<std::uint8_t>(l.act));
    write_pod(os, static_cast<std::uint64_t>(l.weight.rows()));
    write_pod(os, static_cast<std::uint64_t>(l.weight.cols()));
    os.write(reinterpret_cast<const char*>(l.weight.data.data()),
             static_cast<std::streamsize>(l.weight.data.size() * sizeof(double)));
    os.write(reinterpret_cast<const char*>(l.bias.data.data()),
             static_cast<std::streamsize>(l.bias.data.size() * sizeof(double)));
  }
  if (!os) throw DataError("save_net: write failed for " + file.string());
}

NetParams load_net(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw DataError("load_net: cannot open " + file.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("load_net: bad magic in " + file.string());
  std::uint32_t version = 0;
  read_pod(is, version);
  if (version != kVersion)
    throw DataError("load_net: unsupported version " + std::to_string(version));
  std::uint64_t in = 0, out = 0;
  std::uint32_t n_layers = 0;
  read_pod(is, in);
  read_pod(is, out);
  read_pod(is, n_layers);
  NetParams p;
  p.input_dim = in;
  p.output_dim = out;
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    std::uint8_t act = 0;
    std::uint64_t r = 0, c = 0;
    read_pod(is, act);
    read_pod(is, r);
    read_pod(is, c);
    if (!is || act > 2) throw DataError("load_net: corrupt layer header");
    Layer l;
    l.act = static_cast<Act>(act);
    l.weight = Tensor::zeros({static_cast<std::size_t>(r), static_cast<std::size_t>(c)});
    l.bias = Tensor::zeros({static_cast<std::size_t>(r)});
    is.read(reinterpret_cast<char*>(l.weight.data.data()),
            static_cast<std::streamsize>(l.weight.data.size() * sizeof(double)));
    is.read(reinterpret_cast<char*>(l.bias.data.data()),
            static_cast<std::streamsize>(l.bias.data.size() * sizeof(double)));
    p.layers.push_back(std::move(l));
  }
  if (!is) throw DataError("load_net: truncated file " + file.string());
  p.validate();
  return p;
}

std::uint64_t param_hash(const NetParams& net) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const Tensor& t) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data.data());
    for (std::size_t i = 0; i < t.data.size() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& l : net.layers) {
    feed(l.weight);
    feed(l.bias);
  }
  return h;
}

}  // namespace mfsig::nn
