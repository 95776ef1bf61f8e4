#pragma once

#include <cstdint>

namespace mfsig::path {

// Purpose tags for deriving independent substreams from one run seed.
// Streams are keyed by (seed, kind, a, b, c); adding paths or purposes never
// perturbs draws of existing streams.
enum class StreamKind : std::uint64_t {
  CommonIncrements = 1,
  IdioIncrements = 2,
  InitialState = 3,
  ParamInit = 4,
  Eval = 5,
  Test = 6,
};

// Splitmix64-based generator with Box-Muller normals. Deterministic across
// platforms for a fixed build; no libstdc++ distributions involved.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  static Rng stream(std::uint64_t seed, StreamKind kind, std::uint64_t a = 0,
                    std::uint64_t b = 0, std::uint64_t c = 0);

  std::uint64_t next_u64();
  double uniform();                       // in (0, 1]
  double uniform(double lo, double hi);
  double normal();                        // standard normal

 private:
  std::uint64_t state_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace mfsig::path
