#include "mfsig/rng.hpp"

#include <cmath>
#include <numbers>

namespace mfsig::path {

namespace {
std::uint64_t splitmix_next(std::uint64_t& s) {
  s += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = s;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t mix(std::uint64_t h, std::uint64_t w) {
  h ^= w + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  std::uint64_t s = h;
  return splitmix_next(s);
}
}  // namespace

Rng Rng::stream(std::uint64_t seed, StreamKind kind, std::uint64_t a, std::uint64_t b,
                std::uint64_t c) {
  std::uint64_t h = mix(seed, static_cast<std::uint64_t>(kind));
  h = mix(h, a);
  h = mix(h, b);
  h = mix(h, c);
  return Rng(h);
}

std::uint64_t Rng::next_u64() { return splitmix_next(state_); }

double Rng::uniform() {
  // 53-bit mantissa, shifted into (0, 1].
  return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * std::numbers::pi * u2;
  cached_ = r * std::sin(a);
  has_cached_ = true;
  return r * std::cos(a);
}

}  // namespace mfsig::path
