#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mfsig/rng.hpp"

namespace mfsig::path {

// Uniform coarse grid t_i = i T / n_steps with a finer subdivision
// (fine_factor sub-intervals per coarse step) used for common-noise
// signatures. Coarse nodes are a subset of fine nodes by construction.
struct TimeGrid {
  double horizon = 1.0;
  std::size_t n_steps = 120;
  std::size_t fine_factor = 4;

  double dt() const { return horizon / static_cast<double>(n_steps); }
  double fine_dt() const { return dt() / static_cast<double>(fine_factor); }
  std::size_t fine_steps() const { return n_steps * fine_factor; }
  double t(std::size_t i) const { return static_cast<double>(i) * dt(); }
  double fine_t(std::size_t i) const { return static_cast<double>(i) * fine_dt(); }
  void validate() const;
};

using Mu0Sampler = std::function<void(Rng&, std::span<double>)>;

// Paired Brownian drivers: one stream of common increments per n2 on the fine
// grid (coarse increments are sums of their fine sub-increments, so the
// coarse path is the restriction of the fine path), and one idiosyncratic
// stream per (n1, n2) on the coarse grid. Every idiosyncratic index under a
// common index shares that common path verbatim.
struct DriverBlock {
  std::size_t n1 = 0, n2 = 0, q = 0, dim_x = 0;
  std::size_t n_steps = 0, fine_factor = 0;
  std::uint64_t seed = 0;

  std::vector<double> common_fine;  // [n2][fine_steps][q]
  std::vector<double> idio;         // [n2][n1][n_steps][q]
  std::vector<double> x0;           // [n2][n1][dim_x]

  std::span<const double> common_fine_inc(std::size_t i2, std::size_t fine_step) const;
  std::span<const double> idio_inc(std::size_t i2, std::size_t i1, std::size_t step) const;
  std::span<const double> initial_state(std::size_t i2, std::size_t i1) const;

  // Coarse common increment over [t_i, t_{i+1}]: exact sum of fine pieces.
  void common_coarse_inc(std::size_t i2, std::size_t step, std::span<double> out) const;
  // Common path value W^0_{t} at a fine node (prefix sum from 0).
  void common_value_at_fine(std::size_t i2, std::size_t fine_node, std::span<double> out) const;
};

DriverBlock generate_drivers(std::uint64_t seed, const TimeGrid& grid, std::size_t n1,
                             std::size_t n2, std::size_t q, const Mu0Sampler& mu0,
                             std::size_t dim_x);

// Particle records grouped by (coarse time, common index); the empirical
// conditional laws of Step 1 are exactly the uniform measures on these rows.
struct CondEnsemble {
  std::size_t n_times = 0, n2 = 0, n1 = 0, dim = 0;
  std::vector<double> data;  // [time][n2][n1][dim]

  static CondEnsemble allocate(std::size_t n_times, std::size_t n2, std::size_t n1,
                               std::size_t dim);
  std::span<double> particles(std::size_t time, std::size_t i2);
  std::span<const double> particles(std::size_t time, std::size_t i2) const;
  std::span<const double> particle(std::size_t time, std::size_t i2, std::size_t i1) const;
};

// Debug dump of a driver block (CSV: step,n2,n1,coordinates...).
void dump_paths_csv(const DriverBlock& block, const TimeGrid& grid, const std::string& file);

}  // namespace mfsig::path
