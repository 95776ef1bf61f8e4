#include "mfsig/pathsim.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "mfsig/errors.hpp"

namespace mfsig::path {

void TimeGrid::validate() const {
  if (!(horizon > 0.0)) throw ConfigError("grid.horizon: must be positive");
  if (n_steps == 0) throw ConfigError("grid.n_steps: must be positive");
  if (fine_factor == 0) throw ConfigError("grid.fine_factor: must be positive");
}

std::span<const double> DriverBlock::common_fine_inc(std::size_t i2,
                                                     std::size_t fine_step) const {
  const std::size_t fs = n_steps * fine_factor;
  return {common_fine.data() + (i2 * fs + fine_step) * q, q};
}

std::span<const double> DriverBlock::idio_inc(std::size_t i2, std::size_t i1,
                                              std::size_t step) const {
  return {idio.data() + ((i2 * n1 + i1) * n_steps + step) * q, q};
}

std::span<const double> DriverBlock::initial_state(std::size_t i2, std::size_t i1) const {
  return {x0.data() + (i2 * n1 + i1) * dim_x, dim_x};
}

void DriverBlock::common_coarse_inc(std::size_t i2, std::size_t step,
                                    std::span<double> out) const {
  for (std::size_t j = 0; j < q; ++j) out[j] = 0.0;
  for (std::size_t f = 0; f < fine_factor; ++f) {
    auto inc = common_fine_inc(i2, step * fine_factor + f);
    for (std::size_t j = 0; j < q; ++j) out[j] += inc[j];
  }
}

void DriverBlock::common_value_at_fine(std::size_t i2, std::size_t fine_node,
                                       std::span<double> out) const {
  for (std::size_t j = 0; j < q; ++j) out[j] = 0.0;
  for (std::size_t f = 0; f < fine_node; ++f) {
    auto inc = common_fine_inc(i2, f);
    for (std::size_t j = 0; j < q; ++j) out[j] += inc[j];
  }
}

DriverBlock generate_drivers(std::uint64_t seed, const TimeGrid& grid, std::size_t n1,
                             std::size_t n2, std::size_t q, const Mu0Sampler& mu0,
                             std::size_t dim_x) {
  grid.validate();
  if (n1 == 0 || n2 == 0 || q == 0 || dim_x == 0)
    throw ConfigError("generate_drivers: counts must be positive");
  DriverBlock b;
  b.n1 = n1;
  b.n2 = n2;
  b.q = q;
  b.dim_x = dim_x;
  b.n_steps = grid.n_steps;
  b.fine_factor = grid.fine_factor;
  b.seed = seed;

  const std::size_t fs = grid.fine_steps();
  const double fine_sd = std::sqrt(grid.fine_dt());
  const double coarse_sd = std::sqrt(grid.dt());

  b.common_fine.resize(n2 * fs * q);
  for (std::size_t i2 = 0; i2 < n2; ++i2) {
    Rng rng = Rng::stream(seed, StreamKind::CommonIncrements, i2);
    double* dst = b.common_fine.data() + i2 * fs * q;
    for (std::size_t k = 0; k < fs * q; ++k) dst[k] = fine_sd * rng.normal();
  }

  b.idio.resize(n2 * n1 * grid.n_steps * q);
  b.x0.resize(n2 * n1 * dim_x);
  for (std::size_t i2 = 0; i2 < n2; ++i2) {
    for (std::size_t i1 = 0; i1 < n1; ++i1) {
      Rng rng = Rng::stream(seed, StreamKind::IdioIncrements, i2, i1);
      double* dst = b.idio.data() + (i2 * n1 + i1) * grid.n_steps * q;
      for (std::size_t k = 0; k < grid.n_steps * q; ++k) dst[k] = coarse_sd * rng.normal();
      Rng init = Rng::stream(seed, StreamKind::InitialState, i2, i1);
      mu0(init, {b.x0.data() + (i2 * n1 + i1) * dim_x, dim_x});
    }
  }
  return b;
}

CondEnsemble CondEnsemble::allocate(std::size_t n_times, std::size_t n2, std::size_t n1,
                                    std::size_t dim) {
  CondEnsemble e;
  e.n_times = n_times;
  e.n2 = n2;
  e.n1 = n1;
  e.dim = dim;
  e.data.assign(n_times * n2 * n1 * dim, 0.0);
  return e;
}

std::span<double> CondEnsemble::particles(std::size_t time, std::size_t i2) {
  return {data.data() + (time * n2 + i2) * n1 * dim, n1 * dim};
}

std::span<const double> CondEnsemble::particles(std::size_t time, std::size_t i2) const {
  return {data.data() + (time * n2 + i2) * n1 * dim, n1 * dim};
}

std::span<const double> CondEnsemble::particle(std::size_t time, std::size_t i2,
                                               std::size_t i1) const {
  return {data.data() + ((time * n2 + i2) * n1 + i1) * dim, dim};
}

void dump_paths_csv(const DriverBlock& block, const TimeGrid& grid, const std::string& file) {
  std::ofstream os(file, std::ios::trunc);
  if (!os) throw DataError("dump_paths_csv: cannot open " + file);
  os << "step,n2,n1";
  for (std::size_t j = 0; j < block.q; ++j) os << ",dw" << j;
  os << "\n";
  char buf[64];
  for (std::size_t i2 = 0; i2 < block.n2; ++i2)
    for (std::size_t i1 = 0; i1 < block.n1; ++i1)
      for (std::size_t s = 0; s < grid.n_steps; ++s) {
        os << s << "," << i2 << "," << i1;
        auto inc = block.idio_inc(i2, i1, s);
        for (std::size_t j = 0; j < block.q; ++j) {
          std::snprintf(buf, sizeof buf, "%.17g", inc[j]);
          os << "," << buf;
        }
        os << "\n";
      }
}

}  // namespace mfsig::path
