#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mfsig::metrics {

// Mean over trajectories j and times t_n of the Euclidean norm of the
// difference. Layout: row-major [n_traj x n_times x dim].
double mee(std::span<const double> theta_hat, std::span<const double> theta_ref,
           std::size_t n_traj, std::size_t n_times, std::size_t dim);

// Exact 2-Wasserstein distance between 1-D empirical measures of equal size:
// sqrt of the mean squared difference of sorted samples.
double w2_1d(std::span<const double> samples_a, std::span<const double> samples_b);

struct MetricRow {
  std::string run_id;
  std::uint64_t seed = 0;
  int stage = 0;
  std::string name;
  int time_index = -1;  // -1 = aggregate over the declared index set
  double value = 0.0;
};

// Fixed shortest round-trip formatting so identical runs produce
// byte-identical CSVs.
std::string format_double(double v);

void write_metric_csv(const std::string& file, const std::vector<MetricRow>& rows);

}  // namespace mfsig::metrics
