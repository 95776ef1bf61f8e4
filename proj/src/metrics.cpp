#include "mfsig/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "mfsig/errors.hpp"

namespace mfsig::metrics {

double mee(std::span<const double> theta_hat, std::span<const double> theta_ref,
           std::size_t n_traj, std::size_t n_times, std::size_t dim) {
  const std::size_t total = n_traj * n_times * dim;
  if (theta_hat.size() != total || theta_ref.size() != total)
    throw UsageError("mee: shape mismatch");
  double acc = 0.0;
  for (std::size_t r = 0; r < n_traj * n_times; ++r) {
    double sq = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
      const double d = theta_hat[r * dim + k] - theta_ref[r * dim + k];
      sq += d * d;
    }
    acc += std::sqrt(sq);
  }
  return acc / static_cast<double>(n_traj * n_times);
}

double w2_1d(std::span<const double> samples_a, std::span<const double> samples_b) {
  if (samples_a.size() != samples_b.size())
    throw UsageError("w2_1d: sample counts must be equal");
  if (samples_a.empty()) throw UsageError("w2_1d: empty samples");
  std::vector<double> a(samples_a.begin(), samples_a.end());
  std::vector<double> b(samples_b.begin(), samples_b.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(a.size()));
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_metric_csv(const std::string& file, const std::vector<MetricRow>& rows) {
  std::ofstream os(file, std::ios::trunc);
  if (!os) throw DataError("write_metric_csv: cannot open " + file);
  os << "run_id,seed,stage,metric,time_index,value\n";
  for (const auto& r : rows) {
    os << r.run_id << "," << r.seed << "," << r.stage << "," << r.name << ","
       << r.time_index << "," << format_double(r.value) << "\n";
  }
}

}  // namespace mfsig::metrics
