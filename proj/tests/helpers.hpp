#pragma once

// Test-only oracles, independent of the implementation paths they check.

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "mfsig/rng.hpp"
#include "mfsig/signature.hpp"
#include "mfsig/tensor.hpp"

namespace testutil {

inline mfsig::path::Rng test_rng(std::uint64_t salt) {
  return mfsig::path::Rng::stream(0x5eedULL, mfsig::path::StreamKind::Test, salt);
}

inline mfsig::nn::Tensor random_tensor(std::size_t r, std::size_t c, mfsig::path::Rng& rng,
                                       double lo = -1.0, double hi = 1.0) {
  auto t = mfsig::nn::Tensor::zeros({r, c});
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Central finite differences of a scalar function of one flat input vector.
inline std::vector<double> central_diff(const std::function<double(std::span<const double>)>& f,
                                        std::vector<double> x, double h = 1e-4) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline bool rel_close(double a, double b, double rel, double abs_floor = 1e-7) {
  const double scale = std::max({std::fabs(a), std::fabs(b), abs_floor / rel});
  return std::fabs(a - b) <= rel * scale;
}

// First-order quadrature oracle for path signatures: advance the truncated
// tensor ODE dS = S (x) dX with plain Euler updates S_k += S_{k-1} (x) dx
// over many sub-steps of the piecewise-linear path. Shares no code with the
// segment-exponential + Chen route used by the library.
inline mfsig::sig::TruncatedTensor quadrature_signature(
    const std::vector<double>& times, const std::vector<double>& values, std::size_t dim,
    std::size_t depth, std::size_t substeps_per_segment) {
  using mfsig::sig::TruncatedTensor;
  TruncatedTensor s = TruncatedTensor::identity(dim, depth);
  std::vector<double> dx(dim);
  for (std::size_t seg = 0; seg + 1 < times.size(); ++seg) {
    for (std::size_t j = 0; j < dim; ++j)
      dx[j] = (values[(seg + 1) * dim + j] - values[seg * dim + j]) /
              static_cast<double>(substeps_per_segment);
    for (std::size_t sub = 0; sub < substeps_per_segment; ++sub) {
      // top level first so each update reads the previous level's old value
      for (std::size_t k = depth; k >= 1; --k) {
        auto& cur = s.levels[k - 1];
        if (k == 1) {
          for (std::size_t j = 0; j < dim; ++j) cur[j] += dx[j];
        } else {
          const auto& prev = s.levels[k - 2];
          std::size_t idx = 0;
          for (double p : prev)
            for (std::size_t j = 0; j < dim; ++j) cur[idx++] += p * dx[j];
        }
      }
    }
  }
  return s;
}

}  // namespace testutil
