#include "mfsig/signature.hpp"

#include <cmath>
#include <string>

#include "mfsig/errors.hpp"

namespace mfsig::sig {

TruncatedTensor TruncatedTensor::identity(std::size_t n, std::size_t depth) {
  TruncatedTensor t;
  t.ambient_dim = n;
  t.depth = depth;
  t.level0 = 1.0;
  t.levels.resize(depth);
  std::size_t sz = 1;
  for (std::size_t k = 0; k < depth; ++k) {
    sz *= n;
    t.levels[k].assign(sz, 0.0);
  }
  return t;
}

TruncatedTensor TruncatedTensor::zero(std::size_t n, std::size_t depth) {
  TruncatedTensor t = identity(n, depth);
  t.level0 = 0.0;
  return t;
}

std::size_t TruncatedTensor::level_size(std::size_t k) const {
  std::size_t sz = 1;
  for (std::size_t i = 0; i < k; ++i) sz *= ambient_dim;
  return sz;
}

bool TruncatedTensor::same_shape(const TruncatedTensor& o) const {
  return ambient_dim == o.ambient_dim && depth == o.depth;
}

std::size_t flat_sig_len(std::size_t n, std::size_t depth) {
  if (n == 1) return depth + 1;
  std::size_t p = 1;
  for (std::size_t k = 0; k <= depth; ++k) p *= n;
  return (p - 1) / (n - 1);
}

std::size_t flat_logsig_len(std::size_t n, std::size_t depth) {
  return flat_sig_len(n, depth) - 1;
}

std::size_t sig_dim(std::size_t q, std::size_t depth) {
  if (q == 0 || depth == 0) throw UsageError("sig_dim: q and depth must be >= 1");
  return flat_sig_len(q + 1, depth);
}

TruncatedTensor segment_signature(std::span<const double> delta, std::size_t depth) {
  const std::size_t n = delta.size();
  if (n == 0 || depth == 0) throw UsageError("segment_signature: empty delta or zero depth");
  TruncatedTensor t = TruncatedTensor::identity(n, depth);
  t.levels[0].assign(delta.begin(), delta.end());
  for (std::size_t k = 2; k <= depth; ++k) {
    const auto& prev = t.levels[k - 2];
    auto& cur = t.levels[k - 1];
    const double inv_k = 1.0 / static_cast<double>(k);
    std::size_t idx = 0;
    for (double p : prev)
      for (double d : delta) cur[idx++] = p * d * inv_k;
  }
  return t;
}

TruncatedTensor chen_concat(const TruncatedTensor& a, const TruncatedTensor& b) {
  if (!a.same_shape(b)) throw UsageError("chen_concat: ambient_dim/depth mismatch");
  const std::size_t M = a.depth;
  TruncatedTensor out = TruncatedTensor::zero(a.ambient_dim, M);
  out.level0 = a.level0 * b.level0;
  for (std::size_t k = 1; k <= M; ++k) {
    auto& dest = out.levels[k - 1];
    // scalar-grade contributions
    if (a.level0 != 0.0)
      for (std::size_t i = 0; i < dest.size(); ++i) dest[i] += a.level0 * b.levels[k - 1][i];
    if (b.level0 != 0.0)
      for (std::size_t i = 0; i < dest.size(); ++i) dest[i] += b.level0 * a.levels[k - 1][i];
    // mixed grades i + j = k with i, j >= 1
    for (std::size_t i = 1; i < k; ++i) {
      const std::size_t j = k - i;
      const auto& ai = a.levels[i - 1];
      const auto& bj = b.levels[j - 1];
      std::size_t idx = 0;
      for (double av : ai)
        for (double bv : bj) dest[idx++] += av * bv;
    }
  }
  return out;
}

TruncatedTensor log_signature(const TruncatedTensor& sig) {
  if (sig.level0 != 1.0) throw UsageError("log_signature: level-0 coefficient must be 1");
  const std::size_t M = sig.depth;
  TruncatedTensor x = sig;  // x = sig - I
  x.level0 = 0.0;
  TruncatedTensor acc = TruncatedTensor::zero(sig.ambient_dim, M);
  TruncatedTensor power = x;
  double sign = 1.0;
  // x has zero scalar grade, so x^(x)m vanishes below level m: the series
  // terminates at m = M.
  for (std::size_t m = 1; m <= M; ++m) {
    const double coeff = sign / static_cast<double>(m);
    for (std::size_t k = 1; k <= M; ++k)
      for (std::size_t i = 0; i < acc.levels[k - 1].size(); ++i)
        acc.levels[k - 1][i] += coeff * power.levels[k - 1][i];
    if (m < M) power = chen_concat(power, x);
    sign = -sign;
  }
  return acc;
}

TruncatedTensor exp_tensor(const TruncatedTensor& x) {
  if (x.level0 != 0.0) throw UsageError("exp_tensor: level-0 coefficient must be 0");
  const std::size_t M = x.depth;
  TruncatedTensor acc = TruncatedTensor::identity(x.ambient_dim, M);
  TruncatedTensor power = x;
  double factorial = 1.0;
  for (std::size_t m = 1; m <= M; ++m) {
    factorial *= static_cast<double>(m);
    const double coeff = 1.0 / factorial;
    for (std::size_t k = 1; k <= M; ++k)
      for (std::size_t i = 0; i < acc.levels[k - 1].size(); ++i)
        acc.levels[k - 1][i] += coeff * power.levels[k - 1][i];
    if (m < M) power = chen_concat(power, x);
  }
  return acc;
}

void flatten_signature(const TruncatedTensor& sig, std::span<double> out) {
  if (out.size() != flat_sig_len(sig.ambient_dim, sig.depth))
    throw UsageError("flatten_signature: wrong output length");
  std::size_t idx = 0;
  out[idx++] = sig.level0;
  for (const auto& level : sig.levels)
    for (double v : level) out[idx++] = v;
}

void flatten_log_signature(const TruncatedTensor& logsig, std::span<double> out) {
  if (out.size() != flat_logsig_len(logsig.ambient_dim, logsig.depth))
    throw UsageError("flatten_log_signature: wrong output length");
  std::size_t idx = 0;
  for (const auto& level : logsig.levels)
    for (double v : level) out[idx++] = v;
}

TruncatedTensor path_signature(const AugPath& path, std::size_t depth) {
  if (path.nodes() == 0) throw DataError("path_signature: empty path");
  if (path.values.size() != path.nodes() * path.value_dim)
    throw DataError("path_signature: values size does not match nodes x dim");
  SigStream stream(path.value_dim, depth, path.augmented);
  stream.start(path.times[0], std::span<const double>(path.values.data(), path.value_dim));
  for (std::size_t i = 1; i < path.nodes(); ++i) {
    if (!(path.times[i] > path.times[i - 1]))
      throw DataError("path_signature: times must be strictly increasing at node " +
                      std::to_string(i));
    stream.extend(path.times[i],
                  std::span<const double>(path.values.data() + i * path.value_dim,
                                          path.value_dim));
  }
  return stream.current();
}

SigStream::SigStream(std::size_t value_dim, std::size_t depth, bool augmented)
    : value_dim_(value_dim),
      depth_(depth),
      augmented_(augmented),
      sig_(TruncatedTensor::identity(augmented ? value_dim + 1 : value_dim, depth)) {
  delta_.resize(augmented ? value_dim + 1 : value_dim);
}

void SigStream::start(double t0, std::span<const double> x0) {
  if (x0.size() != value_dim_) throw UsageError("SigStream::start: wrong value dim");
  sig_ = TruncatedTensor::identity(augmented_ ? value_dim_ + 1 : value_dim_, depth_);
  last_t_ = t0;
  last_x_.assign(x0.begin(), x0.end());
  started_ = true;
}

void SigStream::extend(double t1, std::span<const double> x1) {
  if (!started_) throw UsageError("SigStream::extend before start");
  if (x1.size() != value_dim_) throw UsageError("SigStream::extend: wrong value dim");
  if (!(t1 > last_t_)) throw DataError("SigStream::extend: non-increasing time");
  std::size_t off = 0;
  if (augmented_) delta_[off++] = t1 - last_t_;
  for (std::size_t i = 0; i < value_dim_; ++i) delta_[off + i] = x1[i] - last_x_[i];
  sig_ = chen_concat(sig_, segment_signature(delta_, depth_));
  last_t_ = t1;
  last_x_.assign(x1.begin(), x1.end());
}

}  // namespace mfsig::sig
