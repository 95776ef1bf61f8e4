#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace mfsig::sig {

// Graded element of the truncated tensor algebra over R^n up to depth M.
// level0 is the scalar grade (1 for signatures, 0 for log-signatures);
// levels[k-1] holds the n^k coefficients of grade k in row-major order
// (index of (i_1,...,i_k) is i_1*n^{k-1} + ... + i_k).
struct TruncatedTensor {
  std::size_t ambient_dim = 0;
  std::size_t depth = 0;
  double level0 = 1.0;
  std::vector<std::vector<double>> levels;

  static TruncatedTensor identity(std::size_t n, std::size_t depth);  // (1, 0, 0, ...)
  static TruncatedTensor zero(std::size_t n, std::size_t depth);      // (0, 0, 0, ...)

  std::size_t level_size(std::size_t k) const;  // n^k
  bool same_shape(const TruncatedTensor& o) const;
};

// Flattened length of a depth-M signature over R^n including the leading 1:
// (n^{M+1} - 1) / (n - 1), or M+1 when n == 1.
std::size_t flat_sig_len(std::size_t n, std::size_t depth);
// Log-signatures drop the scalar grade.
std::size_t flat_logsig_len(std::size_t n, std::size_t depth);

// Dimension of the depth-M signature of the time-augmented path of a
// q-dimensional process: ((q+1)^{M+1} - 1) / q.
std::size_t sig_dim(std::size_t q, std::size_t depth);

// Signature of a single linear segment with increment `delta`:
// level k = delta^{(x)k} / k!.
TruncatedTensor segment_signature(std::span<const double> delta, std::size_t depth);

// Truncated tensor product (Chen's identity for concatenated paths):
// level k of the result = sum_{i+j=k} a_i (x) b_j.
TruncatedTensor chen_concat(const TruncatedTensor& a, const TruncatedTensor& b);

// Tensor logarithm of a group-like element (level0 == 1):
// log(s) = sum_{m>=1} (-1)^{m+1}/m (s - I)^{(x)m}, truncated at depth.
TruncatedTensor log_signature(const TruncatedTensor& sig);

// Tensor exponential of a Lie-like element (level0 == 0).
TruncatedTensor exp_tensor(const TruncatedTensor& x);

// Flattening for feature vectors: level-major, row-major within each level.
// Signatures include the leading constant 1; log-signatures do not.
void flatten_signature(const TruncatedTensor& sig, std::span<double> out);
void flatten_log_signature(const TruncatedTensor& logsig, std::span<double> out);

// A sampled path on a strictly increasing time grid. When `augmented` is set
// the effective node value is (t_i, values row i), of dimension q+1.
struct AugPath {
  std::vector<double> times;
  std::vector<double> values;  // row-major [node x q]
  std::size_t value_dim = 0;
  bool augmented = true;

  std::size_t nodes() const { return times.size(); }
  std::size_t effective_dim() const { return augmented ? value_dim + 1 : value_dim; }
};

// Signature of the piecewise-linear interpolation of the path.
// A single-node path yields the identity tensor.
TruncatedTensor path_signature(const AugPath& path, std::size_t depth);

// Streaming evaluation: extending by one node costs one segment exponential
// plus one Chen product, so a prefix sweep is linear in the node count.
class SigStream {
 public:
  SigStream(std::size_t value_dim, std::size_t depth, bool augmented);

  void start(double t0, std::span<const double> x0);
  void extend(double t1, std::span<const double> x1);
  const TruncatedTensor& current() const { return sig_; }
  bool started() const { return started_; }

 private:
  std::size_t value_dim_, depth_;
  bool augmented_;
  bool started_ = false;
  double last_t_ = 0.0;
  std::vector<double> last_x_;
  std::vector<double> delta_;
  TruncatedTensor sig_;
};

}  // namespace mfsig::sig
