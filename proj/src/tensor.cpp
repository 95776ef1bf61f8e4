#include "mfsig/tensor.hpp"

#include <cmath>
#include <numeric>

#include "mfsig/errors.hpp"

namespace mfsig::nn {

namespace {
std::size_t shape_numel(const std::vector<std::size_t>& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return s.empty() ? 0 : n;
}
}  // namespace

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != data.size())
    throw UsageError("tensor: shape does not match data length");
}

Tensor Tensor::zeros(std::vector<std::size_t> s) {
  Tensor t;
  t.shape = std::move(s);
  t.data.assign(shape_numel(t.shape), 0.0);
  return t;
}

Tensor Tensor::full(std::vector<std::size_t> s, double v) {
  Tensor t = zeros(std::move(s));
  t.fill(v);
  return t;
}

Tensor Tensor::scalar(double v) { return Tensor({1, 1}, {v}); }

Tensor Tensor::row(std::vector<double> v) {
  std::size_t n = v.size();
  return Tensor({1, n}, std::move(v));
}

Tensor Tensor::matrix(std::size_t r, std::size_t c, std::vector<double> v) {
  return Tensor({r, c}, std::move(v));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t = zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

bool Tensor::same_shape(const Tensor& o) const {
  return rows() == o.rows() && cols() == o.cols();
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

}  // namespace mfsig::nn
