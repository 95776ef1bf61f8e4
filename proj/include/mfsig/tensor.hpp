#pragma once

#include <cstddef>
#include <vector>

namespace mfsig::nn {

// Dense row-major tensor of doubles. Rank 1 ([n]) or rank 2 ([rows x cols]);
// rank-1 tensors behave as a single row where a 2-D view is needed.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d);

  static Tensor zeros(std::vector<std::size_t> s);
  static Tensor full(std::vector<std::size_t> s, double v);
  static Tensor scalar(double v);                      // [1 x 1]
  static Tensor row(std::vector<double> v);            // [1 x n]
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v);
  static Tensor identity(std::size_t n);               // [n x n]

  std::size_t numel() const { return data.size(); }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

  double& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

  bool same_shape(const Tensor& o) const;
  bool all_finite() const;
  void fill(double v);
};

}  // namespace mfsig::nn
