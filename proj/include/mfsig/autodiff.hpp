#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <vector>

#include "mfsig/tensor.hpp"

namespace mfsig::nn {

// Handle into a Tape. Invalid by default.
struct Value {
  std::uint32_t idx = std::numeric_limits<std::uint32_t>::max();
  bool valid() const { return idx != std::numeric_limits<std::uint32_t>::max(); }
};

enum class Op : std::uint8_t {
  Constant,
  Leaf,         // trainable parameter; gradient retained
  MatmulNT,     // [B x in] * [out x in]^T -> [B x out]
  Matmul,       // [m x k] * [k x n] -> [m x n]
  AddBias,      // [B x n] + [n] broadcast over rows
  Add,
  Sub,
  Mul,          // elementwise
  Scale,        // x * scalar
  AddScalar,    // x + scalar
  Tanh,
  Silu,
  Exp,
  Sqrt,
  Sin,
  Cos,
  Square,
  SumAll,       // -> [1 x 1]
  MeanAll,      // -> [1 x 1]
  SumCols,      // [B x n] -> [B x 1]
  TileCols,     // [B x 1] -> [B x n]
  Concat2,      // along columns
  SliceCols,    // columns [begin, begin+len)
  MatVec,       // rows of z as [d x q] matrices times per-row vector w: out[b,i] = sum_j z[b,i*q+j] w[b,j]
  BroadcastRows // [1 x n] -> [B x n]
};

// Reverse-mode tape over 2-D tensors. Rebuilt per forward pass; backward()
// fills gradients for every node that (transitively) depends on a Leaf.
class Tape {
 public:
  Value constant(Tensor t);
  Value leaf(Tensor t);

  const Tensor& value(Value v) const { return nodes_[v.idx].val; }
  const Tensor& grad(Value v) const;
  bool has_grad(Value v) const;

  // Backpropagates from a scalar loss ([1 x 1]).
  void backward(Value loss);

  std::size_t size() const { return nodes_.size(); }
  void reserve(std::size_t n) { nodes_.reserve(n); }

  friend Value matmul_nt(Tape&, Value, Value);
  friend Value matmul(Tape&, Value, Value);
  friend Value add_bias(Tape&, Value, Value);
  friend Value add(Tape&, Value, Value);
  friend Value sub(Tape&, Value, Value);
  friend Value mul(Tape&, Value, Value);
  friend Value scale(Tape&, Value, double);
  friend Value add_scalar(Tape&, Value, double);
  friend Value tanh_v(Tape&, Value);
  friend Value silu_v(Tape&, Value);
  friend Value exp_v(Tape&, Value);
  friend Value sqrt_v(Tape&, Value);
  friend Value sin_v(Tape&, Value);
  friend Value cos_v(Tape&, Value);
  friend Value square_v(Tape&, Value);
  friend Value sum_all(Tape&, Value);
  friend Value mean_all(Tape&, Value);
  friend Value sum_cols(Tape&, Value);
  friend Value tile_cols(Tape&, Value, std::size_t);
  friend Value concat_cols(Tape&, Value, Value);
  friend Value slice_cols(Tape&, Value, std::size_t, std::size_t);
  friend Value matvec(Tape&, Value, Value, std::size_t, std::size_t);
  friend Value broadcast_rows(Tape&, Value, std::size_t);

 private:
  struct Node {
    Op op;
    bool requires_grad = false;
    Value in0, in1;
    std::size_t meta0 = 0, meta1 = 0;  // slice bounds, matvec dims, ...
    double scalar = 0.0;
    Tensor val;
    Tensor grad;  // allocated on demand during backward
  };

  Value push(Node n);
  Tensor& grad_buf(Value v);
  void backward_node(std::uint32_t i);

  std::vector<Node> nodes_;
};

Value matmul_nt(Tape&, Value x, Value w);
Value matmul(Tape&, Value a, Value b);
Value add_bias(Tape&, Value x, Value bias);
Value add(Tape&, Value a, Value b);
Value sub(Tape&, Value a, Value b);
Value mul(Tape&, Value a, Value b);
Value scale(Tape&, Value x, double c);
Value add_scalar(Tape&, Value x, double c);
Value tanh_v(Tape&, Value x);
Value silu_v(Tape&, Value x);
Value exp_v(Tape&, Value x);
Value sqrt_v(Tape&, Value x);
Value sin_v(Tape&, Value x);
Value cos_v(Tape&, Value x);
Value square_v(Tape&, Value x);
Value sum_all(Tape&, Value x);
Value mean_all(Tape&, Value x);
Value sum_cols(Tape&, Value x);
Value tile_cols(Tape&, Value x, std::size_t n);
Value concat_cols(Tape&, Value a, Value b);
Value slice_cols(Tape&, Value x, std::size_t begin, std::size_t len);
Value matvec(Tape&, Value z, Value w, std::size_t d, std::size_t q);
Value broadcast_rows(Tape&, Value x, std::size_t n);

}  // namespace mfsig::nn
