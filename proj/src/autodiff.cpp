#include "mfsig/autodiff.hpp"

#include <Eigen/Core>

#include <cmath>
#include <string>

#include "mfsig/errors.hpp"

namespace mfsig::nn {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapC = Eigen::Map<const EMat>;

MapC cmap(const Tensor& t) { return MapC(t.data.data(), t.rows(), t.cols()); }
MapM mmap(Tensor& t) { return MapM(t.data.data(), t.rows(), t.cols()); }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
  throw UsageError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                   std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                   std::to_string(b.cols()) + ")");
}

}  // namespace

Value Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Value{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Value Tape::constant(Tensor t) {
  Node n;
  n.op = Op::Constant;
  n.val = std::move(t);
  return push(std::move(n));
}

Value Tape::leaf(Tensor t) {
  Node n;
  n.op = Op::Leaf;
  n.requires_grad = true;
  n.val = std::move(t);
  return push(std::move(n));
}

bool Tape::has_grad(Value v) const {
  return v.valid() && nodes_[v.idx].grad.numel() == nodes_[v.idx].val.numel() &&
         nodes_[v.idx].val.numel() > 0;
}

const Tensor& Tape::grad(Value v) const {
  if (!has_grad(v)) throw UsageError("tape: gradient not available for this value");
  return nodes_[v.idx].grad;
}

Tensor& Tape::grad_buf(Value v) {
  Node& n = nodes_[v.idx];
  if (n.grad.numel() != n.val.numel()) {
    n.grad.shape = n.val.shape;
    n.grad.data.assign(n.val.data.size(), 0.0);
  }
  return n.grad;
}

void Tape::backward(Value loss) {
  if (!loss.valid() || loss.idx >= nodes_.size())
    throw UsageError("backward: invalid loss handle");
  if (nodes_[loss.idx].val.numel() != 1)
    throw UsageError("backward: loss must be a scalar");
  grad_buf(loss).data[0] = 1.0;
  for (std::uint32_t i = loss.idx + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.numel() != n.val.numel()) continue;
    backward_node(i);
  }
}

void Tape::backward_node(std::uint32_t i) {
  Node& n = nodes_[i];
  const Tensor& g = n.grad;
  auto want = [&](Value v) { return v.valid() && nodes_[v.idx].requires_grad; };

  switch (n.op) {
    case Op::Constant:
    case Op::Leaf:
      break;
    case Op::MatmulNT: {
      // y = x * W^T : dx = g * W ; dW = g^T * x
      const Tensor& x = nodes_[n.in0.idx].val;
      const Tensor& w = nodes_[n.in1.idx].val;
      if (want(n.in0)) mmap(grad_buf(n.in0)).noalias() += cmap(g) * cmap(w);
      if (want(n.in1)) mmap(grad_buf(n.in1)).noalias() += cmap(g).transpose() * cmap(x);
      break;
    }
    case Op::Matmul: {
      // y = a * b : da = g * b^T ; db = a^T * g
      const Tensor& a = nodes_[n.in0.idx].val;
      const Tensor& b = nodes_[n.in1.idx].val;
      if (want(n.in0)) mmap(grad_buf(n.in0)).noalias() += cmap(g) * cmap(b).transpose();
      if (want(n.in1)) mmap(grad_buf(n.in1)).noalias() += cmap(a).transpose() * cmap(g);
      break;
    }
    case Op::AddBias: {
      if (want(n.in0)) {
        Tensor& gx = grad_buf(n.in0);
        for (std::size_t k = 0; k < gx.data.size(); ++k) gx.data[k] += g.data[k];
      }
      if (want(n.in1)) {
        Tensor& gb = grad_buf(n.in1);
        const std::size_t c = n.val.cols();
        for (std::size_t r = 0; r < n.val.rows(); ++r)
          for (std::size_t j = 0; j < c; ++j) gb.data[j] += g.data[r * c + j];
      }
      break;
    }
    case Op::Add: {
      for (Value v : {n.in0, n.in1})
        if (want(v)) {
          Tensor& gi = grad_buf(v);
          for (std::size_t k = 0; k < gi.data.size(); ++k) gi.data[k] += g.data[k];
        }
      break;
    }
    case Op::Sub: {
      if (want(n.in0)) {
        Tensor& ga = grad_buf(n.in0);
        for (std::size_t k = 0; k < ga.data.size(); ++k) ga.data[k] += g.data[k];
      }
      if (want(n.in1)) {
        Tensor& gb = grad_buf(n.in1);
        for (std::size_t k = 0; k < gb.data.size(); ++k) gb.data[k] -= g.data[k];
      }
      break;
    }
    case Op::Mul: {
      const Tensor& a = nodes_[n.in0.idx].val;
      const Tensor& b = nodes_[n.in1.idx].val;
      if (want(n.in0)) {
        Tensor& ga = grad_buf(n.in0);
        for (std::size_t k = 0; k < ga.data.size(); ++k) ga.data[k] += g.data[k] * b.data[k];
      }
      if (want(n.in1)) {
        Tensor& gb = grad_buf(n.in1);
        for (std::size_t k = 0; k < gb.data.size(); ++k) gb.data[k] += g.data[k] * a.data[k];
      }
      break;
    }
    case Op::Scale: {
      if (want(n.in0)) {
        Tensor& gx = grad_buf(n.in0);
        for (std::size_t k = 0; k < gx.data.size(); ++k) gx.data[k] += g.data[k] * n.scalar;
      }
      break;
    }
    case Op::AddScalar: {
      if (want(n.in0)) {
        Tensor& gx = grad_buf(n.in0);
        for (std::size_t k = 0; k < gx.data.size(); ++k) gx.data[k] += g.data[k];
      }
      break;
    }
    case Op::Tanh: {
      if (want(n.in0)) {
        Tensor& gx = grad_buf(n.in0);
        const Tensor& y = n.val;
        for (std::size_t k = 0; k < gx.data.size(); ++k)
          gx.data[k] += g.data[k] * (1.0 - y.data[k] * y.data[k]);
      }
      break;
    }
    case Op::Silu: {
      if (want(n.in0)) {
        Tensor& gx = grad_buf(n.in0);
        const Tensor& x = nodes_[n.in0.idx].val;
        for (std::size_t k = 0; k < gx.data.size(); ++k) {
          const double s = sigmoid(x.data[k]);
          gx.data[k] += g.data[k] * s * (1.0 + x.data[k] * (1.0 - s));
        }
      }
      break;
    }
    case Op::Exp: {
      if (want(n.in0)) {
        Tensor& gx = grad_buf(n.in0);
        for (std::size_t k = 0; k < gx.data.size(); ++k) gx.data[k] += g.data[k] * n.val.data[k];
      }
      break;
    }
    case Op::Sqrt: {
      if (want(n.in0)) {
        Tensor& gx = grad_buf(n.in0);
        for (std::size_t k = 0; k < gx.data.size(); ++k)
          gx.data[k] += g.data[k] * 0.5 / n.val.data[k];
      }
      break;
    }
    case Op::Sin: {
      if (want(n.in0)) {
        Tensor& gx = grad_buf(n.in0);
        const Tensor& x = nodes_[n.in0.idx].val;
        for (std::size_t k = 0; k < gx.data.size(); ++k)
          gx.data[k] += g.data[k] * std::cos(x.data[k]);
      }
      break;
    }
    case Op::Cos: {
      if (want(n.in0)) {
        Tensor& gx = grad_buf(n.in0);
        const Tensor& x = nodes_[n.in0.idx].val;
        for (std::size_t k = 0; k < gx.data.size(); ++k)
          gx.data[k] -= g.data[k] * std::sin(x.data[k]);
      }
      break;
    }
    case Op::Square: {
      if (want(n.in0)) {
        Tensor& gx = grad_buf(n.in0);
        const Tensor& x = nodes_[n.in0.idx].val;
        for (std::size_t k = 0; k < gx.data.size(); ++k)
          gx.data[k] += g.data[k] * 2.0 * x.data[k];
      }
      break;
    }
    case Op::SumAll: {
      if (want(n.in0)) {
        Tensor& gx = grad_buf(n.in0);
        for (double& v : gx.data) v += g.data[0];
      }
      break;
    }
    case Op::MeanAll: {
      if (want(n.in0)) {
        Tensor& gx = grad_buf(n.in0);
        const double s = g.data[0] / static_cast<double>(gx.data.size());
        for (double& v : gx.data) v += s;
      }
      break;
    }
    case Op::SumCols: {
      if (want(n.in0)) {
        Tensor& gx = grad_buf(n.in0);
        const std::size_t c = gx.cols();
        for (std::size_t r = 0; r < gx.rows(); ++r)
          for (std::size_t j = 0; j < c; ++j) gx.data[r * c + j] += g.data[r];
      }
      break;
    }
    case Op::TileCols: {
      if (want(n.in0)) {
        Tensor& gx = grad_buf(n.in0);
        const std::size_t c = n.val.cols();
        for (std::size_t r = 0; r < n.val.rows(); ++r) {
          double s = 0;
          for (std::size_t j = 0; j < c; ++j) s += g.data[r * c + j];
          gx.data[r] += s;
        }
      }
      break;
    }
    case Op::Concat2: {
      const std::size_t ca = nodes_[n.in0.idx].val.cols();
      const std::size_t cb = nodes_[n.in1.idx].val.cols();
      const std::size_t c = ca + cb;
      if (want(n.in0)) {
        Tensor& ga = grad_buf(n.in0);
        for (std::size_t r = 0; r < n.val.rows(); ++r)
          for (std::size_t j = 0; j < ca; ++j) ga.data[r * ca + j] += g.data[r * c + j];
      }
      if (want(n.in1)) {
        Tensor& gb = grad_buf(n.in1);
        for (std::size_t r = 0; r < n.val.rows(); ++r)
          for (std::size_t j = 0; j < cb; ++j) gb.data[r * cb + j] += g.data[r * c + ca + j];
      }
      break;
    }
    case Op::SliceCols: {
      if (want(n.in0)) {
        Tensor& gx = grad_buf(n.in0);
        const std::size_t c = gx.cols(), len = n.meta1, begin = n.meta0;
        for (std::size_t r = 0; r < n.val.rows(); ++r)
          for (std::size_t j = 0; j < len; ++j)
            gx.data[r * c + begin + j] += g.data[r * len + j];
      }
      break;
    }
    case Op::MatVec: {
      const std::size_t d = n.meta0, q = n.meta1;
      const Tensor& z = nodes_[n.in0.idx].val;
      const Tensor& w = nodes_[n.in1.idx].val;
      if (want(n.in0)) {
        Tensor& gz = grad_buf(n.in0);
        for (std::size_t r = 0; r < n.val.rows(); ++r)
          for (std::size_t i2 = 0; i2 < d; ++i2)
            for (std::size_t j = 0; j < q; ++j)
              gz.data[(r * d + i2) * q + j] += g.data[r * d + i2] * w.data[r * q + j];
      }
      if (want(n.in1)) {
        Tensor& gw = grad_buf(n.in1);
        for (std::size_t r = 0; r < n.val.rows(); ++r)
          for (std::size_t i2 = 0; i2 < d; ++i2)
            for (std::size_t j = 0; j < q; ++j)
              gw.data[r * q + j] += g.data[r * d + i2] * z.data[(r * d + i2) * q + j];
      }
      break;
    }
    case Op::BroadcastRows: {
      if (want(n.in0)) {
        Tensor& gx = grad_buf(n.in0);
        const std::size_t c = n.val.cols();
        for (std::size_t r = 0; r < n.val.rows(); ++r)
          for (std::size_t j = 0; j < c; ++j) gx.data[j] += g.data[r * c + j];
      }
      break;
    }
  }
}

// --- op builders -----------------------------------------------------------

#define CHECK_VALID(v, op)                                     \
  if (!(v).valid()) throw UsageError(op ": invalid input value")

Value matmul_nt(Tape& t, Value x, Value w) {
  CHECK_VALID(x, "matmul_nt");
  CHECK_VALID(w, "matmul_nt");
  const Tensor& xv = t.nodes_[x.idx].val;
  const Tensor& wv = t.nodes_[w.idx].val;
  if (xv.cols() != wv.cols()) shape_fail("matmul_nt", xv, wv);
  Tape::Node n;
  n.op = Op::MatmulNT;
  n.in0 = x;
  n.in1 = w;
  n.requires_grad = t.nodes_[x.idx].requires_grad || t.nodes_[w.idx].requires_grad;
  n.val = Tensor::zeros({xv.rows(), wv.rows()});
  mmap(n.val).noalias() = cmap(xv) * cmap(wv).transpose();
  return t.push(std::move(n));
}

Value matmul(Tape& t, Value a, Value b) {
  CHECK_VALID(a, "matmul");
  CHECK_VALID(b, "matmul");
  const Tensor& av = t.nodes_[a.idx].val;
  const Tensor& bv = t.nodes_[b.idx].val;
  if (av.cols() != bv.rows()) shape_fail("matmul", av, bv);
  Tape::Node n;
  n.op = Op::Matmul;
  n.in0 = a;
  n.in1 = b;
  n.requires_grad = t.nodes_[a.idx].requires_grad || t.nodes_[b.idx].requires_grad;
  n.val = Tensor::zeros({av.rows(), bv.cols()});
  mmap(n.val).noalias() = cmap(av) * cmap(bv);
  return t.push(std::move(n));
}

Value add_bias(Tape& t, Value x, Value bias) {
  CHECK_VALID(x, "add_bias");
  CHECK_VALID(bias, "add_bias");
  const Tensor& xv = t.nodes_[x.idx].val;
  const Tensor& bv = t.nodes_[bias.idx].val;
  if (bv.numel() != xv.cols()) shape_fail("add_bias", xv, bv);
  Tape::Node n;
  n.op = Op::AddBias;
  n.in0 = x;
  n.in1 = bias;
  n.requires_grad = t.nodes_[x.idx].requires_grad || t.nodes_[bias.idx].requires_grad;
  n.val = xv;
  const std::size_t c = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t j = 0; j < c; ++j) n.val.data[r * c + j] += bv.data[j];
  return t.push(std::move(n));
}

#define BINARY_IMPL(fname, opname, expr)                                          \
  Value fname(Tape& t, Value a, Value b) {                                        \
    CHECK_VALID(a, #fname);                                                       \
    CHECK_VALID(b, #fname);                                                       \
    const Tensor& av = t.nodes_[a.idx].val;                                       \
    const Tensor& bv = t.nodes_[b.idx].val;                                       \
    if (!av.same_shape(bv)) shape_fail(#fname, av, bv);                           \
    Tape::Node n;                                                                 \
    n.op = opname;                                                                \
    n.in0 = a;                                                                    \
    n.in1 = b;                                                                    \
    n.requires_grad =                                                             \
        t.nodes_[a.idx].requires_grad || t.nodes_[b.idx].requires_grad;           \
    n.val = Tensor::zeros({av.rows(), av.cols()});                                \
    for (std::size_t k = 0; k < n.val.data.size(); ++k)                           \
      n.val.data[k] = expr;                                                       \
    return t.push(std::move(n));                                                  \
  }

BINARY_IMPL(add, Op::Add, av.data[k] + bv.data[k])
BINARY_IMPL(sub, Op::Sub, av.data[k] - bv.data[k])
BINARY_IMPL(mul, Op::Mul, av.data[k] * bv.data[k])

#undef BINARY_IMPL

#define UNARY_IMPL(fname, opname, expr)                                  \
  Value fname(Tape& t, Value x) {                                        \
    CHECK_VALID(x, #fname);                                              \
    const Tensor& xv = t.nodes_[x.idx].val;                              \
    Tape::Node n;                                                        \
    n.op = opname;                                                       \
    n.in0 = x;                                                           \
    n.requires_grad = t.nodes_[x.idx].requires_grad;                     \
    n.val = Tensor::zeros({xv.rows(), xv.cols()});                       \
    for (std::size_t k = 0; k < n.val.data.size(); ++k) {                \
      const double v = xv.data[k];                                       \
      n.val.data[k] = expr;                                              \
    }                                                                    \
    return t.push(std::move(n));                                         \
  }

UNARY_IMPL(tanh_v, Op::Tanh, std::tanh(v))
UNARY_IMPL(silu_v, Op::Silu, v * sigmoid(v))
UNARY_IMPL(exp_v, Op::Exp, std::exp(v))
UNARY_IMPL(sqrt_v, Op::Sqrt, std::sqrt(v))
UNARY_IMPL(sin_v, Op::Sin, std::sin(v))
UNARY_IMPL(cos_v, Op::Cos, std::cos(v))
UNARY_IMPL(square_v, Op::Square, v * v)

#undef UNARY_IMPL

Value scale(Tape& t, Value x, double c) {
  CHECK_VALID(x, "scale");
  const Tensor& xv = t.nodes_[x.idx].val;
  Tape::Node n;
  n.op = Op::Scale;
  n.in0 = x;
  n.scalar = c;
  n.requires_grad = t.nodes_[x.idx].requires_grad;
  n.val = Tensor::zeros({xv.rows(), xv.cols()});
  for (std::size_t k = 0; k < n.val.data.size(); ++k) n.val.data[k] = xv.data[k] * c;
  return t.push(std::move(n));
}

Value add_scalar(Tape& t, Value x, double c) {
  CHECK_VALID(x, "add_scalar");
  const Tensor& xv = t.nodes_[x.idx].val;
  Tape::Node n;
  n.op = Op::AddScalar;
  n.in0 = x;
  n.scalar = c;
  n.requires_grad = t.nodes_[x.idx].requires_grad;
  n.val = Tensor::zeros({xv.rows(), xv.cols()});
  for (std::size_t k = 0; k < n.val.data.size(); ++k) n.val.data[k] = xv.data[k] + c;
  return t.push(std::move(n));
}

Value sum_all(Tape& t, Value x) {
  CHECK_VALID(x, "sum_all");
  const Tensor& xv = t.nodes_[x.idx].val;
  double s = 0;
  for (double v : xv.data) s += v;
  Tape::Node n;
  n.op = Op::SumAll;
  n.in0 = x;
  n.requires_grad = t.nodes_[x.idx].requires_grad;
  n.val = Tensor::scalar(s);
  return t.push(std::move(n));
}

Value mean_all(Tape& t, Value x) {
  CHECK_VALID(x, "mean_all");
  const Tensor& xv = t.nodes_[x.idx].val;
  double s = 0;
  for (double v : xv.data) s += v;
  Tape::Node n;
  n.op = Op::MeanAll;
  n.in0 = x;
  n.requires_grad = t.nodes_[x.idx].requires_grad;
  n.val = Tensor::scalar(s / static_cast<double>(xv.numel()));
  return t.push(std::move(n));
}

Value sum_cols(Tape& t, Value x) {
  CHECK_VALID(x, "sum_cols");
  const Tensor& xv = t.nodes_[x.idx].val;
  Tape::Node n;
  n.op = Op::SumCols;
  n.in0 = x;
  n.requires_grad = t.nodes_[x.idx].requires_grad;
  n.val = Tensor::zeros({xv.rows(), 1});
  const std::size_t c = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += xv.data[r * c + j];
    n.val.data[r] = s;
  }
  return t.push(std::move(n));
}

Value tile_cols(Tape& t, Value x, std::size_t ncols) {
  CHECK_VALID(x, "tile_cols");
  const Tensor& xv = t.nodes_[x.idx].val;
  if (xv.cols() != 1) throw UsageError("tile_cols: input must have one column");
  Tape::Node n;
  n.op = Op::TileCols;
  n.in0 = x;
  n.meta0 = ncols;
  n.requires_grad = t.nodes_[x.idx].requires_grad;
  n.val = Tensor::zeros({xv.rows(), ncols});
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t j = 0; j < ncols; ++j) n.val.data[r * ncols + j] = xv.data[r];
  return t.push(std::move(n));
}

Value concat_cols(Tape& t, Value a, Value b) {
  CHECK_VALID(a, "concat_cols");
  CHECK_VALID(b, "concat_cols");
  const Tensor& av = t.nodes_[a.idx].val;
  const Tensor& bv = t.nodes_[b.idx].val;
  if (av.rows() != bv.rows()) shape_fail("concat_cols", av, bv);
  Tape::Node n;
  n.op = Op::Concat2;
  n.in0 = a;
  n.in1 = b;
  n.requires_grad = t.nodes_[a.idx].requires_grad || t.nodes_[b.idx].requires_grad;
  const std::size_t ca = av.cols(), cb = bv.cols();
  n.val = Tensor::zeros({av.rows(), ca + cb});
  for (std::size_t r = 0; r < av.rows(); ++r) {
    for (std::size_t j = 0; j < ca; ++j) n.val.data[r * (ca + cb) + j] = av.data[r * ca + j];
    for (std::size_t j = 0; j < cb; ++j) n.val.data[r * (ca + cb) + ca + j] = bv.data[r * cb + j];
  }
  return t.push(std::move(n));
}

Value slice_cols(Tape& t, Value x, std::size_t begin, std::size_t len) {
  CHECK_VALID(x, "slice_cols");
  const Tensor& xv = t.nodes_[x.idx].val;
  if (begin + len > xv.cols()) throw UsageError("slice_cols: out of range");
  Tape::Node n;
  n.op = Op::SliceCols;
  n.in0 = x;
  n.meta0 = begin;
  n.meta1 = len;
  n.requires_grad = t.nodes_[x.idx].requires_grad;
  n.val = Tensor::zeros({xv.rows(), len});
  const std::size_t c = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t j = 0; j < len; ++j) n.val.data[r * len + j] = xv.data[r * c + begin + j];
  return t.push(std::move(n));
}

Value matvec(Tape& t, Value z, Value w, std::size_t d, std::size_t q) {
  CHECK_VALID(z, "matvec");
  CHECK_VALID(w, "matvec");
  const Tensor& zv = t.nodes_[z.idx].val;
  const Tensor& wv = t.nodes_[w.idx].val;
  if (zv.cols() != d * q || wv.cols() != q || zv.rows() != wv.rows())
    shape_fail("matvec", zv, wv);
  Tape::Node n;
  n.op = Op::MatVec;
  n.in0 = z;
  n.in1 = w;
  n.meta0 = d;
  n.meta1 = q;
  n.requires_grad = t.nodes_[z.idx].requires_grad || t.nodes_[w.idx].requires_grad;
  n.val = Tensor::zeros({zv.rows(), d});
  for (std::size_t r = 0; r < zv.rows(); ++r)
    for (std::size_t i = 0; i < d; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < q; ++j)
        s += zv.data[(r * d + i) * q + j] * wv.data[r * q + j];
      n.val.data[r * d + i] = s;
    }
  return t.push(std::move(n));
}

Value broadcast_rows(Tape& t, Value x, std::size_t nrows) {
  CHECK_VALID(x, "broadcast_rows");
  const Tensor& xv = t.nodes_[x.idx].val;
  if (xv.rows() != 1) throw UsageError("broadcast_rows: input must have one row");
  Tape::Node n;
  n.op = Op::BroadcastRows;
  n.in0 = x;
  n.requires_grad = t.nodes_[x.idx].requires_grad;
  const std::size_t c = xv.cols();
  n.val = Tensor::zeros({nrows, c});
  for (std::size_t r = 0; r < nrows; ++r)
    for (std::size_t j = 0; j < c; ++j) n.val.data[r * c + j] = xv.data[j];
  return t.push(std::move(n));
}

#undef CHECK_VALID

}  // namespace mfsig::nn
