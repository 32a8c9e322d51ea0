#pragma once

#include <cblas.h>

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "slimtrack/tensor.hpp"

namespace slimtrack {

// Thin wrappers around BLAS dgemm. C [m,n] = alpha*op(A)*op(B) + beta*C.
inline void gemm_nn(int64_t m, int64_t n, int64_t k, const double* A, const double* B, double* C,
                    double beta = 0.0, double alpha = 1.0) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (beta == 0.0)
      for (int64_t i = 0; i < m * n; ++i) C[i] = 0.0;
    return;
  }
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, int(m), int(n), int(k), alpha, A, int(k),
              B, int(n), beta, C, int(n));
}
inline void gemm_nt(int64_t m, int64_t n, int64_t k, const double* A, const double* B, double* C,
                    double beta = 0.0, double alpha = 1.0) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (beta == 0.0)
      for (int64_t i = 0; i < m * n; ++i) C[i] = 0.0;
    return;
  }
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, int(m), int(n), int(k), alpha, A, int(k), B,
              int(k), beta, C, int(n));
}
inline void gemm_tn(int64_t m, int64_t n, int64_t k, const double* A, const double* B, double* C,
                    double beta = 0.0, double alpha = 1.0) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (beta == 0.0)
      for (int64_t i = 0; i < m * n; ++i) C[i] = 0.0;
    return;
  }
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(m), int(n), int(k), alpha, A, int(m), B,
              int(n), beta, C, int(n));
}

// One recorded operation result. Gradients accumulate additively into
// parents when the tape replays backward.
struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily by Tape::backward
  bool requires_grad = false;
  std::string op;
  std::function<void(Node&)> backward;

  bool grad_ready() const { return grad.numel() == value.numel(); }
};

using Value = std::shared_ptr<Node>;

inline void accumulate(Node& target, int64_t idx, double v) {
  if (target.requires_grad) target.grad.data[size_t(idx)] += v;
}

// Execution-ordered record of operations; replaying it in reverse drives
// reverse-mode differentiation.
class Tape {
 public:
  Value leaf(Tensor t, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = requires_grad;
    n->op = "leaf";
    nodes_.push_back(n);
    return n;
  }

  Value record(Tensor out, bool requires_grad, std::string op,
               std::function<void(Node&)> backward) {
    if (!out.all_finite())
      throw NumericError("non-finite value produced by op '" + op + "'");
    auto n = std::make_shared<Node>();
    n->value = std::move(out);
    n->requires_grad = requires_grad;
    n->op = std::move(op);
    n->backward = std::move(backward);
    nodes_.push_back(n);
    return n;
  }

  // Seeds d(loss)/d(loss)=1 and walks the tape in reverse execution order.
  void backward(const Value& loss) {
    if (consumed_) throw NumericError("tape already consumed by a previous backward");
    if (loss->value.numel() != 1)
      throw ShapeError("backward: loss must be scalar, got " + shape_str(loss->value.shape));
    consumed_ = true;
    for (auto& n : nodes_)
      if (n->requires_grad) n->grad = Tensor::zeros(n->value.shape);
    if (!loss->requires_grad) return;
    loss->grad.data[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node& n = **it;
      if (n.requires_grad && n.backward) n.backward(n);
    }
  }

  bool consumed() const { return consumed_; }
  size_t size() const { return nodes_.size(); }

 private:
  std::vector<Value> nodes_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

inline Value add(Tape& t, Value a, Value b) {
  require_same_shape(a->value, b->value, "add");
  Tensor out = a->value;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b->value.data[i];
  bool rg = a->requires_grad || b->requires_grad;
  return t.record(std::move(out), rg, "add", [a, b](Node& self) {
    for (int64_t i = 0; i < self.value.numel(); ++i) {
      accumulate(*a, i, self.grad[i]);
      accumulate(*b, i, self.grad[i]);
    }
  });
}

inline Value scalar_mul(Tape& t, Value a, double c) {
  Tensor out = a->value;
  for (double& v : out.data) v *= c;
  return t.record(std::move(out), a->requires_grad, "scalar_mul", [a, c](Node& self) {
    for (int64_t i = 0; i < self.value.numel(); ++i) accumulate(*a, i, c * self.grad[i]);
  });
}

inline Value mul(Tape& t, Value a, Value b) {
  require_same_shape(a->value, b->value, "mul");
  Tensor out = a->value;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b->value.data[i];
  bool rg = a->requires_grad || b->requires_grad;
  return t.record(std::move(out), rg, "mul", [a, b](Node& self) {
    for (int64_t i = 0; i < self.value.numel(); ++i) {
      accumulate(*a, i, b->value[i] * self.grad[i]);
      accumulate(*b, i, a->value[i] * self.grad[i]);
    }
  });
}

// out = a * s where s is a scalar (1-element) tensor value.
inline Value scale_by(Tape& t, Value a, Value s) {
  if (s->value.numel() != 1) throw ShapeError("scale_by: scale must be scalar");
  double sv = s->value[0];
  Tensor out = a->value;
  for (double& v : out.data) v *= sv;
  bool rg = a->requires_grad || s->requires_grad;
  return t.record(std::move(out), rg, "scale_by", [a, s, sv](Node& self) {
    double ds = 0.0;
    for (int64_t i = 0; i < self.value.numel(); ++i) {
      accumulate(*a, i, sv * self.grad[i]);
      ds += a->value[i] * self.grad[i];
    }
    accumulate(*s, 0, ds);
  });
}

// Broadcast multiply over the last axis: x[..., D] * m[D].
inline Value mul_lastdim(Tape& t, Value x, Value m) {
  int64_t d = x->value.shape.back();
  if (m->value.rank() != 1 || m->value.numel() != d)
    throw ShapeError("mul_lastdim: mask length " + std::to_string(m->value.numel()) +
                     " != last axis " + std::to_string(d));
  int64_t rows = x->value.numel() / d;
  Tensor out = x->value;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < d; ++j) out.data[size_t(r * d + j)] *= m->value[j];
  bool rg = x->requires_grad || m->requires_grad;
  return t.record(std::move(out), rg, "mul_lastdim", [x, m, rows, d](Node& self) {
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < d; ++j) {
        int64_t i = r * d + j;
        accumulate(*x, i, m->value[j] * self.grad[i]);
        accumulate(*m, j, x->value[i] * self.grad[i]);
      }
  });
}

inline Value relu(Tape& t, Value x) {
  Tensor out = x->value;
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return t.record(std::move(out), x->requires_grad, "relu", [x](Node& self) {
    for (int64_t i = 0; i < self.value.numel(); ++i)
      if (x->value[i] > 0.0) accumulate(*x, i, self.grad[i]);
  });
}

inline Value gelu(Tape& t, Value x) {
  static const double inv_sqrt2 = 0.70710678118654752440;
  static const double inv_sqrt2pi = 0.39894228040143267794;
  Tensor out = x->value;
  for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  return t.record(std::move(out), x->requires_grad, "gelu", [x](Node& self) {
    for (int64_t i = 0; i < self.value.numel(); ++i) {
      double v = x->value[i];
      double phi = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      double d = phi + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
      accumulate(*x, i, d * self.grad[i]);
    }
  });
}

inline Value softmax_lastdim(Tape& t, Value x) {
  int64_t d = x->value.shape.back();
  if (d == 0) throw ShapeError("softmax: empty last axis");
  int64_t rows = x->value.numel() / d;
  Tensor out = x->value;
  for (int64_t r = 0; r < rows; ++r) {
    double* row = out.data.data() + r * d;
    double mx = row[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (int64_t j = 0; j < d; ++j) row[j] /= s;
  }
  return t.record(std::move(out), x->requires_grad, "softmax", [x, rows, d](Node& self) {
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = self.value.data.data() + r * d;
      const double* go = self.grad.data.data() + r * d;
      double dot = 0.0;
      for (int64_t j = 0; j < d; ++j) dot += go[j] * y[j];
      for (int64_t j = 0; j < d; ++j) accumulate(*x, r * d + j, y[j] * (go[j] - dot));
    }
  });
}

inline Value layer_norm(Tape& t, Value x, Value gamma, Value beta, double eps = 1e-5) {
  int64_t d = x->value.shape.back();
  if (gamma->value.numel() != d || beta->value.numel() != d)
    throw ShapeError("layer_norm: affine length mismatch on last axis");
  int64_t rows = x->value.numel() / d;
  Tensor out = x->value;
  std::vector<double> mu(size_t(rows), 0.0);
  std::vector<double> istd(size_t(rows), 0.0);
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = x->value.data.data() + r * d;
    double m = 0.0;
    for (int64_t j = 0; j < d; ++j) m += row[j];
    m /= double(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) var += (row[j] - m) * (row[j] - m);
    var /= double(d);
    double is = 1.0 / std::sqrt(var + eps);
    mu[size_t(r)] = m;
    istd[size_t(r)] = is;
    for (int64_t j = 0; j < d; ++j)
      out.data[size_t(r * d + j)] = gamma->value[j] * (row[j] - m) * is + beta->value[j];
  }
  bool rg = x->requires_grad || gamma->requires_grad || beta->requires_grad;
  return t.record(std::move(out), rg, "layer_norm",
                  [x, gamma, beta, rows, d, mu = std::move(mu), istd = std::move(istd)](Node& self) {
                    for (int64_t r = 0; r < rows; ++r) {
                      const double* xr = x->value.data.data() + r * d;
                      const double* go = self.grad.data.data() + r * d;
                      double m = mu[size_t(r)], is = istd[size_t(r)];
                      double s1 = 0.0, s2 = 0.0;
                      for (int64_t j = 0; j < d; ++j) {
                        double xhat = (xr[j] - m) * is;
                        double dxhat = go[j] * gamma->value[j];
                        s1 += dxhat;
                        s2 += dxhat * xhat;
                        accumulate(*gamma, j, go[j] * xhat);
                        accumulate(*beta, j, go[j]);
                      }
                      s1 /= double(d);
                      s2 /= double(d);
                      for (int64_t j = 0; j < d; ++j) {
                        double xhat = (xr[j] - m) * is;
                        double dxhat = go[j] * gamma->value[j];
                        accumulate(*x, r * d + j, is * (dxhat - s1 - xhat * s2));
                      }
                    }
                  });
}

inline Value sum_all(Tape& t, Value x) {
  double s = 0.0;
  for (double v : x->value.data) s += v;
  return t.record(Tensor::scalar(s), x->requires_grad, "sum", [x](Node& self) {
    for (int64_t i = 0; i < x->value.numel(); ++i) accumulate(*x, i, self.grad[0]);
  });
}

inline Value mean_all(Tape& t, Value x) {
  int64_t n = x->value.numel();
  double s = 0.0;
  for (double v : x->value.data) s += v;
  return t.record(Tensor::scalar(s / double(n)), x->requires_grad, "mean", [x, n](Node& self) {
    double g = self.grad[0] / double(n);
    for (int64_t i = 0; i < n; ++i) accumulate(*x, i, g);
  });
}

// Sum of absolute values. Subgradient at 0 is 0 so exactly-zero entries stay
// stationary under the penalty.
inline Value l1_norm(Tape& t, Value x) {
  double s = 0.0;
  for (double v : x->value.data) s += std::abs(v);
  return t.record(Tensor::scalar(s), x->requires_grad, "l1_norm", [x](Node& self) {
    for (int64_t i = 0; i < x->value.numel(); ++i) {
      double v = x->value[i];
      double sg = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
      accumulate(*x, i, sg * self.grad[0]);
    }
  });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Value matmul(Tape& t, Value a, Value b) {
  if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.shape[1] != b->value.shape[0])
    throw ShapeError("matmul: incompatible " + shape_str(a->value.shape) + " x " +
                     shape_str(b->value.shape));
  int64_t m = a->value.shape[0], k = a->value.shape[1], n = b->value.shape[1];
  Tensor out = Tensor::zeros({m, n});
  gemm_nn(m, n, k, a->value.data.data(), b->value.data.data(), out.data.data());
  bool rg = a->requires_grad || b->requires_grad;
  return t.record(std::move(out), rg, "matmul", [a, b, m, n, k](Node& self) {
    if (a->requires_grad)
      gemm_nt(m, k, n, self.grad.data.data(), b->value.data.data(), a->grad.data.data(), 1.0);
    if (b->requires_grad)
      gemm_tn(k, n, m, a->value.data.data(), self.grad.data.data(), b->grad.data.data(), 1.0);
  });
}

// C = A * B^T with A [m,k], B [n,k].
inline Value matmul_nt(Tape& t, Value a, Value b) {
  if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.shape[1] != b->value.shape[1])
    throw ShapeError("matmul_nt: incompatible " + shape_str(a->value.shape) + " x " +
                     shape_str(b->value.shape) + "^T");
  int64_t m = a->value.shape[0], k = a->value.shape[1], n = b->value.shape[0];
  Tensor out = Tensor::zeros({m, n});
  gemm_nt(m, n, k, a->value.data.data(), b->value.data.data(), out.data.data());
  bool rg = a->requires_grad || b->requires_grad;
  return t.record(std::move(out), rg, "matmul_nt", [a, b, m, n, k](Node& self) {
    if (a->requires_grad)
      gemm_nn(m, k, n, self.grad.data.data(), b->value.data.data(), a->grad.data.data(), 1.0);
    if (b->requires_grad)
      gemm_tn(n, k, m, self.grad.data.data(), a->value.data.data(), b->grad.data.data(), 1.0);
  });
}

// x [..., in] * W[out,in]^T + b. Leading axes are preserved.
inline Value linear(Tape& t, Value x, Value w, Value b) {
  int64_t in = x->value.shape.back();
  if (w->value.rank() != 2 || w->value.shape[1] != in)
    throw ShapeError("linear: weight " + shape_str(w->value.shape) + " does not accept input axis " +
                     std::to_string(in));
  int64_t out_dim = w->value.shape[0];
  if (b && b->value.numel() != out_dim) throw ShapeError("linear: bias length mismatch");
  int64_t rows = x->value.numel() / in;
  Shape oshape = x->value.shape;
  oshape.back() = out_dim;
  Tensor out = Tensor::zeros(oshape);
  gemm_nt(rows, out_dim, in, x->value.data.data(), w->value.data.data(), out.data.data());
  if (b)
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < out_dim; ++j) out.data[size_t(r * out_dim + j)] += b->value[j];
  bool rg = x->requires_grad || w->requires_grad || (b && b->requires_grad);
  return t.record(std::move(out), rg, "linear", [x, w, b, rows, in, out_dim](Node& self) {
    if (x->requires_grad)
      gemm_nn(rows, in, out_dim, self.grad.data.data(), w->value.data.data(), x->grad.data.data(),
              1.0);
    if (w->requires_grad)
      gemm_tn(out_dim, in, rows, self.grad.data.data(), x->value.data.data(), w->grad.data.data(),
              1.0);
    if (b && b->requires_grad)
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < out_dim; ++j) accumulate(*b, j, self.grad[r * out_dim + j]);
  });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Value slice_lastdim(Tape& t, Value x, int64_t start, int64_t len) {
  int64_t d = x->value.shape.back();
  if (start < 0 || len < 0 || start + len > d) throw ShapeError("slice_lastdim: out of range");
  int64_t rows = x->value.numel() / d;
  Shape oshape = x->value.shape;
  oshape.back() = len;
  Tensor out = Tensor::zeros(oshape);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < len; ++j) out.data[size_t(r * len + j)] = x->value[r * d + start + j];
  return t.record(std::move(out), x->requires_grad, "slice_lastdim",
                  [x, start, len, rows, d](Node& self) {
                    for (int64_t r = 0; r < rows; ++r)
                      for (int64_t j = 0; j < len; ++j)
                        accumulate(*x, r * d + start + j, self.grad[r * len + j]);
                  });
}

inline Value concat_lastdim(Tape& t, const std::vector<Value>& parts) {
  if (parts.empty()) throw ShapeError("concat_lastdim: no parts");
  Shape lead = parts[0]->value.shape;
  lead.pop_back();
  int64_t total = 0;
  bool rg = false;
  for (auto& p : parts) {
    Shape l = p->value.shape;
    int64_t d = l.back();
    l.pop_back();
    if (l != lead) throw ShapeError("concat_lastdim: leading shape mismatch");
    total += d;
    rg = rg || p->requires_grad;
  }
  int64_t rows = shape_numel(lead);
  Shape oshape = lead;
  oshape.push_back(total);
  Tensor out = Tensor::zeros(oshape);
  int64_t off = 0;
  for (auto& p : parts) {
    int64_t d = p->value.shape.back();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < d; ++j) out.data[size_t(r * total + off + j)] = p->value[r * d + j];
    off += d;
  }
  return t.record(std::move(out), rg, "concat_lastdim", [parts, rows, total](Node& self) {
    int64_t off = 0;
    for (auto& p : parts) {
      int64_t d = p->value.shape.back();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) accumulate(*p, r * d + j, self.grad[r * total + off + j]);
      off += d;
    }
  });
}

// [1,C,H,W] -> [H*W, C] token matrix.
inline Value chw_to_tokens(Tape& t, Value x) {
  if (x->value.rank() != 4 || x->value.shape[0] != 1)
    throw ShapeError("chw_to_tokens: expected [1,C,H,W], got " + shape_str(x->value.shape));
  int64_t c = x->value.shape[1], h = x->value.shape[2], w = x->value.shape[3];
  Tensor out = Tensor::zeros({h * w, c});
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t p = 0; p < h * w; ++p) out.data[size_t(p * c + ci)] = x->value[ci * h * w + p];
  return t.record(std::move(out), x->requires_grad, "chw_to_tokens", [x, c, h, w](Node& self) {
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t p = 0; p < h * w; ++p) accumulate(*x, ci * h * w + p, self.grad[p * c + ci]);
  });
}

// [T, C] -> [1,C,H,W] with T = H*W; the grid is assumed square when H,W are 0.
inline Value tokens_to_chw(Tape& t, Value x, int64_t h = 0, int64_t w = 0) {
  if (x->value.rank() != 2) throw ShapeError("tokens_to_chw: expected [T,C]");
  int64_t tt = x->value.shape[0], c = x->value.shape[1];
  if (h == 0) {
    auto side = int64_t(std::llround(std::sqrt(double(tt))));
    if (side * side != tt)
      throw ShapeError("tokens_to_chw: token count " + std::to_string(tt) + " is not square");
    h = w = side;
  }
  if (h * w != tt) throw ShapeError("tokens_to_chw: H*W != T");
  Tensor out = Tensor::zeros({1, c, h, w});
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t p = 0; p < tt; ++p) out.data[size_t(ci * tt + p)] = x->value[p * c + ci];
  return t.record(std::move(out), x->requires_grad, "tokens_to_chw", [x, c, tt](Node& self) {
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t p = 0; p < tt; ++p) accumulate(*x, p * c + ci, self.grad[ci * tt + p]);
  });
}

// Adds a constant tensor (e.g. positional encoding); gradient passes through.
inline Value add_const(Tape& t, Value x, const Tensor& c) {
  require_same_shape(x->value, c, "add_const");
  Tensor out = x->value;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += c.data[i];
  return t.record(std::move(out), x->requires_grad, "add_const", [x](Node& self) {
    for (int64_t i = 0; i < self.value.numel(); ++i) accumulate(*x, i, self.grad[i]);
  });
}

// out[t,:] = b for every token row of x; only the row count of x is used.
inline Value token_bias(Tape& t, Value x, Value b) {
  if (x->value.rank() != 2 || b->value.rank() != 1)
    throw ShapeError("token_bias: expected x [T,*], b [D]");
  int64_t rows = x->value.shape[0], d = b->value.numel();
  Tensor out = Tensor::zeros({rows, d});
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < d; ++j) out.data[size_t(r * d + j)] = b->value[j];
  bool rg = b->requires_grad;
  return t.record(std::move(out), rg, "token_bias", [b, rows, d](Node& self) {
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < d; ++j) accumulate(*b, j, self.grad[r * d + j]);
  });
}

// ---------------------------------------------------------------------------
// Convolution family
// ---------------------------------------------------------------------------

namespace detail {
inline void im2col(const Tensor& x, int64_t n, int64_t k, int64_t stride, int64_t pad, int64_t ho,
                   int64_t wo, std::vector<double>& cols) {
  int64_t cin = x.shape[1], h = x.shape[2], w = x.shape[3];
  int64_t patch = cin * k * k;
  cols.assign(size_t(patch * ho * wo), 0.0);
  for (int64_t c = 0; c < cin; ++c)
    for (int64_t u = 0; u < k; ++u)
      for (int64_t v = 0; v < k; ++v) {
        int64_t row = (c * k + u) * k + v;
        double* dst = cols.data() + row * ho * wo;
        for (int64_t i = 0; i < ho; ++i) {
          int64_t yi = i * stride + u - pad;
          if (yi < 0 || yi >= h) continue;
          const double* src = &x.data[size_t(((n * cin + c) * h + yi) * w)];
          for (int64_t j = 0; j < wo; ++j) {
            int64_t xj = j * stride + v - pad;
            if (xj >= 0 && xj < w) dst[i * wo + j] = src[xj];
          }
        }
      }
}

inline void col2im_add(const std::vector<double>& cols, int64_t n, int64_t k, int64_t stride,
                       int64_t pad, int64_t ho, int64_t wo, Tensor& dx) {
  int64_t cin = dx.shape[1], h = dx.shape[2], w = dx.shape[3];
  for (int64_t c = 0; c < cin; ++c)
    for (int64_t u = 0; u < k; ++u)
      for (int64_t v = 0; v < k; ++v) {
        int64_t row = (c * k + u) * k + v;
        const double* src = cols.data() + row * ho * wo;
        for (int64_t i = 0; i < ho; ++i) {
          int64_t yi = i * stride + u - pad;
          if (yi < 0 || yi >= h) continue;
          double* dst = &dx.data[size_t(((n * cin + c) * h + yi) * w)];
          for (int64_t j = 0; j < wo; ++j) {
            int64_t xj = j * stride + v - pad;
            if (xj >= 0 && xj < w) dst[xj] += src[i * wo + j];
          }
        }
      }
}
}  // namespace detail

// Cross-correlation conv2d, bias optional (pass nullptr when absent).
inline Value conv2d(Tape& t, Value x, Value w, Value b, int64_t stride, int64_t pad) {
  const Tensor& xv = x->value;
  const Tensor& wv = w->value;
  if (xv.rank() != 4) throw ShapeError("conv2d: input must be [N,Cin,H,W]");
  if (wv.rank() != 4) throw ShapeError("conv2d: weight must be [Cout,Cin,k,k]");
  if (xv.shape[1] != wv.shape[1])
    throw ShapeError("conv2d: input channel axis " + std::to_string(xv.shape[1]) +
                     " != weight channel axis " + std::to_string(wv.shape[1]));
  if (wv.shape[2] != wv.shape[3]) throw ShapeError("conv2d: non-square kernel");
  int64_t n = xv.shape[0], cin = xv.shape[1], h = xv.shape[2], wd = xv.shape[3];
  int64_t cout = wv.shape[0], k = wv.shape[2];
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (k > h + 2 * pad || k > wd + 2 * pad)
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " exceeds padded spatial axis");
  if (b && b->value.numel() != cout) throw ShapeError("conv2d: bias axis != Cout");
  int64_t ho = (h + 2 * pad - k) / stride + 1;
  int64_t wo = (wd + 2 * pad - k) / stride + 1;
  int64_t patch = cin * k * k;
  Tensor out = Tensor::zeros({n, cout, ho, wo});
  std::vector<double> cols;
  for (int64_t ni = 0; ni < n; ++ni) {
    detail::im2col(xv, ni, k, stride, pad, ho, wo, cols);
    gemm_nn(cout, ho * wo, patch, wv.data.data(), cols.data(),
            out.data.data() + ni * cout * ho * wo);
  }
  if (b)
    for (int64_t ni = 0; ni < n; ++ni)
      for (int64_t c = 0; c < cout; ++c) {
        double bv = b->value[c];
        double* dst = out.data.data() + (ni * cout + c) * ho * wo;
        for (int64_t p = 0; p < ho * wo; ++p) dst[p] += bv;
      }
  bool rg = x->requires_grad || w->requires_grad || (b && b->requires_grad);
  return t.record(std::move(out), rg, "conv2d",
                  [x, w, b, stride, pad, n, cout, k, patch, ho, wo](Node& self) {
                    std::vector<double> cols, dcols;
                    for (int64_t ni = 0; ni < n; ++ni) {
                      const double* go = self.grad.data.data() + ni * cout * ho * wo;
                      if (w->requires_grad || x->requires_grad)
                        detail::im2col(x->value, ni, k, stride, pad, ho, wo, cols);
                      if (w->requires_grad)
                        gemm_nt(cout, patch, ho * wo, go, cols.data(), w->grad.data.data(), 1.0);
                      if (x->requires_grad) {
                        dcols.assign(size_t(patch * ho * wo), 0.0);
                        gemm_tn(patch, ho * wo, cout, w->value.data.data(), go, dcols.data());
                        detail::col2im_add(dcols, ni, k, stride, pad, ho, wo, x->grad);
                      }
                      if (b && b->requires_grad)
                        for (int64_t c = 0; c < cout; ++c) {
                          double s = 0.0;
                          for (int64_t p = 0; p < ho * wo; ++p) s += go[c * ho * wo + p];
                          accumulate(*b, c, s);
                        }
                    }
                  });
}

inline Value maxpool2d(Tape& t, Value x, int64_t k = 2, int64_t stride = 2) {
  const Tensor& xv = x->value;
  if (xv.rank() != 4) throw ShapeError("maxpool2d: input must be [N,C,H,W]");
  int64_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
  int64_t ho = (h - k) / stride + 1, wo = (w - k) / stride + 1;
  if (ho < 1 || wo < 1) throw ShapeError("maxpool2d: window larger than spatial axis");
  Tensor out = Tensor::zeros({n, c, ho, wo});
  std::vector<int64_t> arg(size_t(n * c * ho * wo));
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t i = 0; i < ho; ++i)
        for (int64_t j = 0; j < wo; ++j) {
          double best = -1e300;
          int64_t bi = -1;
          for (int64_t u = 0; u < k; ++u)
            for (int64_t v = 0; v < k; ++v) {
              int64_t idx = ((ni * c + ci) * h + i * stride + u) * w + j * stride + v;
              if (xv.data[size_t(idx)] > best) {
                best = xv.data[size_t(idx)];
                bi = idx;
              }
            }
          int64_t oi = ((ni * c + ci) * ho + i) * wo + j;
          out.data[size_t(oi)] = best;
          arg[size_t(oi)] = bi;
        }
  return t.record(std::move(out), x->requires_grad, "maxpool2d",
                  [x, arg = std::move(arg)](Node& self) {
                    for (int64_t i = 0; i < self.value.numel(); ++i)
                      accumulate(*x, arg[size_t(i)], self.grad[i]);
                  });
}

// Batch normalization over [N,C,H,W]. In training mode batch statistics are
// used and running statistics are updated in place with the given momentum;
// in eval mode the running statistics are used.
inline Value batchnorm(Tape& t, Value x, Value gamma, Value beta, Tensor& running_mean,
                       Tensor& running_var, double eps, double momentum, bool training) {
  const Tensor& xv = x->value;
  if (xv.rank() != 4) throw ShapeError("batchnorm: input must be [N,C,H,W]");
  int64_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
  if (gamma->value.numel() != c)
    throw ShapeError("batchnorm: gamma axis " + std::to_string(gamma->value.numel()) +
                     " != channel axis " + std::to_string(c));
  if (beta->value.numel() != c) throw ShapeError("batchnorm: beta axis != channel axis");
  if (running_mean.numel() != c || running_var.numel() != c)
    throw ShapeError("batchnorm: running statistics axis != channel axis");
  if (eps <= 0.0) throw ShapeError("batchnorm: eps must be positive");
  for (int64_t i = 0; i < c; ++i)
    if (running_var[i] < 0.0) throw NumericError("batchnorm: negative running variance");
  int64_t m = n * h * w;
  std::vector<double> mu(size_t(c), 0.0);
  std::vector<double> istd(size_t(c), 0.0);
  if (training) {
    for (int64_t ci = 0; ci < c; ++ci) {
      double s = 0.0;
      for (int64_t ni = 0; ni < n; ++ni) {
        const double* p = xv.data.data() + (ni * c + ci) * h * w;
        for (int64_t q = 0; q < h * w; ++q) s += p[q];
      }
      double mean = s / double(m);
      double var = 0.0;
      for (int64_t ni = 0; ni < n; ++ni) {
        const double* p = xv.data.data() + (ni * c + ci) * h * w;
        for (int64_t q = 0; q < h * w; ++q) var += (p[q] - mean) * (p[q] - mean);
      }
      var /= double(m);
      mu[size_t(ci)] = mean;
      istd[size_t(ci)] = 1.0 / std::sqrt(var + eps);
      double uvar = m > 1 ? var * double(m) / double(m - 1) : var;
      running_mean[ci] = (1.0 - momentum) * running_mean[ci] + momentum * mean;
      running_var[ci] = (1.0 - momentum) * running_var[ci] + momentum * uvar;
    }
  } else {
    for (int64_t ci = 0; ci < c; ++ci) {
      mu[size_t(ci)] = running_mean[ci];
      istd[size_t(ci)] = 1.0 / std::sqrt(running_var[ci] + eps);
    }
  }
  Tensor out = Tensor::zeros(xv.shape);
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t ci = 0; ci < c; ++ci) {
      const double* p = xv.data.data() + (ni * c + ci) * h * w;
      double* o = out.data.data() + (ni * c + ci) * h * w;
      double g = gamma->value[ci], bb = beta->value[ci], mm = mu[size_t(ci)],
             is = istd[size_t(ci)];
      for (int64_t q = 0; q < h * w; ++q) o[q] = g * (p[q] - mm) * is + bb;
    }
  bool rg = x->requires_grad || gamma->requires_grad || beta->requires_grad;
  return t.record(
      std::move(out), rg, "batchnorm",
      [x, gamma, beta, n, c, h, w, m, training, mu = std::move(mu),
       istd = std::move(istd)](Node& self) {
        for (int64_t ci = 0; ci < c; ++ci) {
          double mm = mu[size_t(ci)], is = istd[size_t(ci)], g = gamma->value[ci];
          double sum_go = 0.0, sum_goxhat = 0.0;
          for (int64_t ni = 0; ni < n; ++ni) {
            const double* p = x->value.data.data() + (ni * c + ci) * h * w;
            const double* go = self.grad.data.data() + (ni * c + ci) * h * w;
            for (int64_t q = 0; q < h * w; ++q) {
              sum_go += go[q];
              sum_goxhat += go[q] * (p[q] - mm) * is;
            }
          }
          accumulate(*gamma, ci, sum_goxhat);
          accumulate(*beta, ci, sum_go);
          if (!x->requires_grad) continue;
          if (training) {
            double mgo = sum_go / double(m), mgoxh = sum_goxhat / double(m);
            for (int64_t ni = 0; ni < n; ++ni) {
              const double* p = x->value.data.data() + (ni * c + ci) * h * w;
              const double* go = self.grad.data.data() + (ni * c + ci) * h * w;
              int64_t base = (ni * c + ci) * h * w;
              for (int64_t q = 0; q < h * w; ++q) {
                double xhat = (p[q] - mm) * is;
                accumulate(*x, base + q, g * is * (go[q] - mgo - xhat * mgoxh));
              }
            }
          } else {
            for (int64_t ni = 0; ni < n; ++ni) {
              const double* go = self.grad.data.data() + (ni * c + ci) * h * w;
              int64_t base = (ni * c + ci) * h * w;
              for (int64_t q = 0; q < h * w; ++q) accumulate(*x, base + q, g * is * go[q]);
            }
          }
        }
      });
}

// Channelwise cross-correlation of template features over search features,
// producing a single-channel response map per sample.
inline Value xcorr(Tape& t, Value tf, Value sf) {
  const Tensor& a = tf->value;
  const Tensor& b = sf->value;
  if (a.rank() != 4 || b.rank() != 4) throw ShapeError("xcorr: features must be [N,C,H,W]");
  if (a.shape[0] != b.shape[0] || a.shape[1] != b.shape[1])
    throw ShapeError("xcorr: batch/channel axes disagree");
  int64_t n = a.shape[0], c = a.shape[1];
  int64_t ht = a.shape[2], wt = a.shape[3], hs = b.shape[2], ws = b.shape[3];
  if (ht > hs || wt > ws)
    throw ShapeError("xcorr: template features " + shape_str(a.shape) +
                     " larger than search features " + shape_str(b.shape));
  int64_t ho = hs - ht + 1, wo = ws - wt + 1;
  Tensor out = Tensor::zeros({n, 1, ho, wo});
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t i = 0; i < ho; ++i)
      for (int64_t j = 0; j < wo; ++j) {
        double s = 0.0;
        for (int64_t ci = 0; ci < c; ++ci)
          for (int64_t u = 0; u < ht; ++u) {
            const double* ta = &a.data[size_t(((ni * c + ci) * ht + u) * wt)];
            const double* sb = &b.data[size_t(((ni * c + ci) * hs + i + u) * ws + j)];
            for (int64_t v = 0; v < wt; ++v) s += ta[v] * sb[v];
          }
        out.at4(ni, 0, i, j) = s;
      }
  bool rg = tf->requires_grad || sf->requires_grad;
  return t.record(std::move(out), rg, "xcorr", [tf, sf, n, c, ht, wt, hs, ws, ho, wo](Node& self) {
    for (int64_t ni = 0; ni < n; ++ni)
      for (int64_t i = 0; i < ho; ++i)
        for (int64_t j = 0; j < wo; ++j) {
          double go = self.grad[((ni * 1 + 0) * ho + i) * wo + j];
          if (go == 0.0) continue;
          for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t u = 0; u < ht; ++u)
              for (int64_t v = 0; v < wt; ++v) {
                int64_t ai = ((ni * c + ci) * ht + u) * wt + v;
                int64_t bi = ((ni * c + ci) * hs + i + u) * ws + j + v;
                accumulate(*tf, ai, sf->value[bi] * go);
                accumulate(*sf, bi, tf->value[ai] * go);
              }
        }
  });
}

// Class-balanced binary cross-entropy on logits with +/-1 labels. Each class
// present is weighted by the inverse of its count, normalized by the number
// of classes present.
inline Value balanced_bce_with_logits(Tape& t, Value logits, const Tensor& labels) {
  require_same_shape(logits->value, labels, "balanced_bce");
  int64_t n = labels.numel();
  int64_t npos = 0, nneg = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (labels[i] > 0)
      ++npos;
    else
      ++nneg;
  }
  int classes = (npos > 0 ? 1 : 0) + (nneg > 0 ? 1 : 0);
  if (classes == 0) throw ShapeError("balanced_bce: empty label map");
  double wpos = npos > 0 ? 1.0 / (double(classes) * double(npos)) : 0.0;
  double wneg = nneg > 0 ? 1.0 / (double(classes) * double(nneg)) : 0.0;
  auto softplus = [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); };
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double y = labels[i] > 0 ? 1.0 : -1.0;
    double wi = labels[i] > 0 ? wpos : wneg;
    loss += wi * softplus(-y * logits->value[i]);
  }
  return t.record(Tensor::scalar(loss), logits->requires_grad, "balanced_bce",
                  [logits, labels, wpos, wneg, n](Node& self) {
                    for (int64_t i = 0; i < n; ++i) {
                      double y = labels[i] > 0 ? 1.0 : -1.0;
                      double wi = labels[i] > 0 ? wpos : wneg;
                      double z = -y * logits->value[i];
                      double sig = z >= 0 ? 1.0 / (1.0 + std::exp(-z))
                                          : std::exp(z) / (1.0 + std::exp(z));
                      accumulate(*logits, i, self.grad[0] * wi * (-y) * sig);
                    }
                  });
}

}  // namespace slimtrack
