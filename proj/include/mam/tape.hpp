#pragma once

#include <array>
#include <unordered_map>

#include "mam/ssm.hpp"
#include "mam/tensor.hpp"

namespace mam {

// Define-by-run reverse-mode tape over whole-tensor operations. Each op
// records parent ids and enough saved state for an exact vector-Jacobian
// product; backward() walks the nodes once in reverse creation order.
enum class Op : uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Scale,        // s0 * a + s1
  AddBias,      // a[r,c] + b[c] per row
  MatMul,       // a[m,k] b[k,n]
  MatMulBT,     // a[m,k] b[n,k]^T
  Pointwise,    // i0 = Act
  LayerNorm,    // a = x, b = scale, c = offset
  SoftmaxRows,  // i0 = 1 applies a causal (lower-triangular) mask
  LogSoftmaxRows,
  Sum,
  Mean,
  RowSum,       // [r,c] -> [r]
  TakePerRow,   // [r,c] + idx[r] -> [r]
  SliceRows,    // rows [i0, i1)
  ConcatRows,
  FlipRows,
  GatherRows,   // a = table [v,d], idx -> [len(idx), d]
  Minimum,
  Clip,         // clamp to [s0, s1]; gradient passes only inside the interval
  CausalConv,   // a = x [L,E], b = kernel [E,w], c = bias [E]
  SelectiveScan,  // parents u, delta, B, C, A, d_skip; i0 = Discretization
  Reshape,
};

struct Node {
  Op op = Op::Leaf;
  std::array<int, 6> parent{-1, -1, -1, -1, -1, -1};
  int n_parent = 0;
  Tensor val;
  int pid = -1;      // parameter id for leaves bound to trainable tensors
  int i0 = 0, i1 = 0;
  double s0 = 0, s1 = 0;
  std::vector<int> idx;
  Tensor saved;      // op-specific forward state (scan h, etc.)
};

// Lightweight handle; valid only for the tape that produced it.
struct Ref {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  const Tensor& val(Ref r) const { return nodes_[r.id].val; }
  const Tensor& grad(Ref r) const { return grads_[r.id]; }
  size_t size() const { return nodes_.size(); }

  Ref leaf(Tensor v, int pid = -1) {
    Node n;
    n.val = std::move(v);
    n.pid = pid;
    return push(std::move(n));
  }
  Ref constant(Tensor v) { return leaf(std::move(v), -1); }
  Ref scalar(double v) { return constant(Tensor::scalar(v)); }

  Ref add(Ref a, Ref b) {
    check(val(a).same_shape(val(b)), "add: shape mismatch");
    Node n = binary(Op::Add, a, b, Tensor(val(a).shape));
    for (long long i = 0; i < n.val.numel(); ++i) n.val[i] = val(a)[i] + val(b)[i];
    return push(std::move(n));
  }
  Ref sub(Ref a, Ref b) {
    check(val(a).same_shape(val(b)), "sub: shape mismatch");
    Node n = binary(Op::Sub, a, b, Tensor(val(a).shape));
    for (long long i = 0; i < n.val.numel(); ++i) n.val[i] = val(a)[i] - val(b)[i];
    return push(std::move(n));
  }
  Ref mul(Ref a, Ref b) {
    check(val(a).same_shape(val(b)), "mul: shape mismatch");
    Node n = binary(Op::Mul, a, b, Tensor(val(a).shape));
    for (long long i = 0; i < n.val.numel(); ++i) n.val[i] = val(a)[i] * val(b)[i];
    return push(std::move(n));
  }
  Ref scale(Ref a, double k, double shift = 0.0) {
    Node n = unary(Op::Scale, a, Tensor(val(a).shape));
    n.s0 = k;
    n.s1 = shift;
    for (long long i = 0; i < n.val.numel(); ++i) n.val[i] = k * val(a)[i] + shift;
    return push(std::move(n));
  }
  Ref add_bias(Ref a, Ref b) {
    const Tensor& x = val(a);
    check(x.ndim() == 2 && val(b).numel() == x.shape[1], "add_bias: bias length vs columns");
    Node n = binary(Op::AddBias, a, b, x);
    for (int i = 0; i < x.shape[0]; ++i)
      for (int j = 0; j < x.shape[1]; ++j) n.val.at(i, j) += val(b)[j];
    return push(std::move(n));
  }
  Ref matmul(Ref a, Ref b) {
    Node n = binary(Op::MatMul, a, b, mam::matmul(val(a), val(b)));
    return push(std::move(n));
  }
  Ref matmul_bt(Ref a, Ref b) {
    Node n = binary(Op::MatMulBT, a, b, mam::matmul_bt(val(a), val(b)));
    return push(std::move(n));
  }
  Ref linear(Ref x, Ref w, Ref b) { return add_bias(matmul(x, w), b); }

  Ref pointwise(Act act, Ref a) {
    Node n = unary(Op::Pointwise, a, mam::pointwise(act, val(a)));
    n.i0 = static_cast<int>(act);
    return push(std::move(n));
  }
  Ref pointwise(const std::string& name, Ref a) { return pointwise(act_from_name(name), a); }

  Ref layer_norm(Ref x, Ref scale, Ref offset) {
    Node n = ternary(Op::LayerNorm, x, scale, offset,
                     mam::layer_norm(val(x), val(scale), val(offset)));
    return push(std::move(n));
  }

  Ref softmax_rows(Ref a, bool causal_mask) {
    const Tensor& x = val(a);
    check(x.ndim() == 2, "softmax_rows: rank");
    Node n = unary(Op::SoftmaxRows, a, Tensor(x.shape));
    n.i0 = causal_mask ? 1 : 0;
    const int r = x.shape[0], c = x.shape[1];
    for (int i = 0; i < r; ++i) {
      const int lim = causal_mask ? std::min(i + 1, c) : c;
      double mx = x.at(i, 0);
      for (int j = 1; j < lim; ++j) mx = std::max(mx, x.at(i, j));
      double z = 0;
      for (int j = 0; j < lim; ++j) z += std::exp(x.at(i, j) - mx);
      for (int j = 0; j < lim; ++j) n.val.at(i, j) = std::exp(x.at(i, j) - mx) / z;
    }
    return push(std::move(n));
  }

  Ref log_softmax_rows(Ref a) {
    const Tensor& x = val(a);
    check(x.ndim() == 2, "log_softmax_rows: rank");
    Node n = unary(Op::LogSoftmaxRows, a, Tensor(x.shape));
    const int r = x.shape[0], c = x.shape[1];
    for (int i = 0; i < r; ++i) {
      double mx = x.at(i, 0);
      for (int j = 1; j < c; ++j) mx = std::max(mx, x.at(i, j));
      double z = 0;
      for (int j = 0; j < c; ++j) z += std::exp(x.at(i, j) - mx);
      const double lz = mx + std::log(z);
      for (int j = 0; j < c; ++j) n.val.at(i, j) = x.at(i, j) - lz;
    }
    return push(std::move(n));
  }

  Ref sum(Ref a) {
    Node n = unary(Op::Sum, a, Tensor::scalar(0));
    double acc = 0;
    for (long long i = 0; i < val(a).numel(); ++i) acc += val(a)[i];
    n.val[0] = acc;
    return push(std::move(n));
  }
  Ref mean(Ref a) {
    Node n = unary(Op::Mean, a, Tensor::scalar(0));
    double acc = 0;
    for (long long i = 0; i < val(a).numel(); ++i) acc += val(a)[i];
    n.val[0] = acc / static_cast<double>(val(a).numel());
    return push(std::move(n));
  }
  Ref row_sum(Ref a) {
    const Tensor& x = val(a);
    check(x.ndim() == 2, "row_sum: rank");
    Node n = unary(Op::RowSum, a, Tensor({x.shape[0]}));
    for (int i = 0; i < x.shape[0]; ++i) {
      double acc = 0;
      for (int j = 0; j < x.shape[1]; ++j) acc += x.at(i, j);
      n.val[i] = acc;
    }
    return push(std::move(n));
  }
  Ref take_per_row(Ref a, std::vector<int> idx) {
    const Tensor& x = val(a);
    check(x.ndim() == 2 && static_cast<int>(idx.size()) == x.shape[0],
          "take_per_row: one index per row");
    Node n = unary(Op::TakePerRow, a, Tensor({x.shape[0]}));
    for (int i = 0; i < x.shape[0]; ++i) {
      check(idx[i] >= 0 && idx[i] < x.shape[1], "take_per_row: index out of range");
      n.val[i] = x.at(i, idx[i]);
    }
    n.idx = std::move(idx);
    return push(std::move(n));
  }
  Ref slice_rows(Ref a, int r0, int r1) {
    const Tensor& x = val(a);
    check(x.ndim() >= 1 && 0 <= r0 && r0 <= r1 && r1 <= x.shape[0], "slice_rows: bounds");
    Shape s = x.shape;
    s[0] = r1 - r0;
    Node n = unary(Op::SliceRows, a, Tensor(s));
    n.i0 = r0;
    n.i1 = r1;
    const int c = x.cols();
    std::copy(x.data.begin() + static_cast<size_t>(r0) * c,
              x.data.begin() + static_cast<size_t>(r1) * c, n.val.data.begin());
    return push(std::move(n));
  }
  Ref concat_rows(Ref a, Ref b) {
    const Tensor& xa = val(a);
    const Tensor& xb = val(b);
    check(xa.cols() == xb.cols() && xa.ndim() == xb.ndim(), "concat_rows: column mismatch");
    Shape s = xa.shape;
    s[0] += xb.shape[0];
    Node n = binary(Op::ConcatRows, a, b, Tensor(s));
    std::copy(xa.data.begin(), xa.data.end(), n.val.data.begin());
    std::copy(xb.data.begin(), xb.data.end(), n.val.data.begin() + xa.data.size());
    return push(std::move(n));
  }
  Ref flip_rows(Ref a) {
    Node n = unary(Op::FlipRows, a, mam::flip_rows(val(a)));
    return push(std::move(n));
  }
  Ref gather_rows(Ref table, std::vector<int> idx) {
    const Tensor& t = val(table);
    check(t.ndim() == 2, "gather_rows: table rank");
    Node n = unary(Op::GatherRows, table, Tensor({static_cast<int>(idx.size()), t.shape[1]}));
    for (size_t i = 0; i < idx.size(); ++i) {
      check(idx[i] >= 0 && idx[i] < t.shape[0], "gather_rows: row index out of range");
      std::copy(&t.at(static_cast<int>(idx[i]), 0), &t.at(static_cast<int>(idx[i]), 0) + t.shape[1],
                &n.val.at(static_cast<int>(i), 0));
    }
    n.idx = std::move(idx);
    return push(std::move(n));
  }
  Ref minimum(Ref a, Ref b) {
    check(val(a).same_shape(val(b)), "minimum: shape mismatch");
    Node n = binary(Op::Minimum, a, b, Tensor(val(a).shape));
    for (long long i = 0; i < n.val.numel(); ++i) n.val[i] = std::min(val(a)[i], val(b)[i]);
    return push(std::move(n));
  }
  Ref clip(Ref a, double lo, double hi) {
    Node n = unary(Op::Clip, a, Tensor(val(a).shape));
    n.s0 = lo;
    n.s1 = hi;
    for (long long i = 0; i < n.val.numel(); ++i) n.val[i] = std::clamp(val(a)[i], lo, hi);
    return push(std::move(n));
  }
  Ref causal_conv(Ref x, Ref kernel, Ref bias) {
    const Tensor& xv = val(x);
    const Tensor& kv = val(kernel);
    check(xv.ndim() == 2 && kv.ndim() == 2 && kv.shape[0] == xv.shape[1],
          "causal_conv: kernel [E,w] vs input [L,E]");
    check(val(bias).numel() == xv.shape[1], "causal_conv: bias length");
    const int n_tok = xv.shape[0], e_dim = xv.shape[1], w = kv.shape[1];
    Node n = ternary(Op::CausalConv, x, kernel, bias, Tensor({n_tok, e_dim}));
    for (int t = 0; t < n_tok; ++t)
      for (int e = 0; e < e_dim; ++e) {
        double acc = val(bias)[e];
        for (int tau = 0; tau < w && tau <= t; ++tau) acc += kv.at(e, tau) * xv.at(t - tau, e);
        n.val.at(t, e) = acc;
      }
    return push(std::move(n));
  }
  Ref selective_scan(Ref u, Ref delta, Ref b_seq, Ref c_seq, Ref a, Ref d_skip,
                     Discretization disc) {
    Node n;
    n.op = Op::SelectiveScan;
    n.parent = {u.id, delta.id, b_seq.id, c_seq.id, a.id, d_skip.id};
    n.n_parent = 6;
    n.i0 = static_cast<int>(disc);
    n.val = selective_scan_forward(val(u), val(delta), val(b_seq), val(c_seq), val(a), val(d_skip),
                                   disc, n.saved);
    return push(std::move(n));
  }
  Ref reshape(Ref a, Shape s) {
    check(numel_of(s) == val(a).numel(), "reshape: element count");
    Node n = unary(Op::Reshape, a, Tensor(s, val(a).data));
    return push(std::move(n));
  }

  // Composite: tanh-approximation gelu from primitive ops.
  Ref gelu(Ref x) {
    Ref x2 = mul(x, x);
    Ref x3 = mul(x2, x);
    Ref inner = add(x, scale(x3, 0.044715));
    Ref t = pointwise(Act::Tanh, scale(inner, 0.7978845608028654));
    return mul(x, scale(t, 0.5, 0.5));
  }

  // Reverse sweep from a scalar loss. Nodes with no path to the loss keep a
  // zero gradient. Parameter leaves (pid >= 0) are exposed via param_grad().
  void backward(Ref loss) {
    check(loss.valid() && val(loss).numel() == 1, "backward: loss must be a scalar");
    grads_.assign(nodes_.size(), Tensor());
    grad_at(loss.id) = Tensor::scalar(1.0);
    for (int i = loss.id; i >= 0; --i) {
      if (grads_[i].numel() == 0) continue;
      step_back(i);
    }
    param_grads_.clear();
    for (size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].pid >= 0) {
        Tensor& g = grad_at(static_cast<int>(i));
        auto it = param_grads_.find(nodes_[i].pid);
        if (it == param_grads_.end()) {
          param_grads_.emplace(nodes_[i].pid, g);
        } else {
          for (long long k = 0; k < g.numel(); ++k) it->second[k] += g[k];
        }
      }
  }

  const std::unordered_map<int, Tensor>& param_grads() const { return param_grads_; }

 private:
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::unordered_map<int, Tensor> param_grads_;

  Ref push(Node n) {
    nodes_.push_back(std::move(n));
    return Ref{static_cast<int>(nodes_.size()) - 1};
  }
  Node unary(Op op, Ref a, Tensor v) {
    Node n;
    n.op = op;
    n.parent[0] = a.id;
    n.n_parent = 1;
    n.val = std::move(v);
    return n;
  }
  Node binary(Op op, Ref a, Ref b, Tensor v) {
    Node n = unary(op, a, std::move(v));
    n.op = op;
    n.parent[1] = b.id;
    n.n_parent = 2;
    return n;
  }
  Node ternary(Op op, Ref a, Ref b, Ref c, Tensor v) {
    Node n = binary(op, a, b, std::move(v));
    n.parent[2] = c.id;
    n.n_parent = 3;
    return n;
  }

  Tensor& grad_at(int id) {
    if (grads_[id].numel() == 0) grads_[id] = Tensor(nodes_[id].val.shape);
    return grads_[id];
  }
  const Tensor& pval(const Node& n, int k) const { return nodes_[n.parent[k]].val; }

  void step_back(int id) {
    Node& n = nodes_[id];
    const Tensor& g = grads_[id];
    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::Add: {
        Tensor& ga = grad_at(n.parent[0]);
        Tensor& gb = grad_at(n.parent[1]);
        for (long long i = 0; i < g.numel(); ++i) {
          ga[i] += g[i];
          gb[i] += g[i];
        }
        break;
      }
      case Op::Sub: {
        Tensor& ga = grad_at(n.parent[0]);
        Tensor& gb = grad_at(n.parent[1]);
        for (long long i = 0; i < g.numel(); ++i) {
          ga[i] += g[i];
          gb[i] -= g[i];
        }
        break;
      }
      case Op::Mul: {
        Tensor& ga = grad_at(n.parent[0]);
        Tensor& gb = grad_at(n.parent[1]);
        const Tensor& av = pval(n, 0);
        const Tensor& bv = pval(n, 1);
        for (long long i = 0; i < g.numel(); ++i) {
          ga[i] += g[i] * bv[i];
          gb[i] += g[i] * av[i];
        }
        break;
      }
      case Op::Scale: {
        Tensor& ga = grad_at(n.parent[0]);
        for (long long i = 0; i < g.numel(); ++i) ga[i] += n.s0 * g[i];
        break;
      }
      case Op::AddBias: {
        Tensor& ga = grad_at(n.parent[0]);
        Tensor& gb = grad_at(n.parent[1]);
        const int r = n.val.shape[0], c = n.val.shape[1];
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) {
            ga.at(i, j) += g.at(i, j);
            gb[j] += g.at(i, j);
          }
        break;
      }
      case Op::MatMul: {
        // c = a b: da = g b^T, db = a^T g
        const Tensor& av = pval(n, 0);
        const Tensor& bv = pval(n, 1);
        Tensor da = mam::matmul_bt(g, bv);
        Tensor& ga = grad_at(n.parent[0]);
        for (long long i = 0; i < da.numel(); ++i) ga[i] += da[i];
        Tensor& gb = grad_at(n.parent[1]);
        const int m = av.shape[0], k = av.shape[1], c = bv.shape[1];
        for (int p = 0; p < k; ++p)
          for (int i = 0; i < m; ++i) {
            const double apv = av.at(i, p);
            if (apv == 0.0) continue;
            for (int j = 0; j < c; ++j) gb.at(p, j) += apv * g.at(i, j);
          }
        break;
      }
      case Op::MatMulBT: {
        // c = a b^T: da = g b, db = g^T a
        const Tensor& av = pval(n, 0);
        const Tensor& bv = pval(n, 1);
        Tensor da = mam::matmul(g, bv);
        Tensor& ga = grad_at(n.parent[0]);
        for (long long i = 0; i < da.numel(); ++i) ga[i] += da[i];
        Tensor& gb = grad_at(n.parent[1]);
        const int m = av.shape[0], k = av.shape[1], r = bv.shape[0];
        for (int j = 0; j < r; ++j)
          for (int i = 0; i < m; ++i) {
            const double gv = g.at(i, j);
            if (gv == 0.0) continue;
            for (int p = 0; p < k; ++p) gb.at(j, p) += gv * av.at(i, p);
          }
        break;
      }
      case Op::Pointwise: {
        Tensor& ga = grad_at(n.parent[0]);
        const Tensor& xv = pval(n, 0);
        const Act act = static_cast<Act>(n.i0);
        for (long long i = 0; i < g.numel(); ++i) ga[i] += g[i] * act_grad(act, xv[i], n.val[i]);
        break;
      }
      case Op::LayerNorm: {
        const Tensor& xv = pval(n, 0);
        const Tensor& sc = pval(n, 1);
        Tensor& gx = grad_at(n.parent[0]);
        Tensor& gs = grad_at(n.parent[1]);
        Tensor& go = grad_at(n.parent[2]);
        const int d = xv.shape.back();
        const long long n_tok = xv.numel() / d;
        for (long long t = 0; t < n_tok; ++t) {
          const double* row = xv.data.data() + t * d;
          const double* grow = g.data.data() + t * d;
          double mu = 0;
          for (int j = 0; j < d; ++j) mu += row[j];
          mu /= d;
          double var = 0;
          for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
          var /= d;
          const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
          // dxhat = g * scale; dx = rstd (dxhat - mean(dxhat) - xhat mean(dxhat*xhat))
          double m1 = 0, m2 = 0;
          for (int j = 0; j < d; ++j) {
            const double xh = (row[j] - mu) * rstd;
            const double dxh = grow[j] * sc[j];
            m1 += dxh;
            m2 += dxh * xh;
          }
          m1 /= d;
          m2 /= d;
          for (int j = 0; j < d; ++j) {
            const double xh = (row[j] - mu) * rstd;
            const double dxh = grow[j] * sc[j];
            gx.data[t * d + j] += rstd * (dxh - m1 - xh * m2);
            gs[j] += grow[j] * xh;
            go[j] += grow[j];
          }
        }
        break;
      }
      case Op::SoftmaxRows: {
        Tensor& ga = grad_at(n.parent[0]);
        const int r = n.val.shape[0], c = n.val.shape[1];
        const bool causal = n.i0 != 0;
        for (int i = 0; i < r; ++i) {
          const int lim = causal ? std::min(i + 1, c) : c;
          double dot = 0;
          for (int j = 0; j < lim; ++j) dot += g.at(i, j) * n.val.at(i, j);
          for (int j = 0; j < lim; ++j) ga.at(i, j) += n.val.at(i, j) * (g.at(i, j) - dot);
        }
        break;
      }
      case Op::LogSoftmaxRows: {
        Tensor& ga = grad_at(n.parent[0]);
        const int r = n.val.shape[0], c = n.val.shape[1];
        for (int i = 0; i < r; ++i) {
          double gsum = 0;
          for (int j = 0; j < c; ++j) gsum += g.at(i, j);
          for (int j = 0; j < c; ++j) ga.at(i, j) += g.at(i, j) - std::exp(n.val.at(i, j)) * gsum;
        }
        break;
      }
      case Op::Sum: {
        Tensor& ga = grad_at(n.parent[0]);
        for (long long i = 0; i < ga.numel(); ++i) ga[i] += g[0];
        break;
      }
      case Op::Mean: {
        Tensor& ga = grad_at(n.parent[0]);
        const double k = g[0] / static_cast<double>(ga.numel());
        for (long long i = 0; i < ga.numel(); ++i) ga[i] += k;
        break;
      }
      case Op::RowSum: {
        Tensor& ga = grad_at(n.parent[0]);
        const int r = ga.shape[0], c = ga.shape[1];
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) ga.at(i, j) += g[i];
        break;
      }
      case Op::TakePerRow: {
        Tensor& ga = grad_at(n.parent[0]);
        for (int i = 0; i < ga.shape[0]; ++i) ga.at(i, n.idx[i]) += g[i];
        break;
      }
      case Op::SliceRows: {
        Tensor& ga = grad_at(n.parent[0]);
        const int c = ga.cols();
        for (long long i = 0; i < g.numel(); ++i)
          ga.data[static_cast<size_t>(n.i0) * c + i] += g[i];
        break;
      }
      case Op::ConcatRows: {
        Tensor& ga = grad_at(n.parent[0]);
        Tensor& gb = grad_at(n.parent[1]);
        for (long long i = 0; i < ga.numel(); ++i) ga[i] += g[i];
        for (long long i = 0; i < gb.numel(); ++i) gb[i] += g[ga.numel() + i];
        break;
      }
      case Op::FlipRows: {
        Tensor& ga = grad_at(n.parent[0]);
        Tensor gf = mam::flip_rows(g);
        for (long long i = 0; i < ga.numel(); ++i) ga[i] += gf[i];
        break;
      }
      case Op::GatherRows: {
        Tensor& ga = grad_at(n.parent[0]);
        const int d = ga.shape[1];
        for (size_t i = 0; i < n.idx.size(); ++i)
          for (int j = 0; j < d; ++j) ga.at(n.idx[i], j) += g.at(static_cast<int>(i), j);
        break;
      }
      case Op::Minimum: {
        Tensor& ga = grad_at(n.parent[0]);
        Tensor& gb = grad_at(n.parent[1]);
        const Tensor& av = pval(n, 0);
        const Tensor& bv = pval(n, 1);
        for (long long i = 0; i < g.numel(); ++i) {
          if (av[i] <= bv[i])
            ga[i] += g[i];
          else
            gb[i] += g[i];
        }
        break;
      }
      case Op::Clip: {
        Tensor& ga = grad_at(n.parent[0]);
        const Tensor& av = pval(n, 0);
        for (long long i = 0; i < g.numel(); ++i)
          if (av[i] > n.s0 && av[i] < n.s1) ga[i] += g[i];
        break;
      }
      case Op::CausalConv: {
        const Tensor& xv = pval(n, 0);
        const Tensor& kv = pval(n, 1);
        Tensor& gx = grad_at(n.parent[0]);
        Tensor& gk = grad_at(n.parent[1]);
        Tensor& gb = grad_at(n.parent[2]);
        const int n_tok = xv.shape[0], e_dim = xv.shape[1], w = kv.shape[1];
        for (int t = 0; t < n_tok; ++t)
          for (int e = 0; e < e_dim; ++e) {
            const double gv = g.at(t, e);
            gb[e] += gv;
            for (int tau = 0; tau < w && tau <= t; ++tau) {
              gx.at(t - tau, e) += gv * kv.at(e, tau);
              gk.at(e, tau) += gv * xv.at(t - tau, e);
            }
          }
        break;
      }
      case Op::SelectiveScan: {
        ScanGrads sg = selective_scan_backward(
            g, pval(n, 0), pval(n, 1), pval(n, 2), pval(n, 3), pval(n, 4), pval(n, 5),
            static_cast<Discretization>(n.i0), n.saved);
        const Tensor* parts[6] = {&sg.du, &sg.ddelta, &sg.db, &sg.dc, &sg.da, &sg.dd};
        for (int k = 0; k < 6; ++k) {
          Tensor& gp = grad_at(n.parent[k]);
          for (long long i = 0; i < gp.numel(); ++i) gp[i] += (*parts[k])[i];
        }
        break;
      }
      case Op::Reshape: {
        Tensor& ga = grad_at(n.parent[0]);
        for (long long i = 0; i < g.numel(); ++i) ga[i] += g[i];
        break;
      }
    }
  }
};

// Binds a parameter struct to a tape: hands out one leaf per distinct tensor,
// keyed by address, with stable parameter ids supplied by the caller.
class Binder {
 public:
  Binder(Tape& tape, const std::unordered_map<const void*, int>& pid_of)
      : tape_(tape), pid_of_(pid_of) {}

  Ref operator()(const Tensor& t) {
    auto it = cache_.find(&t);
    if (it != cache_.end()) return it->second;
    auto pit = pid_of_.find(&t);
    const int pid = pit == pid_of_.end() ? -1 : pit->second;
    Ref r = tape_.leaf(t, pid);
    cache_.emplace(&t, r);
    return r;
  }

 private:
  Tape& tape_;
  const std::unordered_map<const void*, int>& pid_of_;
  std::unordered_map<const void*, Ref> cache_;
};

}  // namespace mam
