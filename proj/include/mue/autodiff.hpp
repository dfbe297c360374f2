#pragma once

// Tape-based reverse-mode differentiation over Tensor2D values.
//
// Every op appends a node holding its forward value and a closure that pushes
// the node's gradient into its inputs. backward() replays the closures in
// reverse order. Nodes may alias an external tensor (model parameters) instead
// of copying it.

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "mue/numerics.hpp"

namespace mue::ad {

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

class Tape {
 public:
  Var leaf(Tensor2D value) { return push(std::move(value), nullptr, {}); }
  Var alias(const Tensor2D& external) { return push({}, &external, {}); }

  const Tensor2D& value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.external ? *n.external : n.value;
  }

  /// Gradient accumulated at v; zeros of the right shape if nothing reached it.
  Tensor2D grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.size() == 0 && value(v).size() != 0) return Tensor2D(value(v).rows(), value(v).cols());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(out)/d(out) = 1 for a 1x1 output and propagates.
  void backward(Var out) {
    const Tensor2D& o = value(out);
    if (o.rows() != 1 || o.cols() != 1) throw ShapeError("backward: output must be 1x1");
    nodes_[out.id].grad = Tensor2D(1, 1, 1.0);
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(*this, n.grad);
    }
  }

  using Backward = std::function<void(Tape&, const Tensor2D&)>;

  Var push(Tensor2D value, const Tensor2D* external, Backward backward) {
    nodes_.push_back(Node{std::move(value), external, Tensor2D{}, std::move(backward)});
    return Var{nodes_.size() - 1};
  }

  /// Gradient buffer for v, allocated on first touch.
  Tensor2D& grad_ref(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.size() == 0) {
      const Tensor2D& val = value(v);
      n.grad = Tensor2D(val.rows(), val.cols());
    }
    return n.grad;
  }

  void accumulate(Var v, const Tensor2D& g) { add_inplace(grad_ref(v), g); }

 private:
  struct Node {
    Tensor2D value;
    const Tensor2D* external;
    Tensor2D grad;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

/// Differentiable counterparts of the numerics ops. Mirrors PlainOps so the
/// model code can be written once against either.
class TapeOps {
 public:
  using Value = Var;
  using Param = Var;

  explicit TapeOps(Tape& tape) : tape_(&tape) {}

  Tape& tape() const { return *tape_; }
  const Tensor2D& value(Var v) const { return tape_->value(v); }

  Var constant(Tensor2D t) const { return tape_->leaf(std::move(t)); }

  Var matmul(Var a, Var b) const {
    return tape_->push(mue::matmul(value(a), value(b)), nullptr,
                       [a, b](Tape& t, const Tensor2D& g) {
                         t.accumulate(a, mue::matmul_nt(g, t.value(b)));
                         t.accumulate(b, mue::matmul_tn(t.value(a), g));
                       });
  }

  /// a * b^T.
  Var matmul_nt(Var a, Var b) const {
    return tape_->push(mue::matmul_nt(value(a), value(b)), nullptr,
                       [a, b](Tape& t, const Tensor2D& g) {
                         t.accumulate(a, mue::matmul(g, t.value(b)));
                         t.accumulate(b, mue::matmul_tn(g, t.value(a)));
                       });
  }

  Var add(Var a, Var b) const {
    return tape_->push(mue::add(value(a), value(b)), nullptr, [a, b](Tape& t, const Tensor2D& g) {
      t.accumulate(a, g);
      t.accumulate(b, g);
    });
  }

  Var add_row(Var x, Var row) const {
    return tape_->push(mue::add_row(value(x), value(row)), nullptr,
                       [x, row](Tape& t, const Tensor2D& g) {
                         t.accumulate(x, g);
                         Tensor2D& gr = t.grad_ref(row);
                         for (std::size_t i = 0; i < g.rows(); ++i)
                           for (std::size_t j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j);
                       });
  }

  /// x + c where c carries no gradient (masks).
  Var add_const(Var x, const Tensor2D& c) const {
    return tape_->push(mue::add(value(x), c), nullptr,
                       [x](Tape& t, const Tensor2D& g) { t.accumulate(x, g); });
  }

  Var scale(Var x, double s) const {
    return tape_->push(mue::scale(value(x), s), nullptr,
                       [x, s](Tape& t, const Tensor2D& g) { t.accumulate(x, mue::scale(g, s)); });
  }

  Var slice_rows(Var x, std::size_t begin, std::size_t end) const {
    return tape_->push(mue::slice_rows(value(x), begin, end), nullptr,
                       [x, begin](Tape& t, const Tensor2D& g) {
                         Tensor2D& gx = t.grad_ref(x);
                         for (std::size_t i = 0; i < g.rows(); ++i)
                           for (std::size_t j = 0; j < g.cols(); ++j) gx(begin + i, j) += g(i, j);
                       });
  }

  Var slice_cols(Var x, std::size_t begin, std::size_t end) const {
    return tape_->push(mue::slice_cols(value(x), begin, end), nullptr,
                       [x, begin](Tape& t, const Tensor2D& g) {
                         Tensor2D& gx = t.grad_ref(x);
                         for (std::size_t i = 0; i < g.rows(); ++i)
                           for (std::size_t j = 0; j < g.cols(); ++j) gx(i, begin + j) += g(i, j);
                       });
  }

  Var concat_rows(Var a, Var b) const {
    const std::size_t split = value(a).rows();
    return tape_->push(mue::concat_rows(value(a), value(b)), nullptr,
                       [a, b, split](Tape& t, const Tensor2D& g) {
                         if (split > 0) t.accumulate(a, mue::slice_rows(g, 0, split));
                         if (g.rows() > split) t.accumulate(b, mue::slice_rows(g, split, g.rows()));
                       });
  }

  Var concat_cols(const std::vector<Var>& parts) const {
    std::vector<Tensor2D> values;
    values.reserve(parts.size());
    for (Var p : parts) values.push_back(value(p));
    return tape_->push(mue::concat_cols(values), nullptr, [parts](Tape& t, const Tensor2D& g) {
      std::size_t offset = 0;
      for (Var p : parts) {
        const std::size_t w = t.value(p).cols();
        t.accumulate(p, mue::slice_cols(g, offset, offset + w));
        offset += w;
      }
    });
  }

  Var gather_rows(Var table, std::span<const TokenId> ids) const {
    std::vector<TokenId> saved(ids.begin(), ids.end());
    return tape_->push(mue::gather_rows(value(table), ids), nullptr,
                       [table, saved](Tape& t, const Tensor2D& g) {
                         Tensor2D& gt = t.grad_ref(table);
                         for (std::size_t i = 0; i < saved.size(); ++i) {
                           auto dst = gt.row(static_cast<std::size_t>(saved[i]));
                           auto src = g.row(i);
                           for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
                         }
                       });
  }

  /// rows x cols tensor whose entry k is the table element at flat index idx[k].
  Var gather_flat(Var table, std::size_t rows, std::size_t cols,
                  std::vector<std::size_t> idx) const {
    Tensor2D out(rows, cols);
    const Tensor2D& tv = value(table);
    for (std::size_t k = 0; k < idx.size(); ++k) out.data()[k] = tv.data()[idx[k]];
    return tape_->push(std::move(out), nullptr,
                       [table, idx = std::move(idx)](Tape& t, const Tensor2D& g) {
                         Tensor2D& gt = t.grad_ref(table);
                         for (std::size_t k = 0; k < idx.size(); ++k) gt.data()[idx[k]] += g.data()[k];
                       });
  }

  Var gelu(Var x) const {
    return tape_->push(mue::gelu(value(x)), nullptr, [x](Tape& t, const Tensor2D& g) {
      const Tensor2D& xv = t.value(x);
      Tensor2D& gx = t.grad_ref(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx.data()[i] += g.data()[i] * gelu_grad(xv.data()[i]);
    });
  }

  Var softmax_rows(Var x) const {
    Tensor2D y = mue::softmax_rows(value(x));
    // node id of the result is known only after push; read y back from the tape
    const std::size_t self = tape_->size();
    return tape_->push(std::move(y), nullptr, [x, self](Tape& t, const Tensor2D& g) {
      const Tensor2D& yv = t.value(Var{self});
      Tensor2D& gx = t.grad_ref(x);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        auto yr = yv.row(i);
        auto gr = g.row(i);
        double dot = 0.0;
        for (std::size_t j = 0; j < yr.size(); ++j) dot += yr[j] * gr[j];
        auto gxr = gx.row(i);
        for (std::size_t j = 0; j < yr.size(); ++j) gxr[j] += yr[j] * (gr[j] - dot);
      }
    });
  }

  Var layer_norm(Var x, Var gain, Var bias) const {
    const Tensor2D& xv = value(x);
    const Tensor2D& gv = value(gain);
    Tensor2D y = mue::layer_norm(xv, gv, value(bias));
    const std::size_t n = xv.cols();
    // normalised activations and inverse std per row, needed by the backward pass
    Tensor2D xhat(xv.rows(), n);
    std::vector<double> inv_std(xv.rows());
    for (std::size_t i = 0; i < xv.rows(); ++i) {
      auto in = xv.row(i);
      double mean = 0.0;
      for (double v : in) mean += v;
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (double v : in) var += (v - mean) * (v - mean);
      var /= static_cast<double>(n);
      inv_std[i] = 1.0 / std::sqrt(var + kLayerNormEps);
      for (std::size_t j = 0; j < n; ++j) xhat(i, j) = (in[j] - mean) * inv_std[i];
    }
    return tape_->push(
        std::move(y), nullptr,
        [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                              const Tensor2D& g) {
          const Tensor2D& gv = t.value(gain);
          const std::size_t n = g.cols();
          Tensor2D& gx = t.grad_ref(x);
          Tensor2D& gg = t.grad_ref(gain);
          Tensor2D& gb = t.grad_ref(bias);
          std::vector<double> dxhat(n);
          for (std::size_t i = 0; i < g.rows(); ++i) {
            double sum_d = 0.0, sum_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              gg.data()[j] += g(i, j) * xhat(i, j);
              gb.data()[j] += g(i, j);
              dxhat[j] = g(i, j) * gv.data()[j];
              sum_d += dxhat[j];
              sum_dx += dxhat[j] * xhat(i, j);
            }
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              gx(i, j) += inv_std[i] * (dxhat[j] - inv_n * sum_d - xhat(i, j) * inv_n * sum_dx);
            }
          }
        });
  }

  /// 1x1 summed token cross-entropy.
  Var cross_entropy(Var logits, std::span<const TokenId> targets) const {
    const Tensor2D& lv = value(logits);
    const double loss = mue::cross_entropy(lv, targets);
    std::vector<TokenId> saved(targets.begin(), targets.end());
    return tape_->push(Tensor2D(1, 1, loss), nullptr,
                       [logits, saved](Tape& t, const Tensor2D& g) {
                         Tensor2D p = mue::softmax_rows(t.value(logits));
                         for (std::size_t i = 0; i < saved.size(); ++i)
                           p(i, static_cast<std::size_t>(saved[i])) -= 1.0;
                         t.accumulate(logits, mue::scale(p, g(0, 0)));
                       });
  }

  /// Sum of 1x1 values.
  Var sum(const std::vector<Var>& scalars) const {
    double s = 0.0;
    for (Var v : scalars) s += value(v)(0, 0);
    return tape_->push(Tensor2D(1, 1, s), nullptr, [scalars](Tape& t, const Tensor2D& g) {
      for (Var v : scalars) t.accumulate(v, g);
    });
  }

 private:
  Tape* tape_;
};

}  // namespace mue::ad
