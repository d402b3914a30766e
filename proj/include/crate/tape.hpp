#pragma once

#include "crate/numerics.hpp"

#include <functional>
#include <utility>
#include <vector>

namespace crate {

template <class S>
class Tape;

/// Lightweight handle into a tape; copies freely.
template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Mat<S>& value() const { return tape->value(id); }
};

/// Reverse-mode tape over whole matrices. Nodes are recorded in evaluation
/// order; backward() walks them once in reverse, so a node's adjoint is
/// complete before its pullback distributes it to the parents.
template <class S>
class Tape {
 public:
  using Pull = std::function<void(Tape&, const Mat<S>& adjoint, int self)>;

  Var<S> leaf(Mat<S> v, bool requires_grad = true) {
    return emplace(std::move(v), requires_grad, nullptr);
  }

  Var<S> constant(Mat<S> v) { return leaf(std::move(v), false); }

  Var<S> emplace(Mat<S> v, bool needs, Pull pull) {
    nodes_.push_back(Node{std::move(v), needs, needs ? std::move(pull) : nullptr});
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }

  int size() const { return static_cast<int>(nodes_.size()); }

  const Mat<S>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs; }

  template <class Expr>
  void accum(int id, const Expr& e) {
    if (!nodes_[static_cast<std::size_t>(id)].needs) return;
    Mat<S>& a = adjoints_[static_cast<std::size_t>(id)];
    if (a.size() == 0)
      a = e;
    else
      a.noalias() += e;
  }

  template <class Expr>
  void accum_cols(int id, Eigen::Index start, const Expr& e) {
    if (!nodes_[static_cast<std::size_t>(id)].needs) return;
    Mat<S>& a = adjoints_[static_cast<std::size_t>(id)];
    const Mat<S>& v = value(id);
    if (a.size() == 0) a = Mat<S>::Zero(v.rows(), v.cols());
    a.middleCols(start, e.cols()).noalias() += e;
  }

  /// Propagates from a 1x1 root back to every contributing node.
  void backward(Var<S> root) {
    require_shape(root.tape == this, "backward: root belongs to another tape");
    const Mat<S>& rv = value(root.id);
    require_shape(rv.rows() == 1 && rv.cols() == 1, "backward: root must be a 1x1 scalar");
    adjoints_.assign(nodes_.size(), Mat<S>());
    adjoints_[static_cast<std::size_t>(root.id)] = Mat<S>::Ones(1, 1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.pull && adjoints_[static_cast<std::size_t>(i)].size() != 0)
        n.pull(*this, adjoints_[static_cast<std::size_t>(i)], i);
    }
  }

  /// Adjoint of a node after backward(); untouched nodes report zero.
  Mat<S> grad(Var<S> v) const {
    const Mat<S>& a = adjoints_[static_cast<std::size_t>(v.id)];
    if (a.size() == 0) {
      const Mat<S>& val = value(v.id);
      return Mat<S>::Zero(val.rows(), val.cols());
    }
    return a;
  }

  void reset() {
    nodes_.clear();
    adjoints_.clear();
  }

 private:
  struct Node {
    Mat<S> value;
    bool needs;
    Pull pull;
  };

  std::vector<Node> nodes_;
  std::vector<Mat<S>> adjoints_;
};

namespace detail {

template <class S>
Tape<S>& same_tape(Var<S> a, Var<S> b) {
  require_shape(a.tape != nullptr && a.tape == b.tape, "operands must share a tape");
  return *a.tape;
}

}  // namespace detail

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  Mat<S> out = matmul(t.value(a.id), t.value(b.id));
  const int ia = a.id, ib = b.id;
  const bool needs = t.needs_grad(ia) || t.needs_grad(ib);
  return t.emplace(std::move(out), needs,
                   [ia, ib](Tape<S>& t, const Mat<S>& adj, int) {
                     t.accum(ia, adj * t.value(ib).transpose());
                     t.accum(ib, t.value(ia).transpose() * adj);
                   });
}

/// a' * b without materializing the transpose.
template <class S>
Var<S> matmul_tn(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  require_shape(t.value(a.id).rows() == t.value(b.id).rows(),
                "matmul_tn: inner dimensions disagree");
  Mat<S> out = t.value(a.id).transpose() * t.value(b.id);
  const int ia = a.id, ib = b.id;
  const bool needs = t.needs_grad(ia) || t.needs_grad(ib);
  return t.emplace(std::move(out), needs,
                   [ia, ib](Tape<S>& t, const Mat<S>& adj, int) {
                     t.accum(ia, t.value(ib) * adj.transpose());
                     t.accum(ib, t.value(ia) * adj);
                   });
}

template <class S>
Var<S> operator+(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  require_shape(t.value(a.id).rows() == t.value(b.id).rows() &&
                    t.value(a.id).cols() == t.value(b.id).cols(),
                "add: shape mismatch");
  const int ia = a.id, ib = b.id;
  const bool needs = t.needs_grad(ia) || t.needs_grad(ib);
  return t.emplace(t.value(ia) + t.value(ib), needs,
                   [ia, ib](Tape<S>& t, const Mat<S>& adj, int) {
                     t.accum(ia, adj);
                     t.accum(ib, adj);
                   });
}

template <class S>
Var<S> operator-(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  require_shape(t.value(a.id).rows() == t.value(b.id).rows() &&
                    t.value(a.id).cols() == t.value(b.id).cols(),
                "sub: shape mismatch");
  const int ia = a.id, ib = b.id;
  const bool needs = t.needs_grad(ia) || t.needs_grad(ib);
  return t.emplace(t.value(ia) - t.value(ib), needs,
                   [ia, ib](Tape<S>& t, const Mat<S>& adj, int) {
                     t.accum(ia, adj);
                     t.accum(ib, -adj);
                   });
}

template <class S>
Var<S> transpose(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  return t.emplace(t.value(ia).transpose(), t.needs_grad(ia),
                   [ia](Tape<S>& t, const Mat<S>& adj, int) {
                     t.accum(ia, adj.transpose());
                   });
}

template <class S>
Var<S> scale(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  return t.emplace(t.value(ia) * c, t.needs_grad(ia),
                   [ia, c](Tape<S>& t, const Mat<S>& adj, int) {
                     t.accum(ia, adj * c);
                   });
}

/// Multiply by a learnable 1x1 scalar.
template <class S>
Var<S> scale_by(Var<S> a, Var<S> s) {
  Tape<S>& t = detail::same_tape(a, s);
  require_shape(t.value(s.id).size() == 1, "scale_by: scale must be 1x1");
  const int ia = a.id, is = s.id;
  const bool needs = t.needs_grad(ia) || t.needs_grad(is);
  return t.emplace(t.value(ia) * t.value(is)(0, 0), needs,
                   [ia, is](Tape<S>& t, const Mat<S>& adj, int) {
                     t.accum(ia, adj * t.value(is)(0, 0));
                     Mat<S> ds(1, 1);
                     ds(0, 0) = adj.cwiseProduct(t.value(ia)).sum();
                     t.accum(is, ds);
                   });
}

template <class S>
Var<S> add_scalar(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  return t.emplace((t.value(ia).array() + c).matrix(), t.needs_grad(ia),
                   [ia](Tape<S>& t, const Mat<S>& adj, int) { t.accum(ia, adj); });
}

/// Broadcast-add a column vector across every column.
template <class S>
Var<S> add_colvec(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  require_shape(t.value(b.id).cols() == 1 && t.value(b.id).rows() == t.value(a.id).rows(),
                "add_colvec: vector shape mismatch");
  const int ia = a.id, ib = b.id;
  const bool needs = t.needs_grad(ia) || t.needs_grad(ib);
  Mat<S> out = t.value(ia);
  out.colwise() += t.value(ib).col(0);
  return t.emplace(std::move(out), needs,
                   [ia, ib](Tape<S>& t, const Mat<S>& adj, int) {
                     t.accum(ia, adj);
                     t.accum(ib, adj.rowwise().sum());
                   });
}

template <class S>
Var<S> relu(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  return t.emplace(relu(t.value(ia)), t.needs_grad(ia),
                   [ia](Tape<S>& t, const Mat<S>& adj, int) {
                     // subgradient 0 at the kink
                     t.accum(ia, (t.value(ia).array() > S(0))
                                     .select(adj.array(), S(0))
                                     .matrix());
                   });
}

template <class S>
Var<S> softmax_cols(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  return t.emplace(softmax_cols(t.value(ia)), t.needs_grad(ia),
                   [ia](Tape<S>& t, const Mat<S>& adj, int self) {
                     const Mat<S>& s = t.value(self);
                     Mat<S> g(s.rows(), s.cols());
                     for (Eigen::Index j = 0; j < s.cols(); ++j) {
                       const S dot = adj.col(j).dot(s.col(j));
                       g.col(j) = s.col(j).cwiseProduct(
                           (adj.col(j).array() - dot).matrix());
                     }
                     t.accum(ia, g);
                   });
}

template <class S>
Var<S> logdet_posdef(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  Mat<S> out(1, 1);
  out(0, 0) = logdet_posdef(t.value(ia));
  return t.emplace(std::move(out), t.needs_grad(ia),
                   [ia](Tape<S>& t, const Mat<S>& adj, int) {
                     const Mat<S>& m = t.value(ia);
                     Mat<S> inv = m.llt().solve(Mat<S>::Identity(m.rows(), m.cols()));
                     t.accum(ia, adj(0, 0) * inv);
                   });
}

template <class S>
Var<S> sum(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  Mat<S> out(1, 1);
  out(0, 0) = t.value(ia).sum();
  return t.emplace(std::move(out), t.needs_grad(ia),
                   [ia](Tape<S>& t, const Mat<S>& adj, int) {
                     const Mat<S>& v = t.value(ia);
                     t.accum(ia, Mat<S>::Constant(v.rows(), v.cols(), adj(0, 0)));
                   });
}

template <class S>
Var<S> l1_norm(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  Mat<S> out(1, 1);
  out(0, 0) = t.value(ia).cwiseAbs().sum();
  return t.emplace(std::move(out), t.needs_grad(ia),
                   [ia](Tape<S>& t, const Mat<S>& adj, int) {
                     const auto sgn = t.value(ia).array().sign();
                     t.accum(ia, (adj(0, 0) * sgn).matrix());
                   });
}

/// Inner product with a fixed weight matrix; scalarizes any op for testing.
template <class S>
Var<S> dot_const(Var<S> a, Mat<S> w) {
  Tape<S>& t = *a.tape;
  require_shape(w.rows() == t.value(a.id).rows() && w.cols() == t.value(a.id).cols(),
                "dot_const: weight shape mismatch");
  const int ia = a.id;
  Mat<S> out(1, 1);
  out(0, 0) = t.value(ia).cwiseProduct(w).sum();
  return t.emplace(std::move(out), t.needs_grad(ia),
                   [ia, w = std::move(w)](Tape<S>& t, const Mat<S>& adj, int) {
                     t.accum(ia, adj(0, 0) * w);
                   });
}

template <class S>
Var<S> block_cols(Var<S> a, Eigen::Index start, Eigen::Index n) {
  Tape<S>& t = *a.tape;
  require_shape(start >= 0 && n >= 0 && start + n <= t.value(a.id).cols(),
                "block_cols: range out of bounds");
  const int ia = a.id;
  return t.emplace(t.value(ia).middleCols(start, n), t.needs_grad(ia),
                   [ia, start](Tape<S>& t, const Mat<S>& adj, int) {
                     t.accum_cols(ia, start, adj);
                   });
}

template <class S>
Var<S> concat_cols(Tape<S>& t, const std::vector<Var<S>>& parts) {
  require_shape(!parts.empty(), "concat_cols: no operands");
  Eigen::Index rows = t.value(parts[0].id).rows(), cols = 0;
  bool needs = false;
  for (const auto& p : parts) {
    require_shape(p.tape == &t, "concat_cols: operands must share a tape");
    require_shape(t.value(p.id).rows() == rows, "concat_cols: row mismatch");
    cols += t.value(p.id).cols();
    needs = needs || t.needs_grad(p.id);
  }
  Mat<S> out(rows, cols);
  Eigen::Index off = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  ids.reserve(parts.size());
  widths.reserve(parts.size());
  for (const auto& p : parts) {
    const Mat<S>& v = t.value(p.id);
    out.middleCols(off, v.cols()) = v;
    ids.push_back(p.id);
    widths.push_back(v.cols());
    off += v.cols();
  }
  return t.emplace(std::move(out), needs,
                   [ids, widths](Tape<S>& t, const Mat<S>& adj, int) {
                     Eigen::Index off = 0;
                     for (std::size_t k = 0; k < ids.size(); ++k) {
                       t.accum(ids[k], adj.middleCols(off, widths[k]));
                       off += widths[k];
                     }
                   });
}

namespace detail {

template <class S>
struct ColStats {
  Vec<S> mean, inv;  // per-column mean and 1/sqrt(var + eps)
};

template <class S>
ColStats<S> col_stats(const Mat<S>& x, S eps) {
  const auto d = static_cast<S>(x.rows());
  ColStats<S> st;
  st.mean = x.colwise().mean().transpose();
  st.inv.resize(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const S var = (x.col(j).array() - st.mean(j)).square().sum() / d;
    st.inv(j) = S(1) / std::sqrt(var + eps);
  }
  return st;
}

}  // namespace detail

/// Per-column standardization (zero mean, unit variance over rows) followed by
/// a learned elementwise affine. gamma and beta are d x 1.
template <class S>
Var<S> standardize_cols(Var<S> x, Var<S> gamma, Var<S> beta, S eps) {
  Tape<S>& t = detail::same_tape(x, gamma);
  detail::same_tape(gamma, beta);
  const Mat<S>& xv = t.value(x.id);
  require_shape(t.value(gamma.id).rows() == xv.rows() && t.value(gamma.id).cols() == 1 &&
                    t.value(beta.id).rows() == xv.rows() && t.value(beta.id).cols() == 1,
                "standardize_cols: affine shape mismatch");
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  const bool needs = t.needs_grad(ix) || t.needs_grad(ig) || t.needs_grad(ib);

  const auto st = detail::col_stats(xv, eps);
  Mat<S> out(xv.rows(), xv.cols());
  for (Eigen::Index j = 0; j < xv.cols(); ++j) {
    out.col(j) = ((xv.col(j).array() - st.mean(j)) * st.inv(j)) *
                     t.value(ig).col(0).array() +
                 t.value(ib).col(0).array();
  }
  return t.emplace(std::move(out), needs,
                   [ix, ig, ib, eps](Tape<S>& t, const Mat<S>& adj, int) {
                     const Mat<S>& xv = t.value(ix);
                     const auto st = detail::col_stats(xv, eps);
                     const auto d = static_cast<S>(xv.rows());
                     const auto& g = t.value(ig).col(0);
                     Mat<S> dx(xv.rows(), xv.cols());
                     Vec<S> dgamma = Vec<S>::Zero(xv.rows());
                     Vec<S> dbeta = Vec<S>::Zero(xv.rows());
                     for (Eigen::Index j = 0; j < xv.cols(); ++j) {
                       const auto xhat =
                           ((xv.col(j).array() - st.mean(j)) * st.inv(j)).eval();
                       const auto dxhat = (adj.col(j).array() * g.array()).eval();
                       const S m1 = dxhat.sum() / d;
                       const S m2 = (dxhat * xhat).sum() / d;
                       dx.col(j) = (st.inv(j) * (dxhat - m1 - xhat * m2)).matrix();
                       dgamma.array() += adj.col(j).array() * xhat;
                       dbeta += adj.col(j);
                     }
                     t.accum(ix, dx);
                     t.accum(ig, dgamma);
                     t.accum(ib, dbeta);
                   });
}

/// Mean over columns of label-smoothed cross-entropy; logits are C x B.
template <class S>
Var<S> smoothed_ce(Var<S> logits, std::vector<int> labels, S smoothing) {
  Tape<S>& t = *logits.tape;
  const Mat<S>& lv = t.value(logits.id);
  const auto nclass = lv.rows();
  require_shape(static_cast<Eigen::Index>(labels.size()) == lv.cols(),
                "smoothed_ce: one label per column required");
  if (smoothing < S(0) || smoothing >= S(1))
    throw ConfigError("smoothed_ce: smoothing must lie in [0, 1)");
  for (int y : labels)
    if (y < 0 || y >= nclass) throw DataError("smoothed_ce: label out of range");

  const S off = smoothing / static_cast<S>(nclass);
  const S on = (S(1) - smoothing) + off;
  S total = 0;
  for (Eigen::Index j = 0; j < lv.cols(); ++j) {
    const S mx = lv.col(j).maxCoeff();
    const S lse = mx + std::log((lv.col(j).array() - mx).exp().sum());
    S tgt = on * lv(labels[static_cast<std::size_t>(j)], j);
    for (Eigen::Index c = 0; c < nclass; ++c)
      if (c != labels[static_cast<std::size_t>(j)]) tgt += off * lv(c, j);
    total += lse - tgt;
  }
  Mat<S> out(1, 1);
  out(0, 0) = total / static_cast<S>(lv.cols());
  const int il = logits.id;
  return t.emplace(std::move(out), t.needs_grad(il),
                   [il, labels = std::move(labels), on, off](Tape<S>& t,
                                                             const Mat<S>& adj, int) {
                     const Mat<S>& lv = t.value(il);
                     Mat<S> g = softmax_cols(lv);
                     g.array() -= off;
                     for (Eigen::Index j = 0; j < lv.cols(); ++j)
                       g(labels[static_cast<std::size_t>(j)], j) -= on - off;
                     t.accum(il, g * (adj(0, 0) / static_cast<S>(lv.cols())));
                   });
}

}  // namespace crate
