// Reverse-mode automatic differentiation on dense row-major matrices.
//
// A Tape owns every intermediate Node of one forward pass in creation order,
// which is a valid topological order, so backward() is a single reverse sweep.
// Sequences are stored time-major: rows = timesteps, cols = channels.
// The scalar type is a template parameter; float for the model, double for
// the finite-difference oracles.

#pragma once

#include <Eigen/Dense>

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace ps {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MaskMat =
    Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// A named trainable parameter. Lives outside any tape; gradients accumulate
// across Tape::backward calls until zero_grad.
template <class S>
struct Param {
  std::string name;
  Mat<S> value;
  Mat<S> grad;

  Param() = default;
  Param(std::string n, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)), value(Mat<S>::Zero(rows, cols)),
        grad(Mat<S>::Zero(rows, cols)) {}

  Eigen::Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(); }
};

namespace ad {

template <class S>
class Tape;

template <class S>
struct Node {
  Mat<S> val;
  Mat<S> grad;                    // lazily allocated
  bool requires_grad = false;
  std::function<void(Node<S>&)> back;  // pulls this->grad into parents
  Param<S>* hooked = nullptr;          // leaf param to flush grads into

  bool has_grad() const { return grad.size() > 0; }
  void add_grad(const Mat<S>& g) {
    if (!requires_grad) return;
    if (!has_grad())
      grad = Mat<S>::Zero(val.rows(), val.cols());
    grad += g;
  }
};

template <class S>
struct Var {
  Node<S>* node = nullptr;
  Tape<S>* tape = nullptr;

  const Mat<S>& val() const { return node->val; }
  Eigen::Index rows() const { return node->val.rows(); }
  Eigen::Index cols() const { return node->val.cols(); }
  S scalar() const {
    assert(node->val.size() == 1);
    return node->val(0, 0);
  }
};

template <class S>
class Tape {
 public:
  Var<S> make(Mat<S> val, bool requires_grad) {
    nodes_.push_back(std::make_unique<Node<S>>());
    Node<S>* n = nodes_.back().get();
    n->val = std::move(val);
    n->requires_grad = requires_grad;
    return Var<S>{n, this};
  }

  // Constant leaf (no gradient tracked).
  Var<S> constant(const Mat<S>& m) { return make(m, false); }

  // Leaf bound to a parameter; backward() flushes into p.grad.
  Var<S> param(Param<S>& p) {
    Var<S> v = make(p.value, true);
    v.node->hooked = &p;
    return v;
  }

  void backward(Var<S> root) {
    if (root.node->val.size() != 1)
      throw std::invalid_argument("backward: root must be scalar");
    root.node->grad = Mat<S>::Ones(1, 1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<S>* n = it->get();
      if (!n->requires_grad || !n->has_grad()) continue;
      if (n->back) n->back(*n);
      if (n->hooked) n->hooked->grad += n->grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::unique_ptr<Node<S>>> nodes_;
};

namespace detail {
template <class S>
Var<S> unary(Var<S> a, Mat<S> val, std::function<void(Node<S>&, Node<S>&)> back) {
  Var<S> out = a.tape->make(std::move(val), a.node->requires_grad);
  if (out.node->requires_grad) {
    Node<S>* pa = a.node;
    out.node->back = [pa, back](Node<S>& self) { back(self, *pa); };
  }
  return out;
}

template <class S>
Var<S> binary(Var<S> a, Var<S> b, Mat<S> val,
              std::function<void(Node<S>&, Node<S>&, Node<S>&)> back) {
  bool rg = a.node->requires_grad || b.node->requires_grad;
  Var<S> out = a.tape->make(std::move(val), rg);
  if (rg) {
    Node<S>* pa = a.node;
    Node<S>* pb = b.node;
    out.node->back = [pa, pb, back](Node<S>& self) { back(self, *pa, *pb); };
  }
  return out;
}
}  // namespace detail

// ---- elementwise ----

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  return detail::binary<S>(a, b, a.val() + b.val(),
                           [](Node<S>& o, Node<S>& x, Node<S>& y) {
                             x.add_grad(o.grad);
                             y.add_grad(o.grad);
                           });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  return detail::binary<S>(a, b, a.val() - b.val(),
                           [](Node<S>& o, Node<S>& x, Node<S>& y) {
                             x.add_grad(o.grad);
                             y.add_grad(Mat<S>(-o.grad));
                           });
}

template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
  return detail::binary<S>(a, b, a.val().cwiseProduct(b.val()),
                           [](Node<S>& o, Node<S>& x, Node<S>& y) {
                             x.add_grad(o.grad.cwiseProduct(y.val));
                             y.add_grad(o.grad.cwiseProduct(x.val));
                           });
}

// b is 1 x C, broadcast over the rows of a.
template <class S>
Var<S> add_rowvec(Var<S> a, Var<S> b) {
  assert(b.rows() == 1 && b.cols() == a.cols());
  Mat<S> v = a.val();
  v.rowwise() += Eigen::RowVector<S, Eigen::Dynamic>(b.val().row(0));
  return detail::binary<S>(a, b, std::move(v),
                           [](Node<S>& o, Node<S>& x, Node<S>& y) {
                             x.add_grad(o.grad);
                             y.add_grad(o.grad.colwise().sum());
                           });
}

// b is 1 x C, multiplied into every row of a.
template <class S>
Var<S> mul_rowvec(Var<S> a, Var<S> b) {
  assert(b.rows() == 1 && b.cols() == a.cols());
  Mat<S> v = a.val();
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    v.row(i) = v.row(i).cwiseProduct(b.val().row(0));
  return detail::binary<S>(a, b, std::move(v),
                           [](Node<S>& o, Node<S>& x, Node<S>& y) {
                             if (x.requires_grad) {
                               Mat<S> gx = o.grad;
                               for (Eigen::Index i = 0; i < gx.rows(); ++i)
                                 gx.row(i) = gx.row(i).cwiseProduct(y.val.row(0));
                               x.add_grad(gx);
                             }
                             if (y.requires_grad)
                               y.add_grad(o.grad.cwiseProduct(x.val).colwise().sum());
                           });
}

// Row-major reinterpretation to a new shape with the same element count.
template <class S>
Var<S> reshape(Var<S> a, Eigen::Index rows, Eigen::Index cols) {
  assert(rows * cols == a.val().size());
  Mat<S> v = Eigen::Map<const Mat<S>>(a.val().data(), rows, cols);
  return detail::unary<S>(a, std::move(v), [](Node<S>& o, Node<S>& x) {
    x.add_grad(Eigen::Map<const Mat<S>>(o.grad.data(), x.val.rows(),
                                        x.val.cols()));
  });
}

// log|det(W)| of a square matrix; computed in double precision.
// d/dW log|det W| = W^{-T}.
template <class S>
Var<S> logabsdet(Var<S> w) {
  assert(w.rows() == w.cols());
  Eigen::MatrixXd wd = w.val().template cast<double>();
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(wd);
  double ld = 0.0;
  const auto& u = lu.matrixLU();
  for (Eigen::Index i = 0; i < u.rows(); ++i) ld += std::log(std::abs(u(i, i)));
  Mat<S> v(1, 1);
  v(0, 0) = static_cast<S>(ld);
  Mat<S> inv_t = lu.inverse().transpose().template cast<S>();
  return detail::unary<S>(w, std::move(v),
                          [inv_t = std::move(inv_t)](Node<S>& o, Node<S>& x) {
                            x.add_grad(Mat<S>(o.grad(0, 0) * inv_t));
                          });
}

template <class S>
Var<S> scal_mul(Var<S> a, S c) {
  return detail::unary<S>(a, a.val() * c, [c](Node<S>& o, Node<S>& x) {
    x.add_grad(Mat<S>(o.grad * c));
  });
}

template <class S>
Var<S> scal_add(Var<S> a, S c) {
  return detail::unary<S>(a, Mat<S>(a.val().array() + c),
                          [](Node<S>& o, Node<S>& x) { x.add_grad(o.grad); });
}

template <class S>
Var<S> neg(Var<S> a) {
  return scal_mul(a, S(-1));
}

template <class S>
Var<S> relu(Var<S> a) {
  return detail::unary<S>(a, a.val().cwiseMax(S(0)), [](Node<S>& o, Node<S>& x) {
    x.add_grad((x.val.array() > S(0)).template cast<S>().matrix().cwiseProduct(o.grad));
  });
}

template <class S>
Var<S> sigmoid(Var<S> a) {
  Mat<S> v = (S(1) / (S(1) + (-a.val().array()).exp())).matrix();
  return detail::unary<S>(a, std::move(v), [](Node<S>& o, Node<S>& x) {
    Mat<S> s = o.val;
    x.add_grad(o.grad.cwiseProduct((s.array() * (S(1) - s.array())).matrix()));
  });
}

template <class S>
Var<S> tanh_(Var<S> a) {
  return detail::unary<S>(a, a.val().array().tanh().matrix(),
                          [](Node<S>& o, Node<S>& x) {
                            x.add_grad(o.grad.cwiseProduct(
                                (S(1) - o.val.array().square()).matrix()));
                          });
}

template <class S>
Var<S> exp_(Var<S> a) {
  return detail::unary<S>(a, a.val().array().exp().matrix(),
                          [](Node<S>& o, Node<S>& x) {
                            x.add_grad(o.grad.cwiseProduct(o.val));
                          });
}

template <class S>
Var<S> log_(Var<S> a) {
  return detail::unary<S>(a, a.val().array().log().matrix(),
                          [](Node<S>& o, Node<S>& x) {
                            x.add_grad(o.grad.cwiseQuotient(x.val));
                          });
}

template <class S>
Var<S> square(Var<S> a) {
  return detail::unary<S>(a, a.val().array().square().matrix(),
                          [](Node<S>& o, Node<S>& x) {
                            x.add_grad(Mat<S>(S(2) * o.grad.cwiseProduct(x.val)));
                          });
}

template <class S>
Var<S> abs_(Var<S> a) {
  return detail::unary<S>(a, a.val().cwiseAbs(), [](Node<S>& o, Node<S>& x) {
    x.add_grad(o.grad.cwiseProduct(x.val.array().sign().matrix()));
  });
}

// Elementwise clamp; gradient passes only inside the interval.
template <class S>
Var<S> clamp(Var<S> a, S lo, S hi) {
  Mat<S> v = a.val().cwiseMax(lo).cwiseMin(hi);
  return detail::unary<S>(a, std::move(v), [lo, hi](Node<S>& o, Node<S>& x) {
    Mat<S> pass = ((x.val.array() > lo) && (x.val.array() < hi))
                      .template cast<S>()
                      .matrix();
    x.add_grad(o.grad.cwiseProduct(pass));
  });
}

// ---- matmul ----

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  return detail::binary<S>(a, b, a.val() * b.val(),
                           [](Node<S>& o, Node<S>& x, Node<S>& y) {
                             x.add_grad(o.grad * y.val.transpose());
                             y.add_grad(x.val.transpose() * o.grad);
                           });
}

// a * b^T
template <class S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  return detail::binary<S>(a, b, a.val() * b.val().transpose(),
                           [](Node<S>& o, Node<S>& x, Node<S>& y) {
                             x.add_grad(o.grad * y.val);
                             y.add_grad(o.grad.transpose() * x.val);
                           });
}

// ---- reductions ----

template <class S>
Var<S> sum_all(Var<S> a) {
  Mat<S> v(1, 1);
  v(0, 0) = a.val().sum();
  return detail::unary<S>(a, std::move(v), [](Node<S>& o, Node<S>& x) {
    x.add_grad(Mat<S>::Constant(x.val.rows(), x.val.cols(), o.grad(0, 0)));
  });
}

template <class S>
Var<S> mean_all(Var<S> a) {
  S inv = S(1) / S(a.val().size());
  return scal_mul(sum_all(a), inv);
}

// ---- shape ----

template <class S>
Var<S> slice_cols(Var<S> a, Eigen::Index start, Eigen::Index n) {
  return detail::unary<S>(a, a.val().middleCols(start, n),
                          [start, n](Node<S>& o, Node<S>& x) {
                            Mat<S> g = Mat<S>::Zero(x.val.rows(), x.val.cols());
                            g.middleCols(start, n) = o.grad;
                            x.add_grad(g);
                          });
}

template <class S>
Var<S> slice_rows(Var<S> a, Eigen::Index start, Eigen::Index n) {
  return detail::unary<S>(a, a.val().middleRows(start, n),
                          [start, n](Node<S>& o, Node<S>& x) {
                            Mat<S> g = Mat<S>::Zero(x.val.rows(), x.val.cols());
                            g.middleRows(start, n) = o.grad;
                            x.add_grad(g);
                          });
}

template <class S>
Var<S> concat_cols(Var<S> a, Var<S> b) {
  assert(a.rows() == b.rows());
  Mat<S> v(a.rows(), a.cols() + b.cols());
  v << a.val(), b.val();
  Eigen::Index ca = a.cols();
  return detail::binary<S>(a, b, std::move(v),
                           [ca](Node<S>& o, Node<S>& x, Node<S>& y) {
                             x.add_grad(o.grad.leftCols(ca));
                             y.add_grad(o.grad.rightCols(o.grad.cols() - ca));
                           });
}

template <class S>
Var<S> concat_rows(Var<S> a, Var<S> b) {
  assert(a.cols() == b.cols());
  Mat<S> v(a.rows() + b.rows(), a.cols());
  v << a.val(), b.val();
  Eigen::Index ra = a.rows();
  return detail::binary<S>(a, b, std::move(v),
                           [ra](Node<S>& o, Node<S>& x, Node<S>& y) {
                             x.add_grad(o.grad.topRows(ra));
                             y.add_grad(o.grad.bottomRows(o.grad.rows() - ra));
                           });
}

// out.row(i) = a.row(indices[i]); used for embedding lookup and length
// regulation. Indices may repeat.
template <class S>
Var<S> gather_rows(Var<S> a, std::vector<int> indices) {
  Mat<S> v(static_cast<Eigen::Index>(indices.size()), a.cols());
  for (std::size_t i = 0; i < indices.size(); ++i)
    v.row(static_cast<Eigen::Index>(i)) = a.val().row(indices[i]);
  return detail::unary<S>(
      a, std::move(v), [idx = std::move(indices)](Node<S>& o, Node<S>& x) {
        Mat<S> g = Mat<S>::Zero(x.val.rows(), x.val.cols());
        for (std::size_t i = 0; i < idx.size(); ++i)
          g.row(idx[i]) += o.grad.row(static_cast<Eigen::Index>(i));
        x.add_grad(g);
      });
}

template <class S>
Var<S> col_permute(Var<S> a, std::vector<int> perm) {
  assert(static_cast<Eigen::Index>(perm.size()) == a.cols());
  Mat<S> v(a.rows(), a.cols());
  for (std::size_t j = 0; j < perm.size(); ++j)
    v.col(static_cast<Eigen::Index>(j)) = a.val().col(perm[j]);
  return detail::unary<S>(
      a, std::move(v), [p = std::move(perm)](Node<S>& o, Node<S>& x) {
        Mat<S> g = Mat<S>::Zero(x.val.rows(), x.val.cols());
        for (std::size_t j = 0; j < p.size(); ++j)
          g.col(p[j]) += o.grad.col(static_cast<Eigen::Index>(j));
        x.add_grad(g);
      });
}

// ---- segment ops over rows (word pooling, duration aggregation) ----

template <class S>
Var<S> segment_sum_rows(Var<S> a, const std::vector<int>& seg, int n_seg) {
  assert(static_cast<Eigen::Index>(seg.size()) == a.rows());
  Mat<S> v = Mat<S>::Zero(n_seg, a.cols());
  for (std::size_t i = 0; i < seg.size(); ++i)
    v.row(seg[i]) += a.val().row(static_cast<Eigen::Index>(i));
  return detail::unary<S>(a, std::move(v),
                          [s = seg](Node<S>& o, Node<S>& x) {
                            Mat<S> g(x.val.rows(), x.val.cols());
                            for (std::size_t i = 0; i < s.size(); ++i)
                              g.row(static_cast<Eigen::Index>(i)) = o.grad.row(s[i]);
                            x.add_grad(g);
                          });
}

template <class S>
Var<S> segment_mean_rows(Var<S> a, const std::vector<int>& seg, int n_seg) {
  std::vector<S> inv(static_cast<std::size_t>(n_seg), S(0));
  for (int s : seg) inv[static_cast<std::size_t>(s)] += S(1);
  for (auto& c : inv) c = c > S(0) ? S(1) / c : S(0);
  Var<S> sums = segment_sum_rows(a, seg, n_seg);
  Mat<S> v = sums.val();
  for (int s = 0; s < n_seg; ++s) v.row(s) *= inv[static_cast<std::size_t>(s)];
  return detail::unary<S>(sums, std::move(v),
                          [inv](Node<S>& o, Node<S>& x) {
                            Mat<S> g = o.grad;
                            for (Eigen::Index s = 0; s < g.rows(); ++s)
                              g.row(s) *= inv[static_cast<std::size_t>(s)];
                            x.add_grad(g);
                          });
}

// ---- softmax with hard masking ----

// Row-wise softmax over entries where mask != 0; masked entries are exactly
// zero in the output. Every row must have at least one permitted entry.
template <class S>
Var<S> masked_softmax_rows(Var<S> a, const MaskMat& mask) {
  assert(mask.rows() == a.rows() && mask.cols() == a.cols());
  Mat<S> v(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    S mx = -std::numeric_limits<S>::infinity();
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      if (mask(i, j) && a.val()(i, j) > mx) mx = a.val()(i, j);
    if (!std::isfinite(mx))
      throw std::invalid_argument("masked_softmax_rows: empty mask row " +
                                  std::to_string(i));
    S denom = S(0);
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      if (mask(i, j)) {
        v(i, j) = std::exp(a.val()(i, j) - mx);
        denom += v(i, j);
      } else {
        v(i, j) = S(0);
      }
    }
    v.row(i) /= denom;
  }
  return detail::unary<S>(a, std::move(v), [](Node<S>& o, Node<S>& x) {
    // dL/dx = p .* (g - sum(g .* p) per row); masked entries have p == 0.
    Mat<S> g(o.val.rows(), o.val.cols());
    for (Eigen::Index i = 0; i < o.val.rows(); ++i) {
      S dot = o.grad.row(i).dot(o.val.row(i));
      g.row(i) = o.val.row(i).cwiseProduct(
          (o.grad.row(i).array() - dot).matrix());
    }
    x.add_grad(g);
  });
}

// ---- layer norm (per-row over channels, learnable gain/bias 1 x C) ----

template <class S>
Var<S> layer_norm(Var<S> x, Var<S> gain, Var<S> bias, S eps = S(1e-5)) {
  Eigen::Index T = x.rows(), C = x.cols();
  Mat<S> xhat(T, C);
  std::vector<S> inv_std(static_cast<std::size_t>(T));
  for (Eigen::Index i = 0; i < T; ++i) {
    S mu = x.val().row(i).mean();
    S var = (x.val().row(i).array() - mu).square().mean();
    S is = S(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    xhat.row(i) = ((x.val().row(i).array() - mu) * is).matrix();
  }
  Mat<S> v(T, C);
  for (Eigen::Index i = 0; i < T; ++i)
    v.row(i) = xhat.row(i).cwiseProduct(gain.val().row(0)) + bias.val().row(0);

  bool rg = x.node->requires_grad || gain.node->requires_grad ||
            bias.node->requires_grad;
  Var<S> out = x.tape->make(std::move(v), rg);
  if (rg) {
    Node<S>* px = x.node;
    Node<S>* pg = gain.node;
    Node<S>* pb = bias.node;
    out.node->back = [px, pg, pb, xhat = std::move(xhat),
                      inv_std = std::move(inv_std)](Node<S>& self) {
      Eigen::Index T = xhat.rows(), C = xhat.cols();
      pb->add_grad(self.grad.colwise().sum());
      pg->add_grad(self.grad.cwiseProduct(xhat).colwise().sum());
      if (px->requires_grad) {
        Mat<S> gx(T, C);
        for (Eigen::Index i = 0; i < T; ++i) {
          auto gy = self.grad.row(i).cwiseProduct(pg->val.row(0));
          S m1 = gy.mean();
          S m2 = gy.cwiseProduct(xhat.row(i)).mean();
          gx.row(i) = ((gy.array() - m1 - xhat.row(i).array() * m2) *
                       inv_std[static_cast<std::size_t>(i)])
                          .matrix();
        }
        px->add_grad(gx);
      }
    };
  }
  return out;
}

// ---- 1D convolutions along the time axis ----
//
// x: T x Cin. w: (k*Cin) x Cout, laid out as k stacked Cin x Cout blocks.
// b: 1 x Cout. Output row t = sum_j x.row(stride*t + j - pad) * W_j + b.

template <class S>
Var<S> conv1d(Var<S> x, Var<S> w, Var<S> b, int k, int stride = 1, int pad = -1) {
  if (pad < 0) pad = (k - 1) / 2;
  Eigen::Index T = x.rows(), cin = x.cols(), cout = w.cols();
  assert(w.rows() == k * cin);
  Eigen::Index To = (T + 2 * pad - k) / stride + 1;
  Mat<S> v(To, cout);
  v.rowwise() = Eigen::RowVector<S, Eigen::Dynamic>(b.val().row(0));
  for (int j = 0; j < k; ++j) {
    auto Wj = w.val().middleRows(static_cast<Eigen::Index>(j) * cin, cin);
    if (stride == 1) {
      Eigen::Index lo = std::max<Eigen::Index>(0, pad - j);
      Eigen::Index hi = std::min<Eigen::Index>(To - 1, T - 1 + pad - j);
      if (lo > hi) continue;
      v.middleRows(lo, hi - lo + 1).noalias() +=
          x.val().middleRows(lo + j - pad, hi - lo + 1) * Wj;
    } else {
      for (Eigen::Index t = 0; t < To; ++t) {
        Eigen::Index src = stride * t + j - pad;
        if (src >= 0 && src < T) v.row(t).noalias() += x.val().row(src) * Wj;
      }
    }
  }
  bool rg = x.node->requires_grad || w.node->requires_grad ||
            b.node->requires_grad;
  Var<S> out = x.tape->make(std::move(v), rg);
  if (rg) {
    Node<S>* px = x.node;
    Node<S>* pw = w.node;
    Node<S>* pb = b.node;
    out.node->back = [px, pw, pb, k, stride, pad, T, cin](Node<S>& self) {
      Eigen::Index To = self.val.rows();
      pb->add_grad(self.grad.colwise().sum());
      Mat<S> gx = Mat<S>::Zero(T, cin);
      Mat<S> gw = Mat<S>::Zero(pw->val.rows(), pw->val.cols());
      for (int j = 0; j < k; ++j) {
        auto Wj = pw->val.middleRows(static_cast<Eigen::Index>(j) * cin, cin);
        auto gWj = gw.middleRows(static_cast<Eigen::Index>(j) * cin, cin);
        if (stride == 1) {
          Eigen::Index lo = std::max<Eigen::Index>(0, pad - j);
          Eigen::Index hi = std::min<Eigen::Index>(To - 1, T - 1 + pad - j);
          if (lo > hi) continue;
          auto g = self.grad.middleRows(lo, hi - lo + 1);
          auto xs = px->val.middleRows(lo + j - pad, hi - lo + 1);
          gx.middleRows(lo + j - pad, hi - lo + 1).noalias() +=
              g * Wj.transpose();
          gWj.noalias() += xs.transpose() * g;
        } else {
          for (Eigen::Index t = 0; t < To; ++t) {
            Eigen::Index src = stride * t + j - pad;
            if (src < 0 || src >= T) continue;
            gx.row(src).noalias() += self.grad.row(t) * Wj.transpose();
            gWj.noalias() += px->val.row(src).transpose() * self.grad.row(t);
          }
        }
      }
      if (px->requires_grad) px->add_grad(gx);
      pw->add_grad(gw);
    };
  }
  return out;
}

// Transposed conv: output row s*t + j - pad accumulates x.row(t) * W_j.
// With k = 2*stride and pad = stride/2 the output has exactly stride*T rows.
template <class S>
Var<S> conv_transpose1d(Var<S> x, Var<S> w, Var<S> b, int k, int stride,
                        int pad) {
  Eigen::Index T = x.rows(), cin = x.cols(), cout = w.cols();
  assert(w.rows() == k * cin);
  Eigen::Index To = stride * T;
  Mat<S> v(To, cout);
  v.rowwise() = Eigen::RowVector<S, Eigen::Dynamic>(b.val().row(0));
  for (int j = 0; j < k; ++j) {
    auto Wj = w.val().middleRows(static_cast<Eigen::Index>(j) * cin, cin);
    for (Eigen::Index t = 0; t < T; ++t) {
      Eigen::Index dst = stride * t + j - pad;
      if (dst >= 0 && dst < To) v.row(dst).noalias() += x.val().row(t) * Wj;
    }
  }
  bool rg = x.node->requires_grad || w.node->requires_grad ||
            b.node->requires_grad;
  Var<S> out = x.tape->make(std::move(v), rg);
  if (rg) {
    Node<S>* px = x.node;
    Node<S>* pw = w.node;
    Node<S>* pb = b.node;
    out.node->back = [px, pw, pb, k, stride, pad, T, cin](Node<S>& self) {
      Eigen::Index To = self.val.rows();
      pb->add_grad(self.grad.colwise().sum());
      Mat<S> gx = Mat<S>::Zero(T, cin);
      Mat<S> gw = Mat<S>::Zero(pw->val.rows(), pw->val.cols());
      for (int j = 0; j < k; ++j) {
        auto Wj = pw->val.middleRows(static_cast<Eigen::Index>(j) * cin, cin);
        auto gWj = gw.middleRows(static_cast<Eigen::Index>(j) * cin, cin);
        for (Eigen::Index t = 0; t < T; ++t) {
          Eigen::Index dst = stride * t + j - pad;
          if (dst < 0 || dst >= To) continue;
          gx.row(t).noalias() += self.grad.row(dst) * Wj.transpose();
          gWj.noalias() += px->val.row(t).transpose() * self.grad.row(dst);
        }
      }
      if (px->requires_grad) px->add_grad(gx);
      pw->add_grad(gw);
    };
  }
  return out;
}

// ---- relative-position attention bias ----
//
// bias[i,j] = q.row(i) . rel.row(clip(j - i + window, 0, 2*window)), where
// q is T x dh and rel is (2*window+1) x dh.
template <class S>
Var<S> rel_pos_bias(Var<S> q, Var<S> rel, int window, Eigen::Index Tk) {
  Eigen::Index Tq = q.rows();
  int n = 2 * window;
  Mat<S> v(Tq, Tk);
  for (Eigen::Index i = 0; i < Tq; ++i)
    for (Eigen::Index j = 0; j < Tk; ++j) {
      int idx = std::clamp<int>(static_cast<int>(j - i) + window, 0, n);
      v(i, j) = q.val().row(i).dot(rel.val().row(idx));
    }
  return detail::binary<S>(
      q, rel, std::move(v),
      [window, n, Tk](Node<S>& o, Node<S>& pq, Node<S>& pr) {
        Mat<S> gq = Mat<S>::Zero(pq.val.rows(), pq.val.cols());
        Mat<S> gr = Mat<S>::Zero(pr.val.rows(), pr.val.cols());
        for (Eigen::Index i = 0; i < o.val.rows(); ++i)
          for (Eigen::Index j = 0; j < Tk; ++j) {
            int idx = std::clamp<int>(static_cast<int>(j - i) + window, 0, n);
            gq.row(i) += o.grad(i, j) * pr.val.row(idx);
            gr.row(idx) += o.grad(i, j) * pq.val.row(i);
          }
        if (pq.requires_grad) pq.add_grad(gq);
        if (pr.requires_grad) pr.add_grad(gr);
      });
}

// Inverted dropout with an externally supplied 0/1 mask.
template <class S>
Var<S> dropout(Var<S> x, const Mat<S>& keep_mask, S keep_prob) {
  Mat<S> scaled = keep_mask / keep_prob;
  Mat<S> v = x.val().cwiseProduct(scaled);
  return detail::unary<S>(x, std::move(v),
                          [m = std::move(scaled)](Node<S>& o, Node<S>& px) {
                            px.add_grad(o.grad.cwiseProduct(m));
                          });
}

}  // namespace ad
}  // namespace ps
