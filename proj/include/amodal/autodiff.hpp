#pragma once

#include "amodal/common.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

// Reverse-mode autodiff over dense Eigen matrices. Graphs are built per forward
// pass; backward() walks nodes in reverse creation order (parents are always
// created before children, so creation order is a topological order). Nodes
// whose inputs carry no gradient store neither parents nor a backward closure,
// which makes frozen-model inference allocation-light and reentrant.
namespace amodal::ad {

template <typename S>
struct Node {
  Mat<S> value;
  Mat<S> grad;
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node<S>>> parents;
  std::function<void(Node<S>&)> backfn;

  int rows() const { return static_cast<int>(value.rows()); }
  int cols() const { return static_cast<int>(value.cols()); }
};

template <typename S>
using Var = std::shared_ptr<Node<S>>;

namespace detail {
inline std::uint64_t next_id() {
  static thread_local std::uint64_t counter = 0;
  return ++counter;
}
}  // namespace detail

template <typename S>
Var<S> constant(Mat<S> value) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  n->id = detail::next_id();
  return n;
}

template <typename S>
Var<S> parameter(Mat<S> value) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  n->grad = Mat<S>::Zero(n->value.rows(), n->value.cols());
  n->requires_grad = true;
  n->id = detail::next_id();
  return n;
}

template <typename S>
Var<S> make_op(Mat<S> value, std::vector<Var<S>> parents, std::function<void(Node<S>&)> backfn) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  n->id = detail::next_id();
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  if (needs) {
    n->requires_grad = true;
    n->grad = Mat<S>::Zero(n->value.rows(), n->value.cols());
    n->parents = std::move(parents);
    n->backfn = std::move(backfn);
  }
  return n;
}

// Accumulates into parameter grads; intermediate grads are zero-initialized at
// creation, so repeated backward calls on fresh graphs compose per batch.
template <typename S>
void backward(const Var<S>& loss) {
  if (loss->value.size() != 1) throw ValidationError("backward: loss must be 1x1");
  if (!loss->requires_grad) return;
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<Node<S>*> stack{loss.get()};
  while (!stack.empty()) {
    Node<S>* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const Node<S>* a, const Node<S>* b) { return a->id > b->id; });
  loss->grad(0, 0) += S(1);
  for (Node<S>* n : order)
    if (n->backfn) n->backfn(*n);
}

template <typename S>
Var<S> detach(const Var<S>& a) {
  return constant<S>(a->value);
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  if (a->rows() != b->rows() || a->cols() != b->cols())
    throw ValidationError("add: shape mismatch");
  return make_op<S>(a->value + b->value, {a, b}, [](Node<S>& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->grad += n.grad;
    if (n.parents[1]->requires_grad) n.parents[1]->grad += n.grad;
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  if (a->rows() != b->rows() || a->cols() != b->cols())
    throw ValidationError("sub: shape mismatch");
  return make_op<S>(a->value - b->value, {a, b}, [](Node<S>& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->grad += n.grad;
    if (n.parents[1]->requires_grad) n.parents[1]->grad -= n.grad;
  });
}

template <typename S>
Var<S> cmul(const Var<S>& a, const Var<S>& b) {
  if (a->rows() != b->rows() || a->cols() != b->cols())
    throw ValidationError("cmul: shape mismatch");
  return make_op<S>(a->value.cwiseProduct(b->value), {a, b}, [](Node<S>& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad += n.grad.cwiseProduct(n.parents[1]->value);
    if (n.parents[1]->requires_grad)
      n.parents[1]->grad += n.grad.cwiseProduct(n.parents[0]->value);
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S c) {
  return make_op<S>(a->value * c, {a}, [c](Node<S>& n) { n.parents[0]->grad += c * n.grad; });
}

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  if (a->cols() != b->rows()) throw ValidationError("matmul: inner dim mismatch");
  return make_op<S>(a->value * b->value, {a, b}, [](Node<S>& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad.noalias() += n.grad * n.parents[1]->value.transpose();
    if (n.parents[1]->requires_grad)
      n.parents[1]->grad.noalias() += n.parents[0]->value.transpose() * n.grad;
  });
}

template <typename S>
Var<S> transpose(const Var<S>& a) {
  return make_op<S>(a->value.transpose(), {a},
                    [](Node<S>& n) { n.parents[0]->grad += n.grad.transpose(); });
}

// y = a with a 1 x cols bias row added to every row
template <typename S>
Var<S> add_row_broadcast(const Var<S>& a, const Var<S>& bias) {
  if (bias->rows() != 1 || bias->cols() != a->cols())
    throw ValidationError("add_row_broadcast: bias must be 1 x cols");
  Mat<S> y = a->value;
  y.rowwise() += bias->value.row(0);
  return make_op<S>(std::move(y), {a, bias}, [](Node<S>& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->grad += n.grad;
    if (n.parents[1]->requires_grad) n.parents[1]->grad += n.grad.colwise().sum();
  });
}

template <typename S>
Var<S> relu(const Var<S>& a) {
  return make_op<S>(a->value.cwiseMax(S(0)), {a}, [](Node<S>& n) {
    n.parents[0]->grad.array() +=
        n.grad.array() * (n.parents[0]->value.array() > S(0)).template cast<S>();
  });
}

template <typename S>
Var<S> sigmoid(const Var<S>& a) {
  Mat<S> y = ((-a->value.array()).exp() + S(1)).inverse().matrix();
  return make_op<S>(std::move(y), {a}, [](Node<S>& n) {
    n.parents[0]->grad.array() +=
        n.grad.array() * n.value.array() * (S(1) - n.value.array());
  });
}

template <typename S>
Var<S> softmax_rows(const Var<S>& a) {
  Mat<S> y = a->value;
  for (int r = 0; r < y.rows(); ++r) {
    Eigen::Array<S, 1, Eigen::Dynamic> row = y.row(r).array();
    row -= row.maxCoeff();
    row = row.exp();
    y.row(r) = (row / row.sum()).matrix();
  }
  return make_op<S>(std::move(y), {a}, [](Node<S>& n) {
    for (int r = 0; r < n.value.rows(); ++r) {
      S dot = n.grad.row(r).dot(n.value.row(r));
      n.parents[0]->grad.row(r).array() +=
          n.value.row(r).array() * (n.grad.row(r).array() - dot);
    }
  });
}

// Per-row layer norm with learned gain/bias (both 1 x cols).
template <typename S>
Var<S> layer_norm_rows(const Var<S>& x, const Var<S>& gain, const Var<S>& bias,
                       S eps = S(1e-5)) {
  const int n = x->rows(), c = x->cols();
  if (gain->rows() != 1 || gain->cols() != c || bias->rows() != 1 || bias->cols() != c)
    throw ValidationError("layer_norm_rows: gain/bias must be 1 x cols");
  Mat<S> xhat(n, c);
  Vec<S> inv_std(n);
  for (int r = 0; r < n; ++r) {
    S mu = x->value.row(r).mean();
    S var = (x->value.row(r).array() - mu).square().mean();
    S is = S(1) / std::sqrt(var + eps);
    inv_std(r) = is;
    xhat.row(r) = ((x->value.row(r).array() - mu) * is).matrix();
  }
  Mat<S> y = (xhat.array().rowwise() * gain->value.row(0).array()).matrix();
  y.rowwise() += bias->value.row(0);
  return make_op<S>(std::move(y), {x, gain, bias},
                    [xhat, inv_std](Node<S>& n) {
                      const int c = n.cols();
                      if (n.parents[1]->requires_grad)
                        n.parents[1]->grad += n.grad.cwiseProduct(xhat).colwise().sum();
                      if (n.parents[2]->requires_grad)
                        n.parents[2]->grad += n.grad.colwise().sum();
                      if (!n.parents[0]->requires_grad) return;
                      for (int r = 0; r < n.rows(); ++r) {
                        Eigen::Array<S, 1, Eigen::Dynamic> dxhat =
                            n.grad.row(r).array() * n.parents[1]->value.row(0).array();
                        S m1 = dxhat.mean();
                        S m2 = (dxhat * xhat.row(r).array()).mean();
                        n.parents[0]->grad.row(r).array() +=
                            inv_std(r) * (dxhat - m1 - xhat.row(r).array() * m2);
                      }
                      (void)c;
                    });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ValidationError("concat_rows: empty");
  int rows = 0;
  const int cols = parts[0]->cols();
  for (const auto& p : parts) {
    if (p->cols() != cols) throw ValidationError("concat_rows: col mismatch");
    rows += p->rows();
  }
  Mat<S> y(rows, cols);
  int r0 = 0;
  for (const auto& p : parts) {
    y.middleRows(r0, p->rows()) = p->value;
    r0 += p->rows();
  }
  return make_op<S>(std::move(y), parts, [](Node<S>& n) {
    int r0 = 0;
    for (auto& p : n.parents) {
      if (p->requires_grad) p->grad += n.grad.middleRows(r0, p->value.rows());
      r0 += static_cast<int>(p->value.rows());
    }
  });
}

template <typename S>
Var<S> slice_rows(const Var<S>& a, int r0, int count) {
  if (r0 < 0 || r0 + count > a->rows()) throw ValidationError("slice_rows: out of range");
  return make_op<S>(a->value.middleRows(r0, count), {a}, [r0, count](Node<S>& n) {
    n.parents[0]->grad.middleRows(r0, count) += n.grad;
  });
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ValidationError("concat_cols: empty");
  const int rows = parts[0]->rows();
  int cols = 0;
  for (const auto& p : parts) {
    if (p->rows() != rows) throw ValidationError("concat_cols: row mismatch");
    cols += p->cols();
  }
  Mat<S> y(rows, cols);
  int c0 = 0;
  for (const auto& p : parts) {
    y.middleCols(c0, p->cols()) = p->value;
    c0 += p->cols();
  }
  return make_op<S>(std::move(y), parts, [](Node<S>& n) {
    int c0 = 0;
    for (auto& p : n.parents) {
      if (p->requires_grad) p->grad += n.grad.middleCols(c0, p->value.cols());
      c0 += static_cast<int>(p->value.cols());
    }
  });
}

// y.row(i) = table.row(idx[i])
template <typename S>
Var<S> gather_rows(const Var<S>& table, std::vector<int> idx) {
  Mat<S> y(static_cast<int>(idx.size()), table->cols());
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= table->rows())
      throw ValidationError("gather_rows: index out of range");
    y.row(static_cast<int>(i)) = table->value.row(idx[i]);
  }
  return make_op<S>(std::move(y), {table}, [idx = std::move(idx)](Node<S>& n) {
    for (size_t i = 0; i < idx.size(); ++i)
      n.parents[0]->grad.row(idx[i]) += n.grad.row(static_cast<int>(i));
  });
}

// y.row(i) = a.row(perm[i]); perm must be a permutation of [0, rows)
template <typename S>
Var<S> permute_rows(const Var<S>& a, std::vector<int> perm) {
  if (static_cast<int>(perm.size()) != a->rows())
    throw ValidationError("permute_rows: size mismatch");
  Mat<S> y(a->rows(), a->cols());
  for (int i = 0; i < a->rows(); ++i) y.row(i) = a->value.row(perm[i]);
  return make_op<S>(std::move(y), {a}, [perm = std::move(perm)](Node<S>& n) {
    for (int i = 0; i < n.rows(); ++i) n.parents[0]->grad.row(perm[i]) += n.grad.row(i);
  });
}

template <typename S>
Var<S> sum_all(const Var<S>& a) {
  Mat<S> y(1, 1);
  y(0, 0) = a->value.sum();
  return make_op<S>(std::move(y), {a}, [](Node<S>& n) {
    n.parents[0]->grad.array() += n.grad(0, 0);
  });
}

template <typename S>
Var<S> mean_all(const Var<S>& a) {
  Mat<S> y(1, 1);
  y(0, 0) = a->value.mean();
  return make_op<S>(std::move(y), {a}, [](Node<S>& n) {
    n.parents[0]->grad.array() += n.grad(0, 0) / S(n.parents[0]->value.size());
  });
}

// mean((a-b)^2) over all elements
template <typename S>
Var<S> mse(const Var<S>& a, const Var<S>& b) {
  if (a->rows() != b->rows() || a->cols() != b->cols())
    throw ValidationError("mse: shape mismatch");
  Mat<S> y(1, 1);
  y(0, 0) = (a->value - b->value).array().square().mean();
  return make_op<S>(std::move(y), {a, b}, [](Node<S>& n) {
    const S c = S(2) * n.grad(0, 0) / S(n.parents[0]->value.size());
    Mat<S> d = n.parents[0]->value - n.parents[1]->value;
    if (n.parents[0]->requires_grad) n.parents[0]->grad += c * d;
    if (n.parents[1]->requires_grad) n.parents[1]->grad -= c * d;
  });
}

// Stable mean binary cross-entropy on logits; targets are a constant matrix.
template <typename S>
Var<S> bce_with_logits(const Var<S>& logits, const Mat<S>& targets) {
  if (logits->rows() != targets.rows() || logits->cols() != targets.cols())
    throw ValidationError("bce_with_logits: shape mismatch");
  const auto x = logits->value.array();
  const auto t = targets.array();
  Mat<S> y(1, 1);
  y(0, 0) = (x.max(S(0)) - x * t + ((-x.abs()).exp() + S(1)).log()).mean();
  return make_op<S>(std::move(y), {logits}, [targets](Node<S>& n) {
    const S c = n.grad(0, 0) / S(targets.size());
    auto sig = ((-n.parents[0]->value.array()).exp() + S(1)).inverse();
    n.parents[0]->grad.array() += c * (sig - targets.array());
  });
}

// Weighted NLL over rows of a logit matrix: sum_r w_r * -log softmax(x_r)[t_r].
// Callers use w_r = 1/|selected| on selected rows for a masked mean.
template <typename S>
Var<S> cross_entropy_rows(const Var<S>& logits, std::vector<int> targets, Vec<S> weights) {
  const int n = logits->rows(), k = logits->cols();
  if (static_cast<int>(targets.size()) != n || weights.size() != n)
    throw ValidationError("cross_entropy_rows: size mismatch");
  Mat<S> probs(n, k);
  S loss = S(0);
  for (int r = 0; r < n; ++r) {
    if (targets[r] < 0 || targets[r] >= k)
      throw ValidationError("cross_entropy_rows: target out of range");
    Eigen::Array<S, 1, Eigen::Dynamic> row = logits->value.row(r).array();
    S mx = row.maxCoeff();
    Eigen::Array<S, 1, Eigen::Dynamic> e = (row - mx).exp();
    S z = e.sum();
    probs.row(r) = (e / z).matrix();
    if (weights(r) != S(0))
      loss += weights(r) * -(logits->value(r, targets[r]) - mx - std::log(z));
  }
  Mat<S> y(1, 1);
  y(0, 0) = loss;
  return make_op<S>(std::move(y), {logits},
                    [probs, targets = std::move(targets), weights](Node<S>& n) {
                      const S g = n.grad(0, 0);
                      for (int r = 0; r < probs.rows(); ++r) {
                        if (weights(r) == S(0)) continue;
                        n.parents[0]->grad.row(r) += g * weights(r) * probs.row(r);
                        n.parents[0]->grad(r, targets[r]) -= g * weights(r);
                      }
                    });
}

struct ConvSpec {
  int h = 0, w = 0;       // input spatial dims
  int cin = 0, cout = 0;  // channels
  int k = 3;              // square kernel
  int stride = 1;
  int pad = 1;

  int out_h() const { return (h + 2 * pad - k) / stride + 1; }
  int out_w() const { return (w + 2 * pad - k) / stride + 1; }
};

namespace detail {

// x is (h*w) x cin with row index r*w+c. Column order: (kr*k + kc)*cin + ci.
// Both matrices are column-major, so iterating (kr, kc, ci) outermost turns the
// inner work into dense column-segment copies.
template <typename S>
Mat<S> im2col(const Mat<S>& x, const ConvSpec& sp) {
  const int oh = sp.out_h(), ow = sp.out_w();
  Mat<S> cols = Mat<S>::Zero(oh * ow, sp.k * sp.k * sp.cin);
  for (int kr = 0; kr < sp.k; ++kr) {
    for (int kc = 0; kc < sp.k; ++kc) {
      // output columns whose sampled input column stays in range
      int oc_lo = 0, oc_hi = ow - 1;
      while (oc_lo < ow && oc_lo * sp.stride - sp.pad + kc < 0) ++oc_lo;
      while (oc_hi >= 0 && oc_hi * sp.stride - sp.pad + kc >= sp.w) --oc_hi;
      if (oc_lo > oc_hi) continue;
      for (int ci = 0; ci < sp.cin; ++ci) {
        const S* src = x.data() + static_cast<std::ptrdiff_t>(ci) * x.rows();
        S* dst = cols.data() +
                 static_cast<std::ptrdiff_t>((kr * sp.k + kc) * sp.cin + ci) * cols.rows();
        for (int orow = 0; orow < oh; ++orow) {
          const int ir = orow * sp.stride - sp.pad + kr;
          if (ir < 0 || ir >= sp.h) continue;
          const S* s = src + ir * sp.w + (oc_lo * sp.stride - sp.pad + kc);
          S* d = dst + orow * ow + oc_lo;
          if (sp.stride == 1) {
            std::copy(s, s + (oc_hi - oc_lo + 1), d);
          } else {
            for (int oc = oc_lo; oc <= oc_hi; ++oc) d[oc - oc_lo] = s[(oc - oc_lo) * sp.stride];
          }
        }
      }
    }
  }
  return cols;
}

template <typename S>
void col2im_accum(const Mat<S>& cols, const ConvSpec& sp, Mat<S>& dx) {
  const int oh = sp.out_h(), ow = sp.out_w();
  for (int kr = 0; kr < sp.k; ++kr) {
    for (int kc = 0; kc < sp.k; ++kc) {
      int oc_lo = 0, oc_hi = ow - 1;
      while (oc_lo < ow && oc_lo * sp.stride - sp.pad + kc < 0) ++oc_lo;
      while (oc_hi >= 0 && oc_hi * sp.stride - sp.pad + kc >= sp.w) --oc_hi;
      if (oc_lo > oc_hi) continue;
      for (int ci = 0; ci < sp.cin; ++ci) {
        S* dst = dx.data() + static_cast<std::ptrdiff_t>(ci) * dx.rows();
        const S* src = cols.data() +
                       static_cast<std::ptrdiff_t>((kr * sp.k + kc) * sp.cin + ci) * cols.rows();
        for (int orow = 0; orow < oh; ++orow) {
          const int ir = orow * sp.stride - sp.pad + kr;
          if (ir < 0 || ir >= sp.h) continue;
          S* d = dst + ir * sp.w + (oc_lo * sp.stride - sp.pad + kc);
          const S* s = src + orow * ow + oc_lo;
          if (sp.stride == 1) {
            for (int i = 0; i <= oc_hi - oc_lo; ++i) d[i] += s[i];
          } else {
            for (int oc = oc_lo; oc <= oc_hi; ++oc) d[(oc - oc_lo) * sp.stride] += s[oc - oc_lo];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x: (h*w) x cin, weight: (k*k*cin) x cout, bias: 1 x cout -> (oh*ow) x cout
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, const ConvSpec& sp) {
  if (x->rows() != sp.h * sp.w || x->cols() != sp.cin)
    throw ValidationError("conv2d: input shape mismatch");
  if (weight->rows() != sp.k * sp.k * sp.cin || weight->cols() != sp.cout)
    throw ValidationError("conv2d: weight shape mismatch");
  Mat<S> cols = detail::im2col(x->value, sp);
  Mat<S> y = cols * weight->value;
  y.rowwise() += bias->value.row(0);
  return make_op<S>(std::move(y), {x, weight, bias},
                    [cols = std::move(cols), sp](Node<S>& n) {
                      if (n.parents[1]->requires_grad)
                        n.parents[1]->grad.noalias() += cols.transpose() * n.grad;
                      if (n.parents[2]->requires_grad)
                        n.parents[2]->grad += n.grad.colwise().sum();
                      if (n.parents[0]->requires_grad) {
                        Mat<S> dcols = n.grad * n.parents[1]->value.transpose();
                        detail::col2im_accum(dcols, sp, n.parents[0]->grad);
                      }
                    });
}

// Nearest-neighbor 2x upsample of an (h*w) x c grid.
template <typename S>
Var<S> upsample2x(const Var<S>& x, int h, int w) {
  if (x->rows() != h * w) throw ValidationError("upsample2x: shape mismatch");
  const int oh = 2 * h, ow = 2 * w;
  Mat<S> y(oh * ow, x->cols());
  for (int r = 0; r < oh; ++r)
    for (int c = 0; c < ow; ++c) y.row(r * ow + c) = x->value.row((r / 2) * w + (c / 2));
  return make_op<S>(std::move(y), {x}, [h, w](Node<S>& n) {
    const int ow = 2 * w;
    for (int r = 0; r < 2 * h; ++r)
      for (int c = 0; c < ow; ++c)
        n.parents[0]->grad.row((r / 2) * w + (c / 2)) += n.grad.row(r * ow + c);
  });
}

// Area-average pooling by integer factor f over an (h*w) x c grid.
template <typename S>
Var<S> avgpool(const Var<S>& x, int h, int w, int f) {
  if (h % f != 0 || w % f != 0) throw ValidationError("avgpool: dims not divisible by factor");
  if (x->rows() != h * w) throw ValidationError("avgpool: shape mismatch");
  const int oh = h / f, ow = w / f;
  Mat<S> y = Mat<S>::Zero(oh * ow, x->cols());
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) y.row((r / f) * ow + (c / f)) += x->value.row(r * w + c);
  y /= S(f * f);
  return make_op<S>(std::move(y), {x}, [h, w, f](Node<S>& n) {
    const int ow = w / f;
    const S inv = S(1) / S(f * f);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        n.parents[0]->grad.row(r * w + c) += inv * n.grad.row((r / f) * ow + (c / f));
  });
}

}  // namespace amodal::ad
