#pragma once

#include "amodal/autodiff.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace amodal::nn {

using ad::Var;

template <typename S>
Mat<S> normal_init(Rng& rng, int rows, int cols, double stddev) {
  Mat<S> m(rows, cols);
  for (int c = 0; c < cols; ++c)
    for (int r = 0; r < rows; ++r) m(r, c) = static_cast<S>(rng.normal(0.0, stddev));
  return m;
}

template <typename S>
Mat<S> uniform_init(Rng& rng, int rows, int cols, double lo, double hi) {
  Mat<S> m(rows, cols);
  for (int c = 0; c < cols; ++c)
    for (int r = 0; r < rows; ++r) m(r, c) = static_cast<S>(rng.uniform(lo, hi));
  return m;
}

// Named parameter list: drives the optimizer, checkpoints and parameter-count
// diffs for the ablation contract.
template <typename S>
struct ParamRegistry {
  std::vector<std::pair<std::string, Var<S>>> items;

  Var<S> add(const std::string& name, Mat<S> value) {
    auto p = ad::parameter<S>(std::move(value));
    items.emplace_back(name, p);
    return p;
  }
  void merge(const ParamRegistry<S>& other, const std::string& prefix) {
    for (const auto& [name, var] : other.items) items.emplace_back(prefix + name, var);
  }
  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& [name, var] : items) n += var->value.size();
    return n;
  }
  void zero_grad() {
    for (auto& [name, var] : items) var->grad.setZero();
  }
  Var<S> find(const std::string& name) const {
    for (const auto& [n, var] : items)
      if (n == name) return var;
    throw ValidationError("ParamRegistry: no parameter named " + name);
  }
};

template <typename S>
struct Dense {
  Var<S> W, b;

  Dense() = default;
  Dense(ParamRegistry<S>& reg, const std::string& name, int in, int out, Rng& rng,
        double stddev = 0.02) {
    W = reg.add(name + ".W", normal_init<S>(rng, in, out, stddev));
    b = reg.add(name + ".b", Mat<S>::Zero(1, out));
  }
  Var<S> forward(const Var<S>& x) const {
    return ad::add_row_broadcast(ad::matmul(x, W), b);
  }
};

template <typename S>
struct LayerNorm {
  Var<S> gain, bias;

  LayerNorm() = default;
  LayerNorm(ParamRegistry<S>& reg, const std::string& name, int dim) {
    gain = reg.add(name + ".g", Mat<S>::Ones(1, dim));
    bias = reg.add(name + ".b", Mat<S>::Zero(1, dim));
  }
  Var<S> forward(const Var<S>& x) const { return ad::layer_norm_rows(x, gain, bias); }
};

template <typename S>
struct Conv {
  Var<S> W, b;
  int cin = 0, cout = 0, k = 3, stride = 1, pad = 1;

  Conv() = default;
  Conv(ParamRegistry<S>& reg, const std::string& name, int cin_, int cout_, int k_, int stride_,
       Rng& rng)
      : cin(cin_), cout(cout_), k(k_), stride(stride_), pad(k_ / 2) {
    const double stddev = std::sqrt(2.0 / (k * k * cin));
    W = reg.add(name + ".W", normal_init<S>(rng, k * k * cin, cout, stddev));
    b = reg.add(name + ".b", Mat<S>::Zero(1, cout));
  }
  Var<S> forward(const Var<S>& x, int h, int w) const {
    ad::ConvSpec sp;
    sp.h = h;
    sp.w = w;
    sp.cin = cin;
    sp.cout = cout;
    sp.k = k;
    sp.stride = stride;
    sp.pad = pad;
    return ad::conv2d(x, W, b, sp);
  }
};

// Contiguous row ranges that attend only within themselves.
using AttnGroups = std::vector<std::pair<int, int>>;

// Fused block-diagonal multi-head self-attention. One graph node regardless of
// group count, which keeps the temporal layers (many tiny groups) cheap.
template <typename S>
Var<S> grouped_self_attention(const Var<S>& x, const Var<S>& Wq, const Var<S>& bq,
                              const Var<S>& Wk, const Var<S>& bk, const Var<S>& Wv,
                              const Var<S>& bv, const Var<S>& Wo, const Var<S>& bo,
                              AttnGroups groups, int heads) {
  const int d = x->cols();
  if (d % heads != 0) throw ValidationError("attention: dim not divisible by heads");
  const int dh = d / heads;
  const S inv_sqrt = S(1) / std::sqrt(S(dh));

  struct GroupCache {
    Mat<S> Q, K, V, O;              // m x d
    std::vector<Mat<S>> P;          // per head, m x m
  };
  auto caches = std::make_shared<std::vector<GroupCache>>();
  caches->reserve(groups.size());

  Mat<S> out(x->rows(), d);
  for (const auto& [start, len] : groups) {
    if (start < 0 || start + len > x->rows())
      throw ValidationError("attention: group out of range");
    GroupCache gc;
    const auto xg = x->value.middleRows(start, len);
    gc.Q = xg * Wq->value;
    gc.Q.rowwise() += bq->value.row(0);
    gc.K = xg * Wk->value;
    gc.K.rowwise() += bk->value.row(0);
    gc.V = xg * Wv->value;
    gc.V.rowwise() += bv->value.row(0);
    gc.O.resize(len, d);
    gc.P.resize(heads);
    for (int h = 0; h < heads; ++h) {
      Mat<S> s = gc.Q.middleCols(h * dh, dh) * gc.K.middleCols(h * dh, dh).transpose();
      s *= inv_sqrt;
      for (int r = 0; r < len; ++r) {
        Eigen::Array<S, 1, Eigen::Dynamic> row = s.row(r).array();
        row -= row.maxCoeff();
        row = row.exp();
        s.row(r) = (row / row.sum()).matrix();
      }
      gc.P[h] = s;
      gc.O.middleCols(h * dh, dh).noalias() = s * gc.V.middleCols(h * dh, dh);
    }
    out.middleRows(start, len).noalias() = gc.O * Wo->value;
    out.middleRows(start, len).rowwise() += bo->value.row(0);
    caches->push_back(std::move(gc));
  }

  return ad::make_op<S>(
      std::move(out), {x, Wq, bq, Wk, bk, Wv, bv, Wo, bo},
      [caches, groups = std::move(groups), heads, dh, inv_sqrt](ad::Node<S>& n) {
        auto& px = n.parents[0];
        auto& pWq = n.parents[1];
        auto& pbq = n.parents[2];
        auto& pWk = n.parents[3];
        auto& pbk = n.parents[4];
        auto& pWv = n.parents[5];
        auto& pbv = n.parents[6];
        auto& pWo = n.parents[7];
        auto& pbo = n.parents[8];
        for (size_t gi = 0; gi < groups.size(); ++gi) {
          const auto [start, len] = groups[gi];
          const GroupCache& gc = (*caches)[gi];
          const auto dout = n.grad.middleRows(start, len);
          const auto xg = px->value.middleRows(start, len);
          if (pWo->requires_grad) pWo->grad.noalias() += gc.O.transpose() * dout;
          if (pbo->requires_grad) pbo->grad += dout.colwise().sum();
          Mat<S> dO = dout * pWo->value.transpose();
          Mat<S> dQ(len, gc.Q.cols()), dK(len, gc.K.cols()), dV(len, gc.V.cols());
          for (int h = 0; h < heads; ++h) {
            const auto Ph = gc.P[h];
            const auto dOh = dO.middleCols(h * dh, dh);
            Mat<S> dP = dOh * gc.V.middleCols(h * dh, dh).transpose();
            dV.middleCols(h * dh, dh).noalias() = Ph.transpose() * dOh;
            // softmax rows backward
            Mat<S> dS(len, len);
            for (int r = 0; r < len; ++r) {
              S dot = dP.row(r).dot(Ph.row(r));
              dS.row(r) = (Ph.row(r).array() * (dP.row(r).array() - dot)).matrix();
            }
            dS *= inv_sqrt;
            dQ.middleCols(h * dh, dh).noalias() = dS * gc.K.middleCols(h * dh, dh);
            dK.middleCols(h * dh, dh).noalias() = dS.transpose() * gc.Q.middleCols(h * dh, dh);
          }
          if (pWq->requires_grad) pWq->grad.noalias() += xg.transpose() * dQ;
          if (pbq->requires_grad) pbq->grad += dQ.colwise().sum();
          if (pWk->requires_grad) pWk->grad.noalias() += xg.transpose() * dK;
          if (pbk->requires_grad) pbk->grad += dK.colwise().sum();
          if (pWv->requires_grad) pWv->grad.noalias() += xg.transpose() * dV;
          if (pbv->requires_grad) pbv->grad += dV.colwise().sum();
          if (px->requires_grad)
            px->grad.middleRows(start, len).noalias() +=
                dQ * pWq->value.transpose() + dK * pWk->value.transpose() +
                dV * pWv->value.transpose();
        }
      });
}

template <typename S>
struct SelfAttention {
  Var<S> Wq, bq, Wk, bk, Wv, bv, Wo, bo;
  int heads = 4;

  SelfAttention() = default;
  SelfAttention(ParamRegistry<S>& reg, const std::string& name, int dim, int heads_, Rng& rng)
      : heads(heads_) {
    const double stddev = 0.02;
    Wq = reg.add(name + ".Wq", normal_init<S>(rng, dim, dim, stddev));
    bq = reg.add(name + ".bq", Mat<S>::Zero(1, dim));
    Wk = reg.add(name + ".Wk", normal_init<S>(rng, dim, dim, stddev));
    bk = reg.add(name + ".bk", Mat<S>::Zero(1, dim));
    Wv = reg.add(name + ".Wv", normal_init<S>(rng, dim, dim, stddev));
    bv = reg.add(name + ".bv", Mat<S>::Zero(1, dim));
    Wo = reg.add(name + ".Wo", normal_init<S>(rng, dim, dim, stddev));
    bo = reg.add(name + ".bo", Mat<S>::Zero(1, dim));
  }
  Var<S> forward(const Var<S>& x, const AttnGroups& groups) const {
    return grouped_self_attention(x, Wq, bq, Wk, bk, Wv, bv, Wo, bo, groups, heads);
  }
};

// AdamW with global-norm gradient clipping.
template <typename S>
class AdamW {
 public:
  double lr = 3e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;  // <= 0 disables clipping

  explicit AdamW(double lr_ = 3e-4, double weight_decay_ = 1e-4)
      : lr(lr_), weight_decay(weight_decay_) {}

  void step(ParamRegistry<S>& params) {
    if (state_.size() != params.items.size()) {
      state_.assign(params.items.size(), Slot{});
      for (size_t i = 0; i < params.items.size(); ++i) {
        auto& v = params.items[i].second->value;
        state_[i].m = Mat<S>::Zero(v.rows(), v.cols());
        state_[i].v = Mat<S>::Zero(v.rows(), v.cols());
      }
    }
    if (clip_norm > 0) {
      double sq = 0;
      for (auto& [name, p] : params.items) sq += static_cast<double>(p->grad.squaredNorm());
      const double norm = std::sqrt(sq);
      if (norm > clip_norm) {
        const S s = static_cast<S>(clip_norm / norm);
        for (auto& [name, p] : params.items) p->grad *= s;
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, t_);
    const double bc2 = 1.0 - std::pow(beta2, t_);
    for (size_t i = 0; i < params.items.size(); ++i) {
      auto& p = params.items[i].second;
      auto& s = state_[i];
      s.m = S(beta1) * s.m + S(1 - beta1) * p->grad;
      s.v = (S(beta2) * s.v.array() + S(1 - beta2) * p->grad.array().square()).matrix();
      auto mhat = s.m.array() / S(bc1);
      auto vhat = s.v.array() / S(bc2);
      p->value.array() -=
          S(lr) * (mhat / (vhat.sqrt() + S(eps)) + S(weight_decay) * p->value.array());
    }
    params.zero_grad();
  }

  void reset() {
    state_.clear();
    t_ = 0;
  }

 private:
  struct Slot {
    Mat<S> m, v;
  };
  std::vector<Slot> state_;
  long t_ = 0;
};

}  // namespace amodal::nn
