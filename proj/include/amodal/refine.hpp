#pragma once

#include "amodal/layers.hpp"
#include "amodal/mask.hpp"

#include <optional>
#include <vector>

namespace amodal {

using ad::Var;

// Area-average pooling to target dims; source dims must be divisible.
template <typename S>
SoftMaskT<S> downsample_mask(const SoftMaskT<S>& src, int target_h, int target_w) {
  if (target_h <= 0 || target_w <= 0 || src.height() % target_h != 0 ||
      src.width() % target_w != 0)
    throw ValidationError("downsample_mask: target dims must divide source dims");
  const int fr = src.height() / target_h, fc = src.width() / target_w;
  SoftMaskT<S> out(target_h, target_w);
  for (int r = 0; r < target_h; ++r)
    for (int c = 0; c < target_w; ++c) {
      S acc = S(0);
      for (int i = 0; i < fr; ++i)
        for (int j = 0; j < fc; ++j) acc += src.v(r * fr + i, c * fc + j);
      out.v(r, c) = acc / S(fr * fc);
    }
  return out;
}

template <typename S>
struct SemanticAttention {
  Mat<S> attended;   // (h*w) x d, weights broadcast across channels
  Vec<S> weights;    // softmax over positions, sums to 1
  Vec<S> query;      // mask-pooled query, length d
};

// Mask-pooled query attention: q = sum_i m_i v_i, scores <q, v_i>/sqrt(d),
// weights softmax over positions, output w_i * v_i.
template <typename S>
SemanticAttention<S> semantic_attention(const SoftMaskT<S>& m, const Mat<S>& v_img) {
  const int n = static_cast<int>(v_img.rows()), d = static_cast<int>(v_img.cols());
  if (m.height() * m.width() != n)
    throw ValidationError("semantic_attention: mask dims do not match feature rows");
  SemanticAttention<S> out;
  Vec<S> mflat(n);
  for (int r = 0; r < m.height(); ++r)
    for (int c = 0; c < m.width(); ++c) mflat(r * m.width() + c) = m.v(r, c);
  out.query = v_img.transpose() * mflat;
  Vec<S> scores = v_img * out.query / std::sqrt(S(d));
  const S mx = scores.maxCoeff();
  Vec<S> e = (scores.array() - mx).exp();
  out.weights = e / e.sum();
  out.attended = v_img.array().colwise() * out.weights.array();
  return out;
}

struct RefineConfig {
  int dim = 64;               // feature channel count
  int downsample_factor = 4;  // latent -> full resolution, power of two
  int trunk_channels = 32;
  bool two_branch = true;     // auxiliary visible head
  bool use_attention = true;  // ablatable attention input

  int stages() const {
    int f = downsample_factor, s = 0;
    while (f > 1) {
      if (f % 2 != 0)
        throw ValidationError("RefineConfig: downsample factor must be a power of two");
      f /= 2;
      ++s;
    }
    return s;
  }
  int input_channels() const { return dim + (use_attention ? dim : 0) + 1; }
};

template <typename S>
struct RefineInput {
  Mat<S> v_img;               // (h*w) x dim latent-resolution features
  SoftMaskT<S> coarse;        // full-resolution coarse amodal estimate
  SoftMaskT<S> downsampled;   // coarse at latent resolution
  int h = 0, w = 0;           // latent dims
};

template <typename S>
RefineInput<S> make_refine_input(Mat<S> v_img, SoftMaskT<S> coarse, int latent_h, int latent_w) {
  if (v_img.rows() != latent_h * latent_w)
    throw ValidationError("RefineInput: feature rows do not match latent dims");
  RefineInput<S> in;
  in.downsampled = downsample_mask(coarse, latent_h, latent_w);
  in.v_img = std::move(v_img);
  in.coarse = std::move(coarse);
  in.h = latent_h;
  in.w = latent_w;
  return in;
}

template <typename S>
struct RefineLogits {
  Var<S> amodal;                 // (H*W) x 1 logits
  std::optional<Var<S>> visible;
};

template <typename S>
struct RefineOutput {
  SoftMaskT<S> amodal;
  std::optional<SoftMaskT<S>> visible;
};

// Convolutional decoder over [v_img | A | M_cd] with shared trunk and one
// output head per branch.
template <typename S>
class Refiner {
 public:
  RefineConfig cfg;
  nn::ParamRegistry<S> params;

  Refiner(const RefineConfig& config, Rng& rng) : cfg(config) {
    cfg.stages();
    int cin = cfg.input_channels();
    in_conv_ = nn::Conv<S>(params, "rf.in", cin, cfg.trunk_channels, 3, 1, rng);
    int ch = cfg.trunk_channels;
    for (int i = 0; i < cfg.stages(); ++i) {
      const int cout = std::max(8, ch / 2);
      ups_.emplace_back(params, "rf.up" + std::to_string(i), ch, cout, 3, 1, rng);
      ch = cout;
    }
    head_amodal_ = nn::Conv<S>(params, "rf.head_a", ch, 1, 3, 1, rng);
    if (cfg.two_branch) head_visible_ = nn::Conv<S>(params, "rf.head_v", ch, 1, 3, 1, rng);
  }

  RefineLogits<S> forward_logits(const RefineInput<S>& in) const {
    if (in.v_img.cols() != cfg.dim) throw ValidationError("refine: feature dim mismatch");
    if (in.downsampled.height() != in.h || in.downsampled.width() != in.w)
      throw ValidationError("refine: downsampled mask dims mismatch");
    std::vector<Var<S>> channels;
    channels.push_back(ad::constant<S>(in.v_img));
    if (cfg.use_attention)
      channels.push_back(ad::constant<S>(semantic_attention(in.downsampled, in.v_img).attended));
    Mat<S> mcd(in.h * in.w, 1);
    for (int r = 0; r < in.h; ++r)
      for (int c = 0; c < in.w; ++c) mcd(r * in.w + c, 0) = in.downsampled.v(r, c);
    channels.push_back(ad::constant<S>(mcd));
    Var<S> x = ad::concat_cols<S>(channels);

    int h = in.h, w = in.w;
    x = ad::relu(in_conv_.forward(x, h, w));
    for (const auto& conv : ups_) {
      x = ad::upsample2x(x, h, w);
      h *= 2;
      w *= 2;
      x = ad::relu(conv.forward(x, h, w));
    }
    RefineLogits<S> out;
    out.amodal = head_amodal_.forward(x, h, w);
    if (cfg.two_branch) out.visible = head_visible_.forward(x, h, w);
    return out;
  }

  RefineOutput<S> forward(const RefineInput<S>& in) const {
    auto logits = forward_logits(in);
    const int H = in.h * cfg.downsample_factor, W = in.w * cfg.downsample_factor;
    RefineOutput<S> out;
    out.amodal = logits_to_soft(logits.amodal->value, H, W);
    if (logits.visible) out.visible = logits_to_soft((*logits.visible)->value, H, W);
    return out;
  }

  static SoftMaskT<S> logits_to_soft(const Mat<S>& logits, int H, int W) {
    SoftMaskT<S> out(H, W);
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c)
        out.v(r, c) = S(1) / (S(1) + std::exp(-logits(r * W + c, 0)));
    return out;
  }

 private:
  nn::Conv<S> in_conv_, head_amodal_, head_visible_;
  std::vector<nn::Conv<S>> ups_;
};

template <typename S>
struct RefineLoss {
  Var<S> total;
  LossBreakdown breakdown;
};

// L_r = BCE(amodal) + BCE(visible), equal weights; the visible term drops out
// for single-branch models.
template <typename S>
RefineLoss<S> refine_loss(const RefineLogits<S>& out, const BinaryMask& gt_amodal,
                          const BinaryMask& gt_visible) {
  if (!contains(gt_amodal, gt_visible))
    throw ValidationError("refine_loss: gt visible not contained in gt amodal");
  auto flat = [](const BinaryMask& m) {
    Mat<S> x(m.height() * m.width(), 1);
    for (int r = 0; r < m.height(); ++r)
      for (int c = 0; c < m.width(); ++c) x(r * m.width() + c, 0) = S(m.v(r, c));
    return x;
  };
  if (out.amodal->rows() != gt_amodal.height() * gt_amodal.width())
    throw ValidationError("refine_loss: amodal dims mismatch");
  RefineLoss<S> res;
  auto la = ad::bce_with_logits(out.amodal, flat(gt_amodal));
  res.breakdown.set("refine_amodal", static_cast<double>(la->value(0, 0)));
  if (out.visible) {
    if ((*out.visible)->rows() != gt_visible.height() * gt_visible.width())
      throw ValidationError("refine_loss: visible dims mismatch");
    auto lv = ad::bce_with_logits(*out.visible, flat(gt_visible));
    res.breakdown.set("refine_visible", static_cast<double>(lv->value(0, 0)));
    res.total = ad::add(la, lv);
  } else {
    res.total = la;
  }
  if (!res.breakdown.finite()) throw DivergenceError("refine_loss: non-finite loss");
  return res;
}

}  // namespace amodal
