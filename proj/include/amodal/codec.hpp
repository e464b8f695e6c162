#pragma once

#include "amodal/layers.hpp"
#include "amodal/mask.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace amodal {

using ad::Var;

struct VqConfig {
  int codebook_size = 256;
  int n_z = 8;
  int downsample_factor = 4;  // power of two
  int base_channels = 16;
  int in_channels = 1;

  int stages() const {
    int f = downsample_factor, s = 0;
    while (f > 1) {
      if (f % 2 != 0) throw ValidationError("VqConfig: downsample factor must be a power of two");
      f /= 2;
      ++s;
    }
    return s;
  }
  void validate() const {
    if (codebook_size <= 0 || n_z <= 0 || base_channels <= 0)
      throw ValidationError("VqConfig: sizes must be positive");
    stages();
  }
};

struct VqLossConfig {
  double beta = 0.25;   // commitment weight
  double delta = 1e-6;  // adaptive-lambda stability constant
  enum class LambdaMode { fixed, adaptive };
  LambdaMode lambda_mode = LambdaMode::adaptive;
  double lambda_fixed = 0.1;
  bool gan_enabled = false;

  void validate() const {
    if (beta <= 0) throw ValidationError("VqLossConfig: beta must be > 0");
    if (delta <= 0) throw ValidationError("VqLossConfig: delta must be > 0");
  }
};

// Continuous latent grid: (h*w) x n_z, row index r*w+c.
template <typename S>
struct Latent {
  Mat<S> values;
  int h = 0, w = 0;
};

// Nearest codebook entry per cell under Euclidean distance, ties to the lowest
// index. The distance is evaluated in direct (z-e)^2 form.
template <typename S>
TokenGrid quantize(const Latent<S>& latent, const Mat<S>& codebook) {
  if (latent.values.cols() != codebook.cols())
    throw ValidationError("quantize: latent channel dim does not match codebook");
  const int k = static_cast<int>(codebook.rows());
  TokenGrid out(latent.h, latent.w, k);
  for (int i = 0; i < latent.h * latent.w; ++i) {
    int best = 0;
    S best_d = (latent.values.row(i) - codebook.row(0)).squaredNorm();
    for (int j = 1; j < k; ++j) {
      const S d = (latent.values.row(i) - codebook.row(j)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    out.set_flat(i, best);
  }
  return out;
}

template <typename S>
Latent<S> lookup(const TokenGrid& tokens, const Mat<S>& codebook) {
  if (tokens.codebook_size != static_cast<int>(codebook.rows()))
    throw ValidationError("lookup: codebook size mismatch");
  if (tokens.has_sentinel()) throw ValidationError("lookup: token grid contains mask sentinel");
  Latent<S> out;
  out.h = tokens.h();
  out.w = tokens.w();
  out.values.resize(tokens.cells(), codebook.cols());
  for (int i = 0; i < tokens.cells(); ++i) out.values.row(i) = codebook.row(tokens.flat(i));
  return out;
}

// Patch discriminator for the optional adversarial term.
template <typename S>
struct PatchDiscriminator {
  nn::ParamRegistry<S> params;
  nn::Conv<S> c0, c1, c2;

  PatchDiscriminator(int in_channels, int base, Rng& rng)
      : c0(params, "disc.c0", in_channels, base, 3, 2, rng),
        c1(params, "disc.c1", base, base * 2, 3, 2, rng),
        c2(params, "disc.c2", base * 2, 1, 1, 1, rng) {}

  // returns per-patch logits, (h/4*w/4) x 1
  Var<S> forward(const Var<S>& x, int h, int w) const {
    auto y = ad::relu(c0.forward(x, h, w));
    y = ad::relu(c1.forward(y, h / 2, w / 2));
    return c2.forward(y, h / 4, w / 4);
  }
};

// Convolutional encoder/decoder pair with a vector-quantized bottleneck.
template <typename S>
class MaskCodec {
 public:
  VqConfig cfg;
  nn::ParamRegistry<S> params;

  MaskCodec(const VqConfig& config, Rng& rng) : cfg(config) {
    cfg.validate();
    const int m = cfg.stages();
    int cin = cfg.in_channels;
    for (int i = 0; i < m; ++i) {
      const int cout = channel_at(i);
      enc_.emplace_back(params, "enc.s" + std::to_string(i), cin, cout, 3, 2, rng);
      cin = cout;
    }
    enc_mid_ = nn::Conv<S>(params, "enc.mid", cin, cin, 3, 1, rng);
    enc_proj_ = nn::Conv<S>(params, "enc.proj", cin, cfg.n_z, 1, 1, rng);

    dec_proj_ = nn::Conv<S>(params, "dec.proj", cfg.n_z, cin, 1, 1, rng);
    dec_mid_ = nn::Conv<S>(params, "dec.mid", cin, cin, 3, 1, rng);
    for (int i = m - 1; i >= 0; --i) {
      const int cout = i > 0 ? channel_at(i - 1) : cfg.base_channels;
      dec_.emplace_back(params, "dec.s" + std::to_string(i), cin, cout, 3, 1, rng);
      cin = cout;
    }
    dec_out_ = nn::Conv<S>(params, "dec.out", cin, 1, 3, 1, rng);
    // codebook init uniform in [-1/K, 1/K]
    codebook_ = params.add(
        "codebook", nn::uniform_init<S>(rng, cfg.codebook_size, cfg.n_z,
                                        -1.0 / cfg.codebook_size, 1.0 / cfg.codebook_size));
  }

  const Mat<S>& codebook() const { return codebook_->value; }
  Var<S> codebook_var() const { return codebook_; }

  int latent_h(int H) const { return H / cfg.downsample_factor; }
  int latent_w(int W) const { return W / cfg.downsample_factor; }

  // tape-building encoder; x is (H*W) x in_channels
  Var<S> encode_var(const Var<S>& x, int H, int W) const {
    check_dims(H, W);
    Var<S> y = x;
    int h = H, w = W;
    for (const auto& conv : enc_) {
      y = ad::relu(conv.forward(y, h, w));
      h /= 2;
      w /= 2;
    }
    y = ad::relu(enc_mid_.forward(y, h, w));
    return enc_proj_.forward(y, h, w);
  }

  Latent<S> encode(const BinaryMask& mask) const {
    auto x = ad::constant<S>(mask_to_input(mask));
    auto y = encode_var(x, mask.height(), mask.width());
    Latent<S> out;
    out.values = y->value;
    out.h = latent_h(mask.height());
    out.w = latent_w(mask.width());
    return out;
  }

  TokenGrid encode_tokens(const BinaryMask& mask) const {
    return amodal::quantize(encode(mask), codebook_->value);
  }

  // tape-building decoder; z is (h*w) x n_z, returns full-resolution logits
  Var<S> decode_logits_var(const Var<S>& z, int h, int w) const {
    Var<S> y = ad::relu(dec_proj_.forward(z, h, w));
    y = ad::relu(dec_mid_.forward(y, h, w));
    for (const auto& conv : dec_) {
      y = ad::upsample2x(y, h, w);
      h *= 2;
      w *= 2;
      y = ad::relu(conv.forward(y, h, w));
    }
    return dec_out_.forward(y, h, w);
  }

  SoftMaskT<S> decode(const TokenGrid& tokens) const {
    if (tokens.has_sentinel())
      throw ValidationError("decode: token grid contains mask sentinel");
    auto z = amodal::lookup(tokens, codebook_->value);
    auto logits = decode_logits_var(ad::constant<S>(z.values), z.h, z.w);
    const int H = z.h * cfg.downsample_factor, W = z.w * cfg.downsample_factor;
    SoftMaskT<S> out(H, W);
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c)
        out.v(r, c) = S(1) / (S(1) + std::exp(-logits->value(r * W + c, 0)));
    return out;
  }

  SoftMaskT<S> reconstruct(const BinaryMask& mask) const {
    return decode(encode_tokens(mask));
  }

  struct ForwardLosses {
    Var<S> total;             // graph root for backward
    Var<S> rec;               // reconstruction term
    Var<S> codebook_term;     // ||sg[z_e] - z_q||^2 path into the codebook
    Var<S> commit_raw;        // unweighted commitment, encoder path
    LossBreakdown breakdown;  // numeric terms; adversarial filled by the trainer
    TokenGrid tokens;
  };

  // Builds the quantization training graph: reconstruction + codebook +
  // beta-weighted commitment, with the straight-through estimator feeding the
  // decoder the encoder gradient unchanged. fixed_tokens pins the assignment
  // (finite-difference checks need the argmin frozen across perturbations).
  ForwardLosses vq_forward(const BinaryMask& mask, const VqLossConfig& loss_cfg,
                           const TokenGrid* fixed_tokens = nullptr) const {
    loss_cfg.validate();
    const int H = mask.height(), W = mask.width();
    auto x = ad::constant<S>(mask_to_input(mask));
    auto z_e = encode_var(x, H, W);
    const int h = latent_h(H), w = latent_w(W);

    Latent<S> lat{z_e->value, h, w};
    TokenGrid tokens =
        fixed_tokens ? *fixed_tokens : amodal::quantize(lat, codebook_->value);
    std::vector<int> flat(tokens.cells());
    for (int i = 0; i < tokens.cells(); ++i) flat[i] = tokens.flat(i);

    auto z_q = ad::gather_rows(codebook_, flat);
    auto codebook_loss = ad::mse(ad::detach(z_e), z_q);
    auto commit_raw = ad::mse(z_e, ad::detach(z_q));
    // straight-through: value is z_q, gradient flows to z_e unchanged
    auto st = ad::add(z_e, ad::constant<S>(Mat<S>(z_q->value - z_e->value)));
    auto logits = decode_logits_var(st, h, w);
    auto rec = ad::bce_with_logits(logits, mask_to_input(mask));

    auto total = ad::add(rec, ad::add(codebook_loss, ad::scale(commit_raw, S(loss_cfg.beta))));

    ForwardLosses out;
    out.total = total;
    out.rec = rec;
    out.codebook_term = codebook_loss;
    out.commit_raw = commit_raw;
    out.tokens = std::move(tokens);
    out.breakdown.set("reconstruction", static_cast<double>(rec->value(0, 0)));
    out.breakdown.set("codebook", static_cast<double>(codebook_loss->value(0, 0)));
    out.breakdown.set("commitment",
                      loss_cfg.beta * static_cast<double>(commit_raw->value(0, 0)));
    out.breakdown.set("adversarial", 0.0);
    return out;
  }

  LossBreakdown vq_loss(const BinaryMask& mask, const VqLossConfig& loss_cfg,
                        PatchDiscriminator<S>* disc = nullptr) const {
    auto fwd = vq_forward(mask, loss_cfg);
    if (loss_cfg.gan_enabled && disc != nullptr) {
      auto recon = reconstruct(mask);
      const double lam = adaptive_lambda(mask, loss_cfg, *disc);
      auto fake = ad::constant<S>(soft_to_input(recon));
      auto dlogit = disc->forward(fake, mask.height(), mask.width());
      // generator side of log D(x) + log(1 - D(xhat)): -log D(xhat)
      Mat<S> ones = Mat<S>::Ones(dlogit->rows(), 1);
      auto gen = ad::bce_with_logits(dlogit, ones);
      fwd.breakdown.set("adversarial", lam * static_cast<double>(gen->value(0, 0)));
    }
    if (!fwd.breakdown.finite())
      throw DivergenceError("vq_loss: non-finite loss, aborting step");
    return fwd.breakdown;
  }

  // lambda = |grad_{G_L} L_rec| / (|grad_{G_L} L_GAN| + delta), gradients taken
  // at the decoder's final layer.
  double adaptive_lambda(const BinaryMask& mask, const VqLossConfig& loss_cfg,
                         PatchDiscriminator<S>& disc) const {
    if (loss_cfg.lambda_mode == VqLossConfig::LambdaMode::fixed) return loss_cfg.lambda_fixed;
    auto& last = dec_out_.W;
    Mat<S> saved = last->grad;

    last->grad.setZero();
    {
      auto fwd = vq_forward(mask, loss_cfg);
      ad::backward(fwd.rec);
    }
    const double g_rec = static_cast<double>(last->grad.norm());

    last->grad.setZero();
    {
      const int H = mask.height(), W = mask.width();
      auto x = ad::constant<S>(mask_to_input(mask));
      auto z_e = encode_var(x, H, W);
      Latent<S> lat{z_e->value, latent_h(H), latent_w(W)};
      TokenGrid tokens = amodal::quantize(lat, codebook_->value);
      std::vector<int> flat(tokens.cells());
      for (int i = 0; i < tokens.cells(); ++i) flat[i] = tokens.flat(i);
      auto z_q = ad::gather_rows(codebook_, flat);
      auto st = ad::add(z_e, ad::constant<S>(Mat<S>(z_q->value - z_e->value)));
      auto logits = decode_logits_var(st, lat.h, lat.w);
      auto fake = ad::sigmoid(logits);
      auto dlogit = disc.forward(fake, H, W);
      Mat<S> ones = Mat<S>::Ones(dlogit->rows(), 1);
      ad::backward(ad::bce_with_logits(dlogit, ones));
    }
    const double g_gan = static_cast<double>(last->grad.norm());

    last->grad = saved;
    return g_rec / (g_gan + loss_cfg.delta);
  }

  static Mat<S> mask_to_input(const BinaryMask& mask) {
    Mat<S> x(mask.height() * mask.width(), 1);
    for (int r = 0; r < mask.height(); ++r)
      for (int c = 0; c < mask.width(); ++c) x(r * mask.width() + c, 0) = S(mask.v(r, c));
    return x;
  }
  static Mat<S> soft_to_input(const SoftMaskT<S>& mask) {
    Mat<S> x(mask.height() * mask.width(), 1);
    for (int r = 0; r < mask.height(); ++r)
      for (int c = 0; c < mask.width(); ++c) x(r * mask.width() + c, 0) = mask.v(r, c);
    return x;
  }

 private:
  int channel_at(int stage) const {
    return stage == 0 ? cfg.base_channels : cfg.base_channels * 2;
  }
  void check_dims(int H, int W) const {
    if (H % cfg.downsample_factor != 0 || W % cfg.downsample_factor != 0)
      throw ValidationError("encode: mask dims not divisible by downsampling factor");
  }

  std::vector<nn::Conv<S>> enc_, dec_;
  nn::Conv<S> enc_mid_, enc_proj_, dec_proj_, dec_mid_, dec_out_;
  Var<S> codebook_;
};

struct FitOptions {
  int steps = 4000;
  int batch_size = 16;
  double learning_rate = 3e-4;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
  int log_every = 200;
  int checkpoint_every = 500;
  std::function<void(int, const LossBreakdown&)> on_log;
};

template <typename S>
void scale_grads(nn::ParamRegistry<S>& params, S factor) {
  for (auto& [n, p] : params.items) p->grad *= factor;
}

// Trains the codec in place. On divergence the last checkpointed parameter
// state is restored before the error propagates. When loss_cfg.gan_enabled and
// a discriminator is supplied, each step alternates a discriminator update with
// the generator update carrying the adaptive-lambda adversarial term.
template <typename S>
LossBreakdown fit_vq(MaskCodec<S>& codec, const std::vector<BinaryMask>& dataset,
                     const VqLossConfig& loss_cfg, const FitOptions& opt,
                     PatchDiscriminator<S>* disc = nullptr) {
  if (dataset.empty()) throw ValidationError("fit_vq: empty dataset");
  if (opt.steps == 0) return LossBreakdown{};
  const bool gan = loss_cfg.gan_enabled && disc != nullptr;
  nn::AdamW<S> optimizer(opt.learning_rate, opt.weight_decay);
  nn::AdamW<S> disc_optimizer(opt.learning_rate, opt.weight_decay);
  Rng rng(opt.seed);
  std::vector<Mat<S>> good;
  auto snapshot = [&] {
    good.clear();
    for (auto& [n, p] : codec.params.items) good.push_back(p->value);
  };
  auto restore = [&] {
    for (size_t i = 0; i < good.size(); ++i) codec.params.items[i].second->value = good[i];
  };
  snapshot();
  LossBreakdown last;
  for (int step = 1; step <= opt.steps; ++step) {
    LossBreakdown agg;
    double rec = 0, cb = 0, cm = 0, adv = 0;
    for (int b = 0; b < opt.batch_size; ++b) {
      const auto& mask = dataset[static_cast<size_t>(rng.uniform_int(dataset.size()))];
      auto fwd = codec.vq_forward(mask, loss_cfg);
      if (!fwd.breakdown.finite()) {
        restore();
        throw DivergenceError("fit_vq: non-finite loss at step " + std::to_string(step));
      }
      Var<S> total = fwd.total;
      if (gan) {
        const int H = mask.height(), W = mask.width();
        const double lam = codec.adaptive_lambda(mask, loss_cfg, *disc);
        auto recon = codec.decode(fwd.tokens);
        // discriminator step: real up, fake down
        disc->params.zero_grad();
        auto real_logit = disc->forward(ad::constant<S>(MaskCodec<S>::mask_to_input(mask)), H, W);
        auto fake_logit =
            disc->forward(ad::constant<S>(MaskCodec<S>::soft_to_input(recon)), H, W);
        ad::backward(ad::bce_with_logits(real_logit, Mat<S>(Mat<S>::Ones(real_logit->rows(), 1))));
        ad::backward(ad::bce_with_logits(fake_logit, Mat<S>(Mat<S>::Zero(fake_logit->rows(), 1))));
        disc_optimizer.step(disc->params);
        // generator adversarial term through a fresh decode graph
        auto z_q = ad::gather_rows(codec.codebook_var(), [&] {
          std::vector<int> flat(fwd.tokens.cells());
          for (int i = 0; i < fwd.tokens.cells(); ++i) flat[i] = fwd.tokens.flat(i);
          return flat;
        }());
        auto logits =
            codec.decode_logits_var(ad::detach(z_q), fwd.tokens.h(), fwd.tokens.w());
        auto gen_logit = disc->forward(ad::sigmoid(logits), H, W);
        Mat<S> gen_ones = Mat<S>::Ones(gen_logit->rows(), 1);
        auto gen = ad::bce_with_logits(gen_logit, gen_ones);
        adv += lam * static_cast<double>(gen->value(0, 0));
        total = ad::add(total, ad::scale(gen, S(lam)));
      }
      ad::backward(total);
      rec += fwd.breakdown.term("reconstruction");
      cb += fwd.breakdown.term("codebook");
      cm += fwd.breakdown.term("commitment");
    }
    scale_grads(codec.params, S(1.0 / opt.batch_size));
    optimizer.step(codec.params);
    agg.set("reconstruction", rec / opt.batch_size);
    agg.set("codebook", cb / opt.batch_size);
    agg.set("commitment", cm / opt.batch_size);
    if (gan) agg.set("adversarial", adv / opt.batch_size);
    last = agg;
    if (opt.on_log && step % opt.log_every == 0) opt.on_log(step, agg);
    if (step % opt.checkpoint_every == 0) snapshot();
  }
  return last;
}

}  // namespace amodal
