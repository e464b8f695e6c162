#pragma once

#include "amodal/layers.hpp"
#include "amodal/synth.hpp"

#include <array>
#include <vector>

namespace amodal {

using ad::Var;

// row-major flatten convention shared by every spatial tensor in the project
inline int flatten_index(int r, int c, int w) { return r * w + c; }
inline std::pair<int, int> unflatten_index(int i, int w) { return {i / w, i % w}; }

struct CropResult {
  synth::RgbImage image;                // resized to out_size x out_size
  std::vector<BinaryMask> masks;        // nearest-neighbor resampled
  std::array<double, 4> window{0, 0, 0, 0};  // x, y, w, h actually cropped
};

// Crop window = bbox scaled 2x about its center, clamped to the image, then
// resized to out_size. Image is sampled bilinearly, masks nearest-neighbor.
inline CropResult crop_roi(const synth::RgbImage& image, const std::array<int, 4>& bbox,
                           const std::vector<BinaryMask>& masks, int out_size,
                           double enlarge = 2.0) {
  const int H = image.height(), W = image.width();
  if (bbox[2] <= 0 || bbox[3] <= 0) throw ValidationError("crop_roi: empty bbox");
  const double cx = bbox[0] + bbox[2] / 2.0;
  const double cy = bbox[1] + bbox[3] / 2.0;
  double x0 = cx - bbox[2] * enlarge / 2.0;
  double y0 = cy - bbox[3] * enlarge / 2.0;
  double x1 = cx + bbox[2] * enlarge / 2.0;
  double y1 = cy + bbox[3] * enlarge / 2.0;
  x0 = std::max(0.0, x0);
  y0 = std::max(0.0, y0);
  x1 = std::min(static_cast<double>(W), x1);
  y1 = std::min(static_cast<double>(H), y1);
  const double win_w = x1 - x0, win_h = y1 - y0;
  if (win_w <= 0 || win_h <= 0) throw ValidationError("crop_roi: bbox outside image");

  CropResult out;
  out.window = {x0, y0, win_w, win_h};
  auto sample_nearest = [&](const BinaryMask& m, int r, int c) -> std::uint8_t {
    const double sx = x0 + (c + 0.5) * win_w / out_size;
    const double sy = y0 + (r + 0.5) * win_h / out_size;
    const int ic = std::clamp(static_cast<int>(sx), 0, W - 1);
    const int ir = std::clamp(static_cast<int>(sy), 0, H - 1);
    return m.v(ir, ic);
  };
  auto sample_bilinear = [&](const synth::ImagePlane& p, int r, int c) -> float {
    const double sx = x0 + (c + 0.5) * win_w / out_size - 0.5;
    const double sy = y0 + (r + 0.5) * win_h / out_size - 0.5;
    const int c0 = std::clamp(static_cast<int>(std::floor(sx)), 0, W - 1);
    const int r0 = std::clamp(static_cast<int>(std::floor(sy)), 0, H - 1);
    const int c1 = std::min(c0 + 1, W - 1);
    const int r1 = std::min(r0 + 1, H - 1);
    const double fx = std::clamp(sx - c0, 0.0, 1.0);
    const double fy = std::clamp(sy - r0, 0.0, 1.0);
    const double v = (1 - fy) * ((1 - fx) * p(r0, c0) + fx * p(r0, c1)) +
                     fy * ((1 - fx) * p(r1, c0) + fx * p(r1, c1));
    return static_cast<float>(v);
  };

  out.image.r.resize(out_size, out_size);
  out.image.g.resize(out_size, out_size);
  out.image.b.resize(out_size, out_size);
  for (int r = 0; r < out_size; ++r)
    for (int c = 0; c < out_size; ++c) {
      out.image.r(r, c) = sample_bilinear(image.r, r, c);
      out.image.g(r, c) = sample_bilinear(image.g, r, c);
      out.image.b(r, c) = sample_bilinear(image.b, r, c);
    }
  for (const auto& m : masks) {
    BinaryMask rm(out_size, out_size);
    for (int r = 0; r < out_size; ++r)
      for (int c = 0; c < out_size; ++c) rm.v(r, c) = sample_nearest(m, r, c);
    out.masks.push_back(std::move(rm));
  }
  return out;
}

struct BackboneConfig {
  int in_channels = 3;
  int dim = 64;               // output channel dim, matches the transformer width
  int downsample_factor = 4;  // power of two, matches the codec

  int stages() const {
    int f = downsample_factor, s = 0;
    while (f > 1) {
      if (f % 2 != 0)
        throw ValidationError("BackboneConfig: downsample factor must be a power of two");
      f /= 2;
      ++s;
    }
    return s;
  }
};

// Small trainable strided-conv feature extractor; output is the codec's latent
// resolution with `dim` channels.
template <typename S>
class ConvBackbone {
 public:
  BackboneConfig cfg;
  nn::ParamRegistry<S> params;

  ConvBackbone(const BackboneConfig& config, Rng& rng) : cfg(config) {
    const int m = cfg.stages();
    int cin = cfg.in_channels;
    for (int i = 0; i < m; ++i) {
      const int cout = (i + 1 == m) ? cfg.dim : cfg.dim / 2;
      stages_.emplace_back(params, "bb.s" + std::to_string(i), cin, cout, 3, 2, rng);
      cin = cout;
    }
    mid_ = nn::Conv<S>(params, "bb.mid", cin, cfg.dim, 3, 1, rng);
    proj_ = nn::Conv<S>(params, "bb.proj", cfg.dim, cfg.dim, 1, 1, rng);
  }

  // x: (H*W) x in_channels
  Var<S> forward(const Var<S>& x, int H, int W) const {
    if (x->rows() != H * W || x->cols() != cfg.in_channels)
      throw ValidationError("backbone: input size mismatch");
    if (H % cfg.downsample_factor != 0 || W % cfg.downsample_factor != 0)
      throw ValidationError("backbone: input dims not divisible by downsample factor");
    Var<S> y = x;
    int h = H, w = W;
    for (const auto& conv : stages_) {
      y = ad::relu(conv.forward(y, h, w));
      h /= 2;
      w /= 2;
    }
    y = ad::relu(mid_.forward(y, h, w));
    return proj_.forward(y, h, w);
  }

  static Mat<S> image_to_input(const synth::RgbImage& img) {
    const int H = img.height(), W = img.width();
    Mat<S> x(H * W, 3);
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        x(r * W + c, 0) = S(img.r(r, c));
        x(r * W + c, 1) = S(img.g(r, c));
        x(r * W + c, 2) = S(img.b(r, c));
      }
    return x;
  }

  Mat<S> extract_features(const synth::RgbImage& img) const {
    auto y = forward(ad::constant<S>(image_to_input(img)), img.height(), img.width());
    return y->value;
  }

 private:
  std::vector<nn::Conv<S>> stages_;
  nn::Conv<S> mid_, proj_;
};

// Learned token + spatial position tables. Sentinel owns table row K_cb.
template <typename S>
class TokenEmbedder {
 public:
  TokenEmbedder() = default;
  TokenEmbedder(nn::ParamRegistry<S>& reg, const std::string& name, int codebook_size, int dim,
                int grid_h, int grid_w, Rng& rng)
      : codebook_size_(codebook_size), h_(grid_h), w_(grid_w) {
    table_ = reg.add(name + ".tok", nn::normal_init<S>(rng, codebook_size + 1, dim, 0.02));
    pos_ = reg.add(name + ".pos", nn::normal_init<S>(rng, grid_h * grid_w, dim, 0.02));
  }

  // row-major flattened sequence of token embeddings plus positional encodings
  Var<S> embed(const TokenGrid& tokens) const {
    if (tokens.h() != h_ || tokens.w() != w_)
      throw ValidationError("embed_tokens: grid dims do not match the embedder");
    std::vector<int> flat(tokens.cells());
    for (int i = 0; i < tokens.cells(); ++i) {
      const int t = tokens.flat(i);
      if (t < 0 || t > codebook_size_)
        throw ValidationError("embed_tokens: token index out of range");
      flat[i] = t;
    }
    return ad::add(ad::gather_rows(table_, flat), pos_);
  }

  Var<S> positions() const { return pos_; }
  Var<S> table() const { return table_; }

 private:
  Var<S> table_, pos_;
  int codebook_size_ = 0, h_ = 0, w_ = 0;
};

}  // namespace amodal
