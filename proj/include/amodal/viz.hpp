#pragma once

#include "amodal/mask.hpp"
#include "amodal/synth.hpp"

#include <fstream>
#include <string>
#include <vector>

namespace amodal::viz {

// Binary PPM (P6) writer; values in [0,1].
inline void write_ppm(const std::string& path, const synth::RgbImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("write_ppm: cannot open " + path);
  out << "P6\n" << img.width() << " " << img.height() << "\n255\n";
  for (int r = 0; r < img.height(); ++r)
    for (int c = 0; c < img.width(); ++c) {
      const unsigned char rgb[3] = {
          static_cast<unsigned char>(std::clamp(img.r(r, c), 0.0f, 1.0f) * 255.0f + 0.5f),
          static_cast<unsigned char>(std::clamp(img.g(r, c), 0.0f, 1.0f) * 255.0f + 0.5f),
          static_cast<unsigned char>(std::clamp(img.b(r, c), 0.0f, 1.0f) * 255.0f + 0.5f)};
      out.write(reinterpret_cast<const char*>(rgb), 3);
    }
}

inline synth::RgbImage read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("read_ppm: cannot open " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255)
    throw ValidationError("read_ppm: unsupported header in " + path);
  in.get();
  synth::RgbImage img;
  img.r.resize(h, w);
  img.g.resize(h, w);
  img.b.resize(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      unsigned char rgb[3];
      in.read(reinterpret_cast<char*>(rgb), 3);
      img.r(r, c) = rgb[0] / 255.0f;
      img.g(r, c) = rgb[1] / 255.0f;
      img.b(r, c) = rgb[2] / 255.0f;
    }
  if (!in) throw ValidationError("read_ppm: truncated file " + path);
  return img;
}

inline synth::RgbImage gray_panel(const SoftMask& m) {
  synth::RgbImage img;
  img.r = m.v;
  img.g = m.v;
  img.b = m.v;
  return img;
}

inline synth::RgbImage gray_panel(const BinaryMask& m) {
  SoftMask s(m.height(), m.width());
  s.v = m.v.cast<float>();
  return gray_panel(s);
}

// Horizontal strip of equally-sized columns, nearest-neighbor upscaled, with a
// 2-pixel white separator.
inline synth::RgbImage compose_panel(const std::vector<synth::RgbImage>& columns, int scale = 4) {
  if (columns.empty()) throw ValidationError("compose_panel: no columns");
  const int h = columns[0].height(), w = columns[0].width();
  for (const auto& c : columns)
    if (c.height() != h || c.width() != w)
      throw ValidationError("compose_panel: column size mismatch");
  const int sep = 2;
  const int out_h = h * scale;
  const int out_w = static_cast<int>(columns.size()) * w * scale +
                    (static_cast<int>(columns.size()) - 1) * sep;
  synth::RgbImage out;
  out.r = synth::ImagePlane::Constant(out_h, out_w, 1.0f);
  out.g = synth::ImagePlane::Constant(out_h, out_w, 1.0f);
  out.b = synth::ImagePlane::Constant(out_h, out_w, 1.0f);
  int x0 = 0;
  for (const auto& col : columns) {
    for (int r = 0; r < out_h; ++r)
      for (int c = 0; c < w * scale; ++c) {
        out.r(r, x0 + c) = col.r(r / scale, c / scale);
        out.g(r, x0 + c) = col.g(r / scale, c / scale);
        out.b(r, x0 + c) = col.b(r / scale, c / scale);
      }
    x0 += w * scale + sep;
  }
  return out;
}

}  // namespace amodal::viz
