#pragma once

#include "amodal/mask.hpp"

#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace amodal::synth {

enum class ShapeKind { ellipse, rectangle, triangle, capsule, star };

inline const char* shape_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::ellipse: return "ellipse";
    case ShapeKind::rectangle: return "rectangle";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::capsule: return "capsule";
    case ShapeKind::star: return "star";
  }
  return "?";
}

struct Shape {
  ShapeKind kind = ShapeKind::ellipse;
  double cx = 0, cy = 0;  // center, pixel coords
  double r1 = 8, r2 = 6;  // primary/secondary half-extent
  double angle = 0;       // rotation, radians
};

namespace detail {

inline bool point_in_polygon(const std::vector<std::array<double, 2>>& poly, double x, double y) {
  bool inside = false;
  const size_t n = poly.size();
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    const double xi = poly[i][0], yi = poly[i][1];
    const double xj = poly[j][0], yj = poly[j][1];
    const bool crosses = (yi > y) != (yj > y);
    if (crosses && x < (xj - xi) * (y - yi) / (yj - yi) + xi) inside = !inside;
  }
  return inside;
}

inline std::vector<std::array<double, 2>> polygon_of(const Shape& s) {
  std::vector<std::array<double, 2>> poly;
  auto rot = [&](double u, double v) -> std::array<double, 2> {
    const double ca = std::cos(s.angle), sa = std::sin(s.angle);
    return {s.cx + u * ca - v * sa, s.cy + u * sa + v * ca};
  };
  if (s.kind == ShapeKind::triangle) {
    for (int i = 0; i < 3; ++i) {
      const double a = M_PI / 2 + i * 2 * M_PI / 3;
      poly.push_back(rot(s.r1 * std::cos(a), s.r2 * std::sin(a)));
    }
  } else if (s.kind == ShapeKind::star) {
    const double inner = 0.45;
    for (int i = 0; i < 10; ++i) {
      const double a = M_PI / 2 + i * M_PI / 5;
      const double r = (i % 2 == 0) ? s.r1 : s.r1 * inner;
      poly.push_back(rot(r * std::cos(a), r * std::sin(a)));
    }
  }
  return poly;
}

}  // namespace detail

// Rasterize at pixel centers (c + 0.5, r + 0.5).
inline BinaryMask rasterize(const Shape& s, int canvas_h, int canvas_w) {
  BinaryMask out(canvas_h, canvas_w);
  const double ca = std::cos(s.angle), sa = std::sin(s.angle);
  auto poly = detail::polygon_of(s);
  const double reach = std::max(s.r1, s.r2) + 1.5;
  const int r_lo = std::max(0, static_cast<int>(std::floor(s.cy - reach)));
  const int r_hi = std::min(canvas_h - 1, static_cast<int>(std::ceil(s.cy + reach)));
  const int c_lo = std::max(0, static_cast<int>(std::floor(s.cx - reach)));
  const int c_hi = std::min(canvas_w - 1, static_cast<int>(std::ceil(s.cx + reach)));
  for (int r = r_lo; r <= r_hi; ++r) {
    for (int c = c_lo; c <= c_hi; ++c) {
      const double x = c + 0.5, y = r + 0.5;
      const double dx = x - s.cx, dy = y - s.cy;
      const double u = dx * ca + dy * sa;   // local frame
      const double v = -dx * sa + dy * ca;
      bool in = false;
      switch (s.kind) {
        case ShapeKind::ellipse:
          in = (u * u) / (s.r1 * s.r1) + (v * v) / (s.r2 * s.r2) <= 1.0;
          break;
        case ShapeKind::rectangle:
          in = std::abs(u) <= s.r1 && std::abs(v) <= s.r2;
          break;
        case ShapeKind::capsule: {
          const double half = std::max(0.0, s.r1 - s.r2);
          const double pu = std::clamp(u, -half, half);
          in = (u - pu) * (u - pu) + v * v <= s.r2 * s.r2;
          break;
        }
        case ShapeKind::triangle:
        case ShapeKind::star:
          in = detail::point_in_polygon(poly, x, y);
          break;
      }
      if (in) out.v(r, c) = 1;
    }
  }
  return out;
}

// One annotated object: visible + amodal masks with exact depth-ordered truth.
struct AmodalInstance {
  std::string image_id;
  std::string video_id;  // empty for still images
  int frame_index = -1;  // -1 for still images
  std::string category;
  std::array<int, 4> bbox{0, 0, 0, 0};  // x, y, w, h of the visible region
  BinaryMask visible, amodal;
  double occlusion_rate = 0.0;
  bool fully_occluded = false;
  int object_id = -1;

  void validate() const {
    amodal.validate();
    visible.validate();
    if (amodal.area() == 0) throw ValidationError("AmodalInstance: empty amodal mask");
    if (!contains(amodal, visible))
      throw ValidationError("AmodalInstance: visible not contained in amodal");
    const double rate = 1.0 - static_cast<double>(visible.area()) / amodal.area();
    if (std::abs(rate - occlusion_rate) > 1e-12)
      throw ValidationError("AmodalInstance: stored occlusion_rate inconsistent with masks");
    if (fully_occluded != (visible.area() == 0))
      throw ValidationError("AmodalInstance: fully_occluded flag inconsistent");
  }
};

inline std::array<int, 4> tight_bbox(const BinaryMask& m) {
  int r0 = m.height(), r1 = -1, c0 = m.width(), c1 = -1;
  for (int r = 0; r < m.height(); ++r)
    for (int c = 0; c < m.width(); ++c)
      if (m.v(r, c)) {
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }
  if (r1 < 0) return {0, 0, 0, 0};
  return {c0, r0, c1 - c0 + 1, r1 - r0 + 1};
}

struct SceneSpec {
  int canvas_h = 96, canvas_w = 96;
  int min_objects = 10, max_objects = 20;
  std::vector<ShapeKind> vocabulary{ShapeKind::ellipse, ShapeKind::rectangle,
                                    ShapeKind::triangle, ShapeKind::capsule, ShapeKind::star};
  double min_radius = 7, max_radius = 20;
  // video motion model
  double max_speed = 2.0;  // per-object px/frame
  double max_pan = 1.0;    // global camera pan px/frame
  bool occlusion_event = false;

  void validate() const {
    if (min_objects < 1 || max_objects < min_objects)
      throw ValidationError("SceneSpec: bad object count range");
    if (vocabulary.empty()) throw ValidationError("SceneSpec: empty shape vocabulary");
    if (canvas_h < 4 * max_radius || canvas_w < 4 * max_radius)
      throw ValidationError("SceneSpec: canvas cannot fit shapes");
  }
};

using ImagePlane = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct RgbImage {
  ImagePlane r, g, b;
  int height() const { return static_cast<int>(r.rows()); }
  int width() const { return static_cast<int>(r.cols()); }
};

struct Scene {
  std::vector<AmodalInstance> instances;  // depth order: index 0 is farthest
  RgbImage image;
};

namespace detail {

struct SceneObject {
  Shape shape;
  std::array<float, 3> color;
  int object_id;
};

// Paint far-to-near, derive visibility from strictly-nearer shapes.
inline Scene compose(const std::vector<SceneObject>& ordered, const SceneSpec& spec, Rng& rng,
                     const std::string& image_id, const std::string& video_id, int frame_index) {
  Scene scene;
  const int H = spec.canvas_h, W = spec.canvas_w;
  scene.image.r = ImagePlane::Constant(H, W, 0.15f);
  scene.image.g = ImagePlane::Constant(H, W, 0.15f);
  scene.image.b = ImagePlane::Constant(H, W, 0.15f);

  std::vector<BinaryMask> amodals;
  for (const auto& obj : ordered) amodals.push_back(rasterize(obj.shape, H, W));

  for (size_t i = 0; i < ordered.size(); ++i) {
    BinaryMask visible = amodals[i];
    for (size_t j = i + 1; j < ordered.size(); ++j) visible = mask_diff(visible, amodals[j]);
    AmodalInstance inst;
    inst.image_id = image_id;
    inst.video_id = video_id;
    inst.frame_index = frame_index;
    inst.category = shape_name(ordered[i].shape.kind);
    inst.amodal = amodals[i];
    inst.visible = visible;
    inst.object_id = ordered[i].object_id;
    inst.fully_occluded = visible.area() == 0;
    inst.occlusion_rate = 1.0 - static_cast<double>(visible.area()) / inst.amodal.area();
    inst.bbox = tight_bbox(inst.fully_occluded ? inst.amodal : inst.visible);
    scene.instances.push_back(std::move(inst));

    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c)
        if (amodals[i].v(r, c)) {
          scene.image.r(r, c) = ordered[i].color[0];
          scene.image.g(r, c) = ordered[i].color[1];
          scene.image.b(r, c) = ordered[i].color[2];
        }
  }
  // mild sensor noise
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const float n = static_cast<float>(rng.normal(0.0, 0.02));
      scene.image.r(r, c) = std::clamp(scene.image.r(r, c) + n, 0.0f, 1.0f);
      scene.image.g(r, c) = std::clamp(scene.image.g(r, c) + n, 0.0f, 1.0f);
      scene.image.b(r, c) = std::clamp(scene.image.b(r, c) + n, 0.0f, 1.0f);
    }
  return scene;
}

inline SceneObject sample_object(const SceneSpec& spec, Rng& rng, int object_id, double margin) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    SceneObject obj;
    obj.object_id = object_id;
    obj.shape.kind = spec.vocabulary[rng.uniform_int(spec.vocabulary.size())];
    obj.shape.r1 = rng.uniform(spec.min_radius, spec.max_radius);
    obj.shape.r2 = rng.uniform(0.45 * obj.shape.r1, obj.shape.r1);
    if (obj.shape.kind == ShapeKind::capsule)
      obj.shape.r2 = rng.uniform(0.3 * obj.shape.r1, 0.6 * obj.shape.r1);
    obj.shape.angle = rng.uniform(0.0, 2 * M_PI);
    const double reach = obj.shape.r1 + margin;
    obj.shape.cx = rng.uniform(reach, spec.canvas_w - reach);
    obj.shape.cy = rng.uniform(reach, spec.canvas_h - reach);
    obj.color = {static_cast<float>(rng.uniform(0.25, 0.95)),
                 static_cast<float>(rng.uniform(0.25, 0.95)),
                 static_cast<float>(rng.uniform(0.25, 0.95))};
    if (rasterize(obj.shape, spec.canvas_h, spec.canvas_w).area() > 0) return obj;
  }
  throw ValidationError("generate_scene: could not sample a non-degenerate shape");
}

}  // namespace detail

inline Scene generate_scene(const SceneSpec& spec, Rng& rng,
                            const std::string& image_id = "img") {
  spec.validate();
  const int n =
      spec.min_objects + static_cast<int>(rng.uniform_int(spec.max_objects - spec.min_objects + 1));
  std::vector<detail::SceneObject> objs;
  for (int i = 0; i < n; ++i) objs.push_back(detail::sample_object(spec, rng, i, 1.0));
  // depth order: a random permutation of the sampled objects (far to near)
  for (int i = n - 1; i > 0; --i)
    std::swap(objs[i], objs[static_cast<int>(rng.uniform_int(i + 1))]);
  return detail::compose(objs, spec, rng, image_id, "", -1);
}

// A T-frame clip of one scene under per-object velocities plus a camera pan.
struct VideoSample {
  std::string video_id;
  int frames = 0;
  std::vector<Scene> scenes;  // one per frame; object identity via object_id
};

inline VideoSample generate_video(const SceneSpec& spec, int T, Rng& rng,
                                  const std::string& video_id = "vid") {
  spec.validate();
  if (T < 2) throw ValidationError("generate_video: T must be >= 2");
  const double margin = 1.0 + T * (spec.max_speed + spec.max_pan);
  const int n =
      spec.min_objects + static_cast<int>(rng.uniform_int(spec.max_objects - spec.min_objects + 1));
  std::vector<detail::SceneObject> objs;
  std::vector<std::array<double, 2>> vel;
  for (int i = 0; i < n; ++i) {
    objs.push_back(detail::sample_object(spec, rng, i, margin));
    vel.push_back({rng.uniform(-spec.max_speed, spec.max_speed),
                   rng.uniform(-spec.max_speed, spec.max_speed)});
  }
  for (int i = n - 1; i > 0; --i)
    std::swap(objs[i], objs[static_cast<int>(rng.uniform_int(i + 1))]);
  const std::array<double, 2> pan{rng.uniform(-spec.max_pan, spec.max_pan),
                                  rng.uniform(-spec.max_pan, spec.max_pan)};

  if (spec.occlusion_event && n >= 2) {
    // Drive the nearest object across the second-nearest so the target is fully
    // covered at the middle frame: occluder sized past the target, velocity
    // chosen to land on it at T/2.
    auto& target = objs[n - 2];
    auto& occluder = objs[n - 1];
    occluder.shape.kind = ShapeKind::rectangle;
    occluder.shape.r1 = std::min(target.shape.r1 * 2.2, spec.canvas_w / 3.0);
    occluder.shape.r2 = occluder.shape.r1;
    occluder.shape.angle = 0.0;
    const int mid = T / 2;
    const double travel = 2.0 * occluder.shape.r1 + 2.0 * target.shape.r1;
    occluder.shape.cx = target.shape.cx - travel * mid / T;
    occluder.shape.cy = target.shape.cy;
    const size_t occ_idx = n - 1, tgt_idx = n - 2;
    vel[occ_idx] = {travel / T, 0.0};
    vel[tgt_idx] = {0.0, 0.0};
  }

  VideoSample video;
  video.video_id = video_id;
  video.frames = T;
  for (int t = 0; t < T; ++t) {
    std::vector<detail::SceneObject> frame_objs = objs;
    for (int i = 0; i < n; ++i) {
      frame_objs[i].shape.cx = objs[i].shape.cx + t * (vel[i][0] + pan[0]);
      frame_objs[i].shape.cy = objs[i].shape.cy + t * (vel[i][1] + pan[1]);
    }
    Rng noise = Rng::substream(rng.uniform_int(1 << 30), t);
    video.scenes.push_back(detail::compose(frame_objs, spec, noise,
                                           video_id + "_f" + std::to_string(t), video_id, t));
  }
  return video;
}

// true when some object is fully occluded at an interior frame yet visible at
// both ends of the clip
inline bool has_occlusion_event(const VideoSample& v) {
  if (v.scenes.empty()) return false;
  const size_t n = v.scenes.front().instances.size();
  for (size_t obj = 0; obj < n; ++obj) {
    bool mid_hidden = false;
    for (int t = 1; t + 1 < v.frames; ++t)
      if (v.scenes[t].instances[obj].fully_occluded) mid_hidden = true;
    if (mid_hidden && !v.scenes.front().instances[obj].fully_occluded &&
        !v.scenes.back().instances[obj].fully_occluded)
      return true;
  }
  return false;
}

// --- mask augmentation ------------------------------------------------------

inline BinaryMask dilate(const BinaryMask& m, int k) {
  const int rad = k / 2;
  BinaryMask out(m.height(), m.width());
  for (int r = 0; r < m.height(); ++r)
    for (int c = 0; c < m.width(); ++c) {
      std::uint8_t v = 0;
      for (int dr = -rad; dr <= rad && !v; ++dr)
        for (int dc = -rad; dc <= rad && !v; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr >= 0 && rr < m.height() && cc >= 0 && cc < m.width() && m.v(rr, cc)) v = 1;
        }
      out.v(r, c) = v;
    }
  return out;
}

inline BinaryMask erode(const BinaryMask& m, int k) {
  const int rad = k / 2;
  BinaryMask out(m.height(), m.width());
  for (int r = 0; r < m.height(); ++r)
    for (int c = 0; c < m.width(); ++c) {
      std::uint8_t v = 1;
      for (int dr = -rad; dr <= rad && v; ++dr)
        for (int dc = -rad; dc <= rad && v; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= m.height() || cc < 0 || cc >= m.width() || !m.v(rr, cc)) v = 0;
        }
      out.v(r, c) = v;
    }
  return out;
}

inline BinaryMask blur_threshold(const BinaryMask& m, int k) {
  const int rad = k / 2;
  const double sigma = k / 3.0;
  std::vector<double> kernel(k);
  double sum = 0;
  for (int i = 0; i < k; ++i) {
    kernel[i] = std::exp(-0.5 * (i - rad) * (i - rad) / (sigma * sigma));
    sum += kernel[i];
  }
  for (auto& x : kernel) x /= sum;
  Arr<double> tmp = Arr<double>::Zero(m.height(), m.width());
  for (int r = 0; r < m.height(); ++r)
    for (int c = 0; c < m.width(); ++c) {
      double acc = 0;
      for (int i = -rad; i <= rad; ++i) {
        const int cc = std::clamp(c + i, 0, m.width() - 1);
        acc += kernel[i + rad] * m.v(r, cc);
      }
      tmp(r, c) = acc;
    }
  BinaryMask out(m.height(), m.width());
  for (int r = 0; r < m.height(); ++r)
    for (int c = 0; c < m.width(); ++c) {
      double acc = 0;
      for (int i = -rad; i <= rad; ++i) {
        const int rr = std::clamp(r + i, 0, m.height() - 1);
        acc += kernel[i + rad] * tmp(rr, c);
      }
      out.v(r, c) = acc >= 0.5 ? 1 : 0;
    }
  return out;
}

// Randomly one of dilation, erosion, blur-then-threshold with kernel in {3,5}.
inline BinaryMask augment_mask(const BinaryMask& m, Rng& rng) {
  const int k = rng.uniform_int(2) == 0 ? 3 : 5;
  switch (rng.uniform_int(3)) {
    case 0: return dilate(m, k);
    case 1: return erode(m, k);
    default: return blur_threshold(m, k);
  }
}

}  // namespace amodal::synth
