#pragma once

#include "amodal/common.hpp"

#include <cstdint>
#include <utility>

namespace amodal {

using MaskGrid = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Per-pixel {0,1} grid. (r, c) indexing, row-major storage.
struct BinaryMask {
  MaskGrid v;

  BinaryMask() = default;
  BinaryMask(int h, int w) : v(MaskGrid::Zero(h, w)) {}
  explicit BinaryMask(MaskGrid grid) : v(std::move(grid)) {}

  int height() const { return static_cast<int>(v.rows()); }
  int width() const { return static_cast<int>(v.cols()); }
  std::int64_t area() const { return v.template cast<std::int64_t>().sum(); }
  bool empty() const { return area() == 0; }

  void validate() const {
    if (v.rows() <= 0 || v.cols() <= 0) throw ValidationError("BinaryMask: empty dims");
    if (((v != 0) && (v != 1)).any()) throw ValidationError("BinaryMask: values must be 0/1");
  }
};

// Per-pixel real grid in [0,1].
template <typename Scalar>
struct SoftMaskT {
  Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> v;

  SoftMaskT() = default;
  SoftMaskT(int h, int w)
      : v(Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Zero(h, w)) {}

  int height() const { return static_cast<int>(v.rows()); }
  int width() const { return static_cast<int>(v.cols()); }

  void validate() const {
    if (v.rows() <= 0 || v.cols() <= 0) throw ValidationError("SoftMask: empty dims");
    if ((v < Scalar(0)).any() || (v > Scalar(1)).any())
      throw ValidationError("SoftMask: values outside [0,1]");
  }
};

using SoftMask = SoftMaskT<float>;

// Global binarization convention: >= 0.5 maps to 1.
template <typename Scalar>
inline BinaryMask threshold(const SoftMaskT<Scalar>& m, Scalar t = Scalar(0.5)) {
  BinaryMask out(m.height(), m.width());
  out.v = (m.v >= t).template cast<std::uint8_t>();
  return out;
}

template <typename Scalar>
inline SoftMaskT<Scalar> to_soft(const BinaryMask& m) {
  SoftMaskT<Scalar> out(m.height(), m.width());
  out.v = m.v.template cast<Scalar>();
  return out;
}

inline bool contains(const BinaryMask& outer, const BinaryMask& inner) {
  return !((inner.v == 1) && (outer.v == 0)).any();
}

inline BinaryMask mask_and(const BinaryMask& a, const BinaryMask& b) {
  return BinaryMask(MaskGrid(a.v.min(b.v)));
}
inline BinaryMask mask_or(const BinaryMask& a, const BinaryMask& b) {
  return BinaryMask(MaskGrid(a.v.max(b.v)));
}
// a minus b
inline BinaryMask mask_diff(const BinaryMask& a, const BinaryMask& b) {
  BinaryMask out(a.height(), a.width());
  out.v = ((a.v == 1) && (b.v == 0)).cast<std::uint8_t>();
  return out;
}

// Discrete latent index grid. Values in [0, codebook_size]; index == codebook_size
// is the mask sentinel, legal only on the transformer input side.
struct TokenGrid {
  Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> idx;
  int codebook_size = 0;

  TokenGrid() = default;
  TokenGrid(int h, int w, int codebook)
      : idx(Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Constant(h, w, 0)),
        codebook_size(codebook) {}

  int h() const { return static_cast<int>(idx.rows()); }
  int w() const { return static_cast<int>(idx.cols()); }
  int cells() const { return h() * w(); }
  int sentinel() const { return codebook_size; }

  int& at(int r, int c) { return idx(r, c); }
  int at(int r, int c) const { return idx(r, c); }
  // row-major flat accessors
  int flat(int i) const { return idx(i / w(), i % w()); }
  void set_flat(int i, int value) { idx(i / w(), i % w()) = value; }

  bool has_sentinel() const { return (idx == sentinel()).any(); }
  int count_sentinel() const { return static_cast<int>((idx == sentinel()).count()); }

  void fill_sentinel() { idx.setConstant(sentinel()); }

  void validate() const {
    if (idx.rows() <= 0 || idx.cols() <= 0) throw ValidationError("TokenGrid: empty dims");
    if ((idx < 0).any() || (idx > sentinel()).any())
      throw ValidationError("TokenGrid: index out of [0, codebook]");
  }

  bool operator==(const TokenGrid& o) const {
    return codebook_size == o.codebook_size && idx.rows() == o.idx.rows() &&
           idx.cols() == o.idx.cols() && (idx == o.idx).all();
  }
};

}  // namespace amodal
