#pragma once

// Forward/backward kernels for the layer types a SegModel is built from.
// Activations are channels x (N*H*W) column-major matrices (see tensor.hpp).

#include <algorithm>
#include <cstring>

#include <Eigen/Core>

#include "duda/tensor.hpp"

namespace duda::layers {

struct Geometry {
  int count = 0;  // images in the batch
  int height = 0;
  int width = 0;

  Eigen::Index pixels() const { return static_cast<Eigen::Index>(count) * height * width; }
};

struct ConvShape {
  int cin = 0;
  int cout = 0;
  int kernel = 1;
  int stride = 1;

  int pad() const { return kernel / 2; }
  Eigen::Index patch() const { return static_cast<Eigen::Index>(kernel) * kernel * cin; }
  Geometry output(const Geometry& in) const {
    return {in.count, (in.height + 2 * pad() - kernel) / stride + 1, (in.width + 2 * pad() - kernel) / stride + 1};
  }
  // Direct product without unfolding.
  bool pointwise() const { return kernel == 1 && stride == 1; }
};

// Unfolds input patches into columns. Row order inside a patch is
// (ky, kx, channel), matching the weight layout cout x (k*k*cin).
template <typename T>
void im2col(const Matrix<T>& x, const ConvShape& cs, const Geometry& in, Matrix<T>& cols) {
  const Geometry out = cs.output(in);
  const Eigen::Index k_rows = cs.patch();
  cols.resize(k_rows, out.pixels());
  const T* src = x.data();
  T* dst = cols.data();
  const int pad = cs.pad();
  for (int n = 0; n < in.count; ++n)
    for (int oy = 0; oy < out.height; ++oy)
      for (int ox = 0; ox < out.width; ++ox) {
        for (int ky = 0; ky < cs.kernel; ++ky) {
          const int iy = oy * cs.stride + ky - pad;
          for (int kx = 0; kx < cs.kernel; ++kx) {
            const int ix = ox * cs.stride + kx - pad;
            if (iy < 0 || iy >= in.height || ix < 0 || ix >= in.width) {
              std::fill(dst, dst + cs.cin, T(0));
            } else {
              const T* p = src + ((static_cast<Eigen::Index>(n) * in.height + iy) * in.width + ix) * cs.cin;
              std::copy(p, p + cs.cin, dst);
            }
            dst += cs.cin;
          }
        }
      }
}

// Scatter-adds column gradients back onto the input grid (transpose of im2col).
template <typename T>
void col2im(const Matrix<T>& dcols, const ConvShape& cs, const Geometry& in, Matrix<T>& dx) {
  const Geometry out = cs.output(in);
  dx.setZero(cs.cin, in.pixels());
  const T* src = dcols.data();
  T* base = dx.data();
  const int pad = cs.pad();
  for (int n = 0; n < in.count; ++n)
    for (int oy = 0; oy < out.height; ++oy)
      for (int ox = 0; ox < out.width; ++ox)
        for (int ky = 0; ky < cs.kernel; ++ky) {
          const int iy = oy * cs.stride + ky - pad;
          for (int kx = 0; kx < cs.kernel; ++kx) {
            const int ix = ox * cs.stride + kx - pad;
            if (iy >= 0 && iy < in.height && ix >= 0 && ix < in.width) {
              T* p = base + ((static_cast<Eigen::Index>(n) * in.height + iy) * in.width + ix) * cs.cin;
              for (int c = 0; c < cs.cin; ++c) p[c] += src[c];
            }
            src += cs.cin;
          }
        }
}

template <typename T>
using ConstMatrixMap = Eigen::Map<const Matrix<T>>;
template <typename T>
using MatrixMap = Eigen::Map<Matrix<T>>;

// y = W * unfold(x) + b. `cols` receives the unfolded input (left empty for
// pointwise convolutions, which read `x` directly).
template <typename T>
void conv_forward(const Matrix<T>& x, const ConvShape& cs, const Geometry& in, const T* weight, const T* bias,
                  Matrix<T>& cols, Matrix<T>& y) {
  ConstMatrixMap<T> w(weight, cs.cout, cs.patch());
  Eigen::Map<const Vector<T>> b(bias, cs.cout);
  if (cs.pointwise()) {
    cols.resize(0, 0);
    y.noalias() = w * x;
  } else {
    im2col(x, cs, in, cols);
    y.noalias() = w * cols;
  }
  y.colwise() += b;
}

// Accumulates parameter gradients; writes the input gradient when `dx` is non-null.
template <typename T>
void conv_backward(const Matrix<T>& x, const Matrix<T>& cols, const ConvShape& cs, const Geometry& in,
                   const T* weight, const Matrix<T>& dy, T* dweight, T* dbias, Matrix<T>* dx) {
  MatrixMap<T> dw(dweight, cs.cout, cs.patch());
  Eigen::Map<Vector<T>> db(dbias, cs.cout);
  const Matrix<T>& unfolded = cs.pointwise() ? x : cols;
  dw.noalias() += dy * unfolded.transpose();
  db += dy.rowwise().sum();
  if (dx) {
    ConstMatrixMap<T> w(weight, cs.cout, cs.patch());
    if (cs.pointwise()) {
      dx->noalias() = w.transpose() * dy;
    } else {
      Matrix<T> dcols;
      dcols.noalias() = w.transpose() * dy;
      col2im(dcols, cs, in, *dx);
    }
  }
}

template <typename T>
void relu_forward(Matrix<T>& y) {
  y = y.cwiseMax(T(0));
}

// `y` is the forward output; the mask y > 0 selects where gradient passes.
template <typename T>
void relu_backward(const Matrix<T>& y, const Matrix<T>& dy, Matrix<T>& dx) {
  dx = (y.array() > T(0)).select(dy, T(0));
}

namespace detail {
// Half-pixel-centred 2x bilinear taps along one axis: output o reads input
// o/2 with weight 3/4 and its neighbour (towards o's side) with weight 1/4,
// clamped at the border.
inline void bilinear_taps(int o, int n_in, int& i0, int& i1) {
  i0 = o / 2;
  i1 = (o % 2 == 0) ? std::max(i0 - 1, 0) : std::min(i0 + 1, n_in - 1);
}
}  // namespace detail

template <typename T>
void upsample_forward(const Matrix<T>& x, const Geometry& in, Matrix<T>& y) {
  const int oh = in.height * 2, ow = in.width * 2;
  const Eigen::Index ch = x.rows();
  y.resize(ch, static_cast<Eigen::Index>(in.count) * oh * ow);
  const T a = T(0.75), b = T(0.25);
  for (int n = 0; n < in.count; ++n) {
    const Eigen::Index in_base = static_cast<Eigen::Index>(n) * in.height * in.width;
    const Eigen::Index out_base = static_cast<Eigen::Index>(n) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      int y0, y1;
      detail::bilinear_taps(oy, in.height, y0, y1);
      for (int ox = 0; ox < ow; ++ox) {
        int x0, x1;
        detail::bilinear_taps(ox, in.width, x0, x1);
        const T* p00 = x.data() + (in_base + y0 * in.width + x0) * ch;
        const T* p01 = x.data() + (in_base + y0 * in.width + x1) * ch;
        const T* p10 = x.data() + (in_base + y1 * in.width + x0) * ch;
        const T* p11 = x.data() + (in_base + y1 * in.width + x1) * ch;
        T* q = y.data() + (out_base + static_cast<Eigen::Index>(oy) * ow + ox) * ch;
        for (Eigen::Index c = 0; c < ch; ++c)
          q[c] = a * (a * p00[c] + b * p01[c]) + b * (a * p10[c] + b * p11[c]);
      }
    }
  }
}

template <typename T>
void upsample_backward(const Matrix<T>& dy, const Geometry& in, Matrix<T>& dx) {
  const int oh = in.height * 2, ow = in.width * 2;
  const Eigen::Index ch = dy.rows();
  dx.setZero(ch, in.pixels());
  const T a = T(0.75), b = T(0.25);
  for (int n = 0; n < in.count; ++n) {
    const Eigen::Index in_base = static_cast<Eigen::Index>(n) * in.height * in.width;
    const Eigen::Index out_base = static_cast<Eigen::Index>(n) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      int y0, y1;
      detail::bilinear_taps(oy, in.height, y0, y1);
      for (int ox = 0; ox < ow; ++ox) {
        int x0, x1;
        detail::bilinear_taps(ox, in.width, x0, x1);
        const T* g = dy.data() + (out_base + static_cast<Eigen::Index>(oy) * ow + ox) * ch;
        T* p00 = dx.data() + (in_base + y0 * in.width + x0) * ch;
        T* p01 = dx.data() + (in_base + y0 * in.width + x1) * ch;
        T* p10 = dx.data() + (in_base + y1 * in.width + x0) * ch;
        T* p11 = dx.data() + (in_base + y1 * in.width + x1) * ch;
        for (Eigen::Index c = 0; c < ch; ++c) {
          p00[c] += a * a * g[c];
          p01[c] += a * b * g[c];
          p10[c] += b * a * g[c];
          p11[c] += b * b * g[c];
        }
      }
    }
  }
}

template <typename T>
void avgpool_forward(const Matrix<T>& x, const Geometry& in, Matrix<T>& y) {
  const int oh = in.height / 2, ow = in.width / 2;
  const Eigen::Index ch = x.rows();
  y.setZero(ch, static_cast<Eigen::Index>(in.count) * oh * ow);
  for (int n = 0; n < in.count; ++n)
    for (int iy = 0; iy < oh * 2; ++iy)
      for (int ix = 0; ix < ow * 2; ++ix) {
        const T* p = x.data() + ((static_cast<Eigen::Index>(n) * in.height + iy) * in.width + ix) * ch;
        T* q = y.data() + ((static_cast<Eigen::Index>(n) * oh + iy / 2) * ow + ix / 2) * ch;
        for (Eigen::Index c = 0; c < ch; ++c) q[c] += T(0.25) * p[c];
      }
}

template <typename T>
void avgpool_backward(const Matrix<T>& dy, const Geometry& in, Matrix<T>& dx) {
  const int oh = in.height / 2, ow = in.width / 2;
  const Eigen::Index ch = dy.rows();
  dx.setZero(ch, in.pixels());
  for (int n = 0; n < in.count; ++n)
    for (int iy = 0; iy < oh * 2; ++iy)
      for (int ix = 0; ix < ow * 2; ++ix) {
        T* p = dx.data() + ((static_cast<Eigen::Index>(n) * in.height + iy) * in.width + ix) * ch;
        const T* g = dy.data() + ((static_cast<Eigen::Index>(n) * oh + iy / 2) * ow + ix / 2) * ch;
        for (Eigen::Index c = 0; c < ch; ++c) p[c] = T(0.25) * g[c];
      }
}

}  // namespace duda::layers
