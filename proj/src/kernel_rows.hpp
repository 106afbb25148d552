#pragma once

// Per-row kernel bodies shared by the serial and OpenMP drivers. Drivers only
// decide which rows run where; all arithmetic lives here.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

namespace rafd::kernels::rows {

template <typename T>
void transpose(const T* src, std::size_t rows, std::size_t cols, T* dst) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
}

// Rows [i0, i1) of C += A * B with A m x k, B k x n. Four rows at a time share
// each streamed row of B; every C element accumulates over p in ascending order.
template <typename T>
void gemm_nn(std::size_t i0, std::size_t i1, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  constexpr std::size_t kColBlock = 512;
  std::size_t i = i0;
  for (; i + 4 <= i1; i += 4) {
    T* __restrict c0 = c + i * n;
    T* __restrict c1 = c0 + n;
    T* __restrict c2 = c1 + n;
    T* __restrict c3 = c2 + n;
    const T* a0 = a + i * k;
    for (std::size_t jb = 0; jb < n; jb += kColBlock) {
      const std::size_t je = std::min(n, jb + kColBlock);
      for (std::size_t p = 0; p < k; ++p) {
        const T v0 = a0[p];
        const T v1 = a0[k + p];
        const T v2 = a0[2 * k + p];
        const T v3 = a0[3 * k + p];
        const T* __restrict br = b + p * n;
        for (std::size_t j = jb; j < je; ++j) {
          const T bj = br[j];
          c0[j] += v0 * bj;
          c1[j] += v1 * bj;
          c2[j] += v2 * bj;
          c3[j] += v3 * bj;
        }
      }
    }
  }
  for (; i < i1; ++i) {
    T* __restrict c0 = c + i * n;
    const T* a0 = a + i * k;
    for (std::size_t jb = 0; jb < n; jb += kColBlock) {
      const std::size_t je = std::min(n, jb + kColBlock);
      for (std::size_t p = 0; p < k; ++p) {
        const T v0 = a0[p];
        const T* __restrict br = b + p * n;
        for (std::size_t j = jb; j < je; ++j) c0[j] += v0 * br[j];
      }
    }
  }
}

// One row r = (channel, ki, kj) of the im2col matrix.
template <typename T>
void im2col_row(std::size_t r, const T* x, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* cols) {
  const std::size_t ch = r / (kh * kw);
  const std::size_t ki = (r / kw) % kh;
  const std::size_t kj = r % kw;
  const T* xc = x + ch * h * w;
  T* dst = cols + r * ho * wo;
  for (std::size_t oy = 0; oy < ho; ++oy) {
    const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
    T* drow = dst + oy * wo;
    if (iy < 0 || iy >= static_cast<long>(h)) {
      std::fill(drow, drow + wo, T(0));
      continue;
    }
    const T* xrow = xc + static_cast<std::size_t>(iy) * w;
    for (std::size_t ox = 0; ox < wo; ++ox) {
      const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
      drow[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? T(0) : xrow[ix];
    }
  }
}

// Scatter-add of all im2col rows belonging to one input channel.
template <typename T>
void col2im_channel(std::size_t ch, const T* cols, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                    std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* dx) {
  T* dxc = dx + ch * h * w;
  for (std::size_t ki = 0; ki < kh; ++ki) {
    for (std::size_t kj = 0; kj < kw; ++kj) {
      const T* src = cols + ((ch * kh + ki) * kw + kj) * ho * wo;
      for (std::size_t oy = 0; oy < ho; ++oy) {
        const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        T* dxrow = dxc + static_cast<std::size_t>(iy) * w;
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
          if (ix < 0 || ix >= static_cast<long>(w)) continue;
          dxrow[ix] += src[oy * wo + ox];
        }
      }
    }
  }
}

template <typename T>
void softmax_row(const T* x, std::size_t cols, T* y) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, x[j]);
  T sum = 0;
  for (std::size_t j = 0; j < cols; ++j) {
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  const T inv = T(1) / sum;
  for (std::size_t j = 0; j < cols; ++j) y[j] *= inv;
}

/// Bilinear footprint of one continuous point (x = column, y = row). Points
/// outside [0, w-1] x [0, h-1] (or non-finite) are flagged as outside.
template <typename T>
struct BilinearTap {
  bool inside = false;
  std::size_t x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  T fx = 0, fy = 0;
};

template <typename T>
BilinearTap<T> bilinear_tap(T x, T y, std::size_t h, std::size_t w) {
  BilinearTap<T> tap;
  if (!(x >= T(0) && x <= T(w - 1) && y >= T(0) && y <= T(h - 1))) return tap;
  tap.inside = true;
  auto axis = [](T v, std::size_t n, std::size_t& i0, std::size_t& i1, T& f) {
    if (n < 2) {
      i0 = i1 = 0;
      f = T(0);
      return;
    }
    i0 = std::min(static_cast<std::size_t>(std::floor(v)), n - 2);
    i1 = i0 + 1;
    f = v - static_cast<T>(i0);
  };
  axis(x, w, tap.x0, tap.x1, tap.fx);
  axis(y, h, tap.y0, tap.y1, tap.fy);
  return tap;
}

template <typename T>
void bilinear_point(std::size_t m, const T* input, std::size_t channels, std::size_t h, std::size_t w,
                    const T* points, std::size_t npts, const T* fill, bool fill_per_point, T* out) {
  const auto tap = bilinear_tap(points[m], points[npts + m], h, w);
  if (!tap.inside) {
    for (std::size_t c = 0; c < channels; ++c) out[c * npts + m] = fill[fill_per_point ? c * npts + m : c];
    return;
  }
  const T w00 = (T(1) - tap.fx) * (T(1) - tap.fy);
  const T w01 = tap.fx * (T(1) - tap.fy);
  const T w10 = (T(1) - tap.fx) * tap.fy;
  const T w11 = tap.fx * tap.fy;
  const std::size_t o00 = tap.y0 * w + tap.x0, o01 = tap.y0 * w + tap.x1;
  const std::size_t o10 = tap.y1 * w + tap.x0, o11 = tap.y1 * w + tap.x1;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* ic = input + c * h * w;
    out[c * npts + m] = w00 * ic[o00] + w01 * ic[o01] + w10 * ic[o10] + w11 * ic[o11];
  }
}

}  // namespace rafd::kernels::rows
