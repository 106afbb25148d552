#pragma once

// Raw numeric kernels behind the differentiable ops.
//
// Every kernel comes in two drivers: `serial` (the reference, always used by
// golden tests) and `omp` (OpenMP, splits only independent output rows, so
// each output element sees the same arithmetic in the same order and both
// drivers are bitwise-identical). The un-namespaced entry points dispatch on
// the process-wide worker count.

#include <cstddef>

namespace rafd::kernels {

/// Worker count for dispatching entry points; 1 selects the serial drivers.
void set_num_threads(int n);
int num_threads();
/// Reads RAFD_THREADS (default 1) and applies it.
int init_threads_from_env();

enum class Trans { No, Yes };

// C[m x n] (+)= op(A)[m x k] * op(B)[k x n]; row-major, no leading-dimension
// padding. With accumulate=false C is overwritten.
namespace serial {
template <typename T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate);
template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, T* cols);
template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, T* dx);
template <typename T>
void softmax_rows(const T* x, std::size_t rows, std::size_t cols, T* y);
template <typename T>
void bilinear_sample(const T* input, std::size_t channels, std::size_t h, std::size_t w, const T* points,
                     std::size_t m, const T* fill, bool fill_per_point, T* out);
}  // namespace serial

namespace omp {
template <typename T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate);
template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, T* cols);
template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, T* dx);
template <typename T>
void softmax_rows(const T* x, std::size_t rows, std::size_t cols, T* y);
template <typename T>
void bilinear_sample(const T* input, std::size_t channels, std::size_t h, std::size_t w, const T* points,
                     std::size_t m, const T* fill, bool fill_per_point, T* out);
}  // namespace omp

template <typename T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate) {
  if (num_threads() > 1) {
    omp::gemm(ta, tb, m, n, k, a, b, c, accumulate);
  } else {
    serial::gemm(ta, tb, m, n, k, a, b, c, accumulate);
  }
}

template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, T* cols) {
  if (num_threads() > 1) {
    omp::im2col(x, channels, h, w, kh, kw, stride, pad, cols);
  } else {
    serial::im2col(x, channels, h, w, kh, kw, stride, pad, cols);
  }
}

template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, T* dx) {
  if (num_threads() > 1) {
    omp::col2im(cols, channels, h, w, kh, kw, stride, pad, dx);
  } else {
    serial::col2im(cols, channels, h, w, kh, kw, stride, pad, dx);
  }
}

template <typename T>
void softmax_rows(const T* x, std::size_t rows, std::size_t cols, T* y) {
  if (num_threads() > 1) {
    omp::softmax_rows(x, rows, cols, y);
  } else {
    serial::softmax_rows(x, rows, cols, y);
  }
}

template <typename T>
void bilinear_sample(const T* input, std::size_t channels, std::size_t h, std::size_t w, const T* points,
                     std::size_t m, const T* fill, bool fill_per_point, T* out) {
  if (num_threads() > 1) {
    omp::bilinear_sample(input, channels, h, w, points, m, fill, fill_per_point, out);
  } else {
    serial::bilinear_sample(input, channels, h, w, points, m, fill, fill_per_point, out);
  }
}

}  // namespace rafd::kernels
