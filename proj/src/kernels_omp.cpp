#include <algorithm>
#include <vector>

#include "kernel_rows.hpp"
#include "rafd/kernels.hpp"

namespace rafd::kernels::omp {

template <typename T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  std::vector<T> at, bt;
  if (ta == Trans::Yes) {
    at.resize(m * k);
    rows::transpose(a, k, m, at.data());
    a = at.data();
  }
  if (tb == Trans::Yes) {
    bt.resize(k * n);
    rows::transpose(b, n, k, bt.data());
    b = bt.data();
  }
  const long blocks = static_cast<long>((m + 3) / 4);
  const int threads = num_threads();
#pragma omp parallel for schedule(static) num_threads(threads)
  for (long blk = 0; blk < blocks; ++blk) {
    const std::size_t i0 = static_cast<std::size_t>(blk) * 4;
    rows::gemm_nn(i0, std::min(m, i0 + 4), n, k, a, b, c);
  }
}

template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, T* cols) {
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kw) / stride + 1;
  const long nrows = static_cast<long>(channels * kh * kw);
  const int threads = num_threads();
#pragma omp parallel for schedule(static) num_threads(threads)
  for (long r = 0; r < nrows; ++r) {
    rows::im2col_row(static_cast<std::size_t>(r), x, h, w, kh, kw, stride, pad, ho, wo, cols);
  }
}

template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, T* dx) {
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kw) / stride + 1;
  const int threads = num_threads();
#pragma omp parallel for schedule(static) num_threads(threads)
  for (long ch = 0; ch < static_cast<long>(channels); ++ch) {
    rows::col2im_channel(static_cast<std::size_t>(ch), cols, h, w, kh, kw, stride, pad, ho, wo, dx);
  }
}

template <typename T>
void softmax_rows(const T* x, std::size_t nrows, std::size_t cols, T* y) {
  const int threads = num_threads();
#pragma omp parallel for schedule(static) num_threads(threads)
  for (long r = 0; r < static_cast<long>(nrows); ++r) {
    rows::softmax_row(x + r * cols, cols, y + r * cols);
  }
}

template <typename T>
void bilinear_sample(const T* input, std::size_t channels, std::size_t h, std::size_t w, const T* points,
                     std::size_t m, const T* fill, bool fill_per_point, T* out) {
  const int threads = num_threads();
#pragma omp parallel for schedule(static) num_threads(threads)
  for (long i = 0; i < static_cast<long>(m); ++i) {
    rows::bilinear_point(static_cast<std::size_t>(i), input, channels, h, w, points, m, fill, fill_per_point, out);
  }
}

#define RAFD_INSTANTIATE(T)                                                                                    \
  template void gemm<T>(Trans, Trans, std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool);   \
  template void im2col<T>(const T*, std::size_t, std::size_t, std::size_t, std::size_t, std::size_t,          \
                          std::size_t, std::size_t, T*);                                                       \
  template void col2im<T>(const T*, std::size_t, std::size_t, std::size_t, std::size_t, std::size_t,          \
                          std::size_t, std::size_t, T*);                                                       \
  template void softmax_rows<T>(const T*, std::size_t, std::size_t, T*);                                      \
  template void bilinear_sample<T>(const T*, std::size_t, std::size_t, std::size_t, const T*, std::size_t,     \
                                   const T*, bool, T*);
RAFD_INSTANTIATE(float)
RAFD_INSTANTIATE(double)
#undef RAFD_INSTANTIATE

}  // namespace rafd::kernels::omp
