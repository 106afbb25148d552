#include <algorithm>
#include <cstdlib>
#include <string>
#include <vector>

#include "kernel_rows.hpp"
#include "rafd/kernels.hpp"

namespace rafd::kernels {

namespace {
int g_threads = 1;
}

void set_num_threads(int n) { g_threads = std::max(1, n); }
int num_threads() { return g_threads; }

int init_threads_from_env() {
  int n = 1;
  if (const char* env = std::getenv("RAFD_THREADS")) {
    try {
      n = std::stoi(env);
    } catch (const std::exception&) {
      n = 1;
    }
  }
  set_num_threads(n);
  return num_threads();
}

namespace serial {

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
  rows::gemm_nn(0, m, n, k, a, b, c);
}

template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, T* cols) {
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kw) / stride + 1;
  for (std::size_t r = 0; r < channels * kh * kw; ++r) rows::im2col_row(r, x, h, w, kh, kw, stride, pad, ho, wo, cols);
}

template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, T* dx) {
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kw) / stride + 1;
  for (std::size_t ch = 0; ch < channels; ++ch) rows::col2im_channel(ch, cols, h, w, kh, kw, stride, pad, ho, wo, dx);
}

template <typename T>
void softmax_rows(const T* x, std::size_t nrows, std::size_t cols, T* y) {
  for (std::size_t r = 0; r < nrows; ++r) rows::softmax_row(x + r * cols, cols, y + r * cols);
}

template <typename T>
void bilinear_sample(const T* input, std::size_t channels, std::size_t h, std::size_t w, const T* points,
                     std::size_t m, const T* fill, bool fill_per_point, T* out) {
  for (std::size_t i = 0; i < m; ++i) rows::bilinear_point(i, input, channels, h, w, points, m, fill, fill_per_point, out);
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

}  // namespace serial
}  // namespace rafd::kernels
