// Serial vs OpenMP kernel throughput. Thread count for the omp variants comes
// from RAFD_THREADS (falls back to the hardware concurrency).
#include <benchmark/benchmark.h>

#include <cstdlib>
#include <random>
#include <thread>
#include <vector>

#include "rafd/kernels.hpp"

using namespace rafd::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> d(-1.f, 1.f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

void use_omp_threads() {
  init_threads_from_env();
  if (!std::getenv("RAFD_THREADS")) set_num_threads(static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));
}

template <bool Omp>
void BM_gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
  std::vector<float> c(n * n);
  if (Omp) use_omp_threads();
  for (auto _ : state) {
    if (Omp)
      omp::gemm(Trans::No, Trans::No, n, n, n, a.data(), b.data(), c.data(), false);
    else
      serial::gemm(Trans::No, Trans::No, n, n, n, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(2 * n * n * n));
}

template <bool Omp>
void BM_im2col(benchmark::State& state) {
  const std::size_t c = 32, h = static_cast<std::size_t>(state.range(0)), w = h;
  auto x = random_vec(c * h * w, 3);
  std::vector<float> cols(c * 9 * h * w);
  if (Omp) use_omp_threads();
  for (auto _ : state) {
    if (Omp)
      omp::im2col(x.data(), c, h, w, 3, 3, 1, 1, cols.data());
    else
      serial::im2col(x.data(), c, h, w, 3, 3, 1, 1, cols.data());
    benchmark::DoNotOptimize(cols.data());
  }
}

template <bool Omp>
void BM_softmax_rows(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto x = random_vec(n * n, 4);
  std::vector<float> y(n * n);
  if (Omp) use_omp_threads();
  for (auto _ : state) {
    if (Omp)
      omp::softmax_rows(x.data(), n, n, y.data());
    else
      serial::softmax_rows(x.data(), n, n, y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Omp>
void BM_bilinear(benchmark::State& state) {
  const std::size_t c = 32, h = 32, w = 32, m = static_cast<std::size_t>(state.range(0));
  auto img = random_vec(c * h * w, 5);
  auto pts = random_vec(2 * m, 6);
  for (auto& p : pts) p = (p + 1.f) * 16.f;
  std::vector<float> fill(c, 0.f), out(c * m);
  if (Omp) use_omp_threads();
  for (auto _ : state) {
    if (Omp)
      omp::bilinear_sample(img.data(), c, h, w, pts.data(), m, fill.data(), false, out.data());
    else
      serial::bilinear_sample(img.data(), c, h, w, pts.data(), m, fill.data(), false, out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_gemm<false>)->Arg(64)->Arg(256);
BENCHMARK(BM_gemm<true>)->Arg(64)->Arg(256);
BENCHMARK(BM_im2col<false>)->Arg(32)->Arg(64);
BENCHMARK(BM_im2col<true>)->Arg(32)->Arg(64);
BENCHMARK(BM_softmax_rows<false>)->Arg(256)->Arg(1024);
BENCHMARK(BM_softmax_rows<true>)->Arg(256)->Arg(1024);
BENCHMARK(BM_bilinear<false>)->Arg(4096);
BENCHMARK(BM_bilinear<true>)->Arg(4096);

BENCHMARK_MAIN();
