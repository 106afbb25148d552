#include <cmath>
#include <cstring>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "rafd/gradcheck.hpp"
#include "rafd/kernels.hpp"
#include "rafd/ops.hpp"
#include "rafd/params.hpp"
#include "rafd/snapshot.hpp"
#include "fixtures.hpp"
#include "test_util.hpp"

using namespace rafd;
using rafd::testing::random_tensor;
using rafd::testing::check_op;
using rafd::testing::random_weights;
using T = Tensor<double>;

namespace {

constexpr int kSeeds = 20;
constexpr double kGradTol = 1e-5;

T empty_bias() { return T(); }


}  // namespace

TEST_CASE("conv2d: ones kernel over ones input sums to 9") {
  T x(Shape{1, 3, 3}, 1.0), w(Shape{1, 1, 3, 3}, 1.0);
  T y = conv2d(x, w, empty_bias(), 1, 0);
  CHECK(y.shape() == Shape{1, 1, 1});
  CHECK(y.item() == 9.0);
}

TEST_CASE("conv2d: identity 1x1 kernel reproduces the input") {
  T x = random_tensor({2, 5, 4}, 3);
  T w(Shape{2, 2, 1, 1}, std::vector<double>{1, 0, 0, 1});
  T y = conv2d(x, w, empty_bias(), 1, 0);
  CHECK(y.vec() == x.vec());
}

TEST_CASE("conv2d: matches nested-loop reference on random inputs") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (std::size_t stride : {1u, 2u}) {
      for (std::size_t pad : {0u, 1u}) {
        T x = random_tensor({2, 8, 8}, seed), w = random_tensor({4, 2, 3, 3}, seed + 100), b = random_tensor({4}, seed + 7);
        T y = conv2d(x, w, b, stride, pad);
        std::size_t ho = 0, wo = 0;
        auto ref = oracle::conv2d(x.vec(), 2, 8, 8, w.vec(), 4, 3, b.vec(), stride, pad, ho, wo);
        CHECK(y.shape() == Shape{4, ho, wo});
        CHECK(rafd::testing::max_abs_diff(y.vec(), ref) < 1e-12);
      }
    }
  }
}

TEST_CASE("conv2d: batched input equals per-sample calls") {
  T x = random_tensor({3, 2, 6, 6}, 11), w = random_tensor({4, 2, 3, 3}, 12), b = random_tensor({4}, 13);
  T y = conv2d(x, w, b, 2, 1);
  for (std::size_t n = 0; n < 3; ++n) {
    T yn = conv2d(reshape(slice0(x, n, n + 1), {2, 6, 6}), w, b, 2, 1);
    std::vector<double> part(y.vec().begin() + n * yn.numel(), y.vec().begin() + (n + 1) * yn.numel());
    CHECK(part == yn.vec());
  }
}

TEST_CASE("conv2d: shape mismatch names the offending dimension") {
  T x(Shape{3, 5, 5}), w(Shape{2, 2, 3, 3});
  try {
    (void)conv2d(x, w, empty_bias(), 1, 0);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("dim 1 of weight") != std::string::npos);
  }
  T big(Shape{1, 1, 5, 5});
  CHECK_THROWS_AS(conv2d(T(Shape{1, 3, 3}), big, empty_bias(), 1, 0), ShapeError);
}

TEST_CASE("batchnorm2d: constant channel normalizes to zero") {
  T x(Shape{2, 1, 3, 3}, 4.5), g(Shape{1}, 1.0), b(Shape{1}, 0.0), rm(Shape{1}, 0.0), rv(Shape{1}, 1.0);
  T y = batchnorm2d(x, g, b, rm, rv, 1e-5, BatchNormMode::Train);
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("batchnorm2d: standardized channel passes through") {
  // Two-value channel with mean 0 and variance 1.
  T x(Shape{1, 1, 2, 2}, std::vector<double>{1, -1, 1, -1});
  T g(Shape{1}, 1.0), b(Shape{1}, 0.0), rm(Shape{1}, 0.0), rv(Shape{1}, 1.0);
  T y = batchnorm2d(x, g, b, rm, rv, 1e-5, BatchNormMode::Train);
  CHECK(rafd::testing::max_abs_diff(y.vec(), x.vec()) < 1e-5);
}

TEST_CASE("batchnorm2d: random input has per-channel zero mean and unit variance") {
  T x = random_tensor({3, 4, 5, 5}, 21, -3.0, 7.0);
  T g(Shape{4}, 1.0), b(Shape{4}, 0.0), rm(Shape{4}, 0.0), rv(Shape{4}, 1.0);
  T y = batchnorm2d(x, g, b, rm, rv, 1e-12, BatchNormMode::Train);
  for (std::size_t c = 0; c < 4; ++c) {
    double s = 0, s2 = 0;
    const std::size_t cnt = 3 * 25;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < 25; ++i) s += y.vec()[(n * 4 + c) * 25 + i];
    const double m = s / cnt;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < 25; ++i) s2 += std::pow(y.vec()[(n * 4 + c) * 25 + i] - m, 2);
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::abs(s2 / cnt - 1.0) < 1e-6);
  }
}

TEST_CASE("batchnorm2d: running statistics follow momentum 0.1 and drive eval mode") {
  T x(Shape{1, 1, 1, 2}, std::vector<double>{2.0, 4.0});
  T g(Shape{1}, 1.0), b(Shape{1}, 0.0), rm(Shape{1}, 0.0), rv(Shape{1}, 1.0);
  (void)batchnorm2d(x, g, b, rm, rv, 1e-5, BatchNormMode::Train);
  CHECK(rm.item() == doctest::Approx(0.3));
  // unbiased variance of {2, 4} is 2
  CHECK(rv.item() == doctest::Approx(0.9 + 0.2));
  T y = batchnorm2d(x, g, b, rm, rv, 1e-5, BatchNormMode::Eval);
  CHECK(y.vec()[0] == doctest::Approx((2.0 - 0.3) / std::sqrt(1.1 + 1e-5)));
}

TEST_CASE("batchnorm2d: channel mismatch is rejected") {
  T x(Shape{1, 3, 2, 2}), g(Shape{2}, 1.0), b(Shape{2}), rm(Shape{2}), rv(Shape{2}, 1.0);
  CHECK_THROWS_AS(batchnorm2d(x, g, b, rm, rv, 1e-5, BatchNormMode::Train), ShapeError);
}

TEST_CASE("softmax: equal logits give uniform distribution") {
  T x(Shape{5}, 0.7);
  T y = softmax(x, {0});
  for (double v : y.data()) CHECK(v == doctest::Approx(0.2));
}

TEST_CASE("softmax: large logits do not overflow") {
  T y = softmax(T(Shape{2}, std::vector<double>{1000.0, 0.0}), {0});
  CHECK(std::isfinite(y.vec()[0]));
  CHECK(y.vec()[0] == doctest::Approx(1.0));
  CHECK(y.vec()[1] < 1e-300);
}

TEST_CASE("softmax: slices sum to one for trailing and non-trailing axis sets") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    T x = random_tensor({3, 2, 4, 5}, seed, -20, 20);
    for (const std::vector<std::size_t>& axes : {std::vector<std::size_t>{2, 3}, {0, 2}, {1}, {0, 1, 2, 3}}) {
      T y = softmax(x, axes);
      std::vector<double> sums(x.numel(), 0.0);
      std::size_t idx = 0;
      for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = 0; b < 2; ++b)
          for (std::size_t c = 0; c < 4; ++c)
            for (std::size_t d = 0; d < 5; ++d, ++idx) {
              std::size_t key[4] = {a, b, c, d};
              for (std::size_t ax : axes) key[ax] = 0;
              sums[((key[0] * 2 + key[1]) * 4 + key[2]) * 5 + key[3]] += y.vec()[idx];
              CHECK(y.vec()[idx] >= 0.0);
            }
      for (std::size_t i = 0; i < sums.size(); ++i)
        if (sums[i] != 0.0) CHECK(std::abs(sums[i] - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("attention: near one-hot query returns the matching value row") {
  T k(Shape{3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  T q(Shape{1, 3}, std::vector<double>{0, 1000, 0});
  T v = random_tensor({3, 4}, 5);
  T y = scaled_dot_attention(q, k, v);
  for (std::size_t j = 0; j < 4; ++j) CHECK(y.vec()[j] == doctest::Approx(v.vec()[4 + j]).epsilon(1e-9));
}

TEST_CASE("attention: sequence length one returns v") {
  T q = random_tensor({4, 3}, 1), k = random_tensor({1, 3}, 2), v = random_tensor({1, 5}, 3);
  T y = scaled_dot_attention(q, k, v);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) CHECK(y.vec()[i * 5 + j] == doctest::Approx(v.vec()[j]).epsilon(1e-15));
}

TEST_CASE("attention: matches triple-loop reference") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    T q = random_tensor({5, 3}, seed), k = random_tensor({7, 3}, seed + 50), v = random_tensor({7, 4}, seed + 90);
    T y = scaled_dot_attention(q, k, v);
    CHECK(rafd::testing::max_abs_diff(y.vec(), oracle::attention(q.vec(), k.vec(), v.vec(), 5, 7, 3, 4)) < 1e-12);
  }
  CHECK_THROWS_AS(scaled_dot_attention(T(Shape{2, 3}), T(Shape{2, 4}), T(Shape{2, 4})), ShapeError);
  CHECK_THROWS_AS(scaled_dot_attention(T(Shape{2, 3}), T(Shape{2, 3}), T(Shape{3, 4})), ShapeError);
}

TEST_CASE("grid_sample: node, cell center and out-of-range fill") {
  T input(Shape{1, 2, 2}, std::vector<double>{0, 1, 2, 3});
  T fill(Shape{1, 1}, 7.0);
  T pts(Shape{2, 3}, std::vector<double>{1, 0.5, -5, 1, 0.5, -5});
  T y = grid_sample_bilinear(input, pts, fill);
  CHECK(y.vec()[0] == 3.0);
  CHECK(y.vec()[1] == 1.5);
  CHECK(y.vec()[2] == 7.0);
}

TEST_CASE("grid_sample: per-point fill and boundary inclusion") {
  T input = random_tensor({2, 3, 4}, 8);
  T pts(Shape{2, 3}, std::vector<double>{3.0, 3.0001, 0.0, 2.0, 1.0, -0.0001});
  T fill(Shape{2, 3}, std::vector<double>{10, 11, 12, 20, 21, 22});
  T y = grid_sample_bilinear(input, pts, fill);
  CHECK(y.vec()[0] == input.at({0, 2, 3}));  // (x=3, y=2) is the last node
  CHECK(y.vec()[1] == 11.0);
  CHECK(y.vec()[2] == 12.0);
  CHECK(y.vec()[3 + 1] == 21.0);
}

TEST_CASE("grad_check: linear scaling has exact gradient") {
  T x = random_tensor({6}, 1);
  auto rep = grad_check([](const std::vector<T>& in) { return sum(scale(in[0], 3.0)); }, {x});
  CHECK(rep.passed(1e-8));
  for (double g : x.grad()) CHECK(g == 3.0);
}

TEST_CASE("grad_check: softmax total is constant so its gradient vanishes") {
  T x = random_tensor({3, 4}, 2);
  auto rep = grad_check([](const std::vector<T>& in) { return sum(softmax(in[0], {1})); }, {x});
  CHECK(rep.passed(1e-5));
  for (double g : x.grad()) CHECK(std::abs(g) < 1e-12);
}

TEST_CASE("grad_check: reports non-finite gradients with entry index") {
  T x(Shape{2}, std::vector<double>{1.0, 0.0});
  // d/dx exp(1000 x) overflows for the first entry.
  auto rep = grad_check([](const std::vector<T>& in) { return sum(exp(scale(in[0], 1000.0))); }, {x});
  CHECK_FALSE(rep.finite);
  CHECK(rep.failure.find("entry 0") != std::string::npos);
}

TEST_CASE("every differentiable op passes finite-difference checks over 20 seeds") {
  for (const auto& c : rafd::testing::differentiable_ops()) {
    double worst = 0;
    for (int seed = 0; seed < kSeeds; ++seed) {
      auto rep = check_op(c.fn, rafd::testing::op_inputs(c, seed), seed);
      worst = std::max(worst, rep.max_rel_error);
      if (!rep.passed(kGradTol)) {
        INFO(std::string(c.name) << " seed " << seed << ": " << rep.describe());
        CHECK(rep.passed(kGradTol));
      }
    }
    INFO(std::string(c.name));
    CHECK(worst < kGradTol);
  }
}

TEST_CASE("grid_sample gradient w.r.t. input, points and fill") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    auto rep = check_op([](auto& in) { return grid_sample_bilinear(in[0], in[1], in[2]); },
                        rafd::testing::grid_sample_inputs(seed), seed);
    INFO(rep.describe());
    CHECK(rep.passed(kGradTol));
  }
}

TEST_CASE("focal loss gradient and oracle agreement") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    T pred = random_tensor({1, 4, 4}, seed, 0.05, 0.95);
    T target = random_tensor({1, 4, 4}, seed + 9, 0.0, 0.9);
    target.data_mut()[5] = 1.0;
    target.data_mut()[10] = 1.0;
    T l = focal_loss(pred, target);
    CHECK(std::abs(l.item() - oracle::focal(pred.vec(), target.vec())) < 1e-12);
    auto rep = grad_check([&](auto& in) { return focal_loss(in[0], target); }, {pred});
    CHECK(rep.passed(kGradTol));
  }
}

TEST_CASE("forward ops are deterministic") {
  T x = random_tensor({2, 8, 8}, 4), w = random_tensor({4, 2, 3, 3}, 5), b = random_tensor({4}, 6);
  T y1 = conv2d(x, w, b, 1, 1);
  T y2 = conv2d(x, w, b, 1, 1);
  CHECK(std::memcmp(y1.vec().data(), y2.vec().data(), y1.numel() * sizeof(double)) == 0);
}

TEST_CASE("serial and OpenMP kernels are bitwise identical") {
  using namespace rafd::kernels;
  std::vector<std::size_t> sizes = {1, 3, 17, 64};
  for (std::size_t m : sizes)
    for (std::size_t n : {5u, 33u, 600u})
      for (std::size_t k : {1u, 9u, 70u}) {
        auto a = random_tensor({m, k}, m * 7 + k).vec();
        auto b = random_tensor({k, n}, n * 3 + k).vec();
        std::vector<double> c1(m * n, 0.5), c2(m * n, 0.5);
        serial::gemm(Trans::No, Trans::No, m, n, k, a.data(), b.data(), c1.data(), true);
        set_num_threads(3);
        omp::gemm(Trans::No, Trans::No, m, n, k, a.data(), b.data(), c2.data(), true);
        set_num_threads(1);
        CHECK(std::memcmp(c1.data(), c2.data(), c1.size() * sizeof(double)) == 0);
        auto ref = oracle::matmul(a, b, m, k, n);
        for (auto& v : ref) v += 0.5;
        CHECK(rafd::testing::max_abs_diff(c1, ref) < 1e-10);
      }

  auto x = random_tensor({3, 9, 7}, 1).vec();
  std::vector<double> cols1(3 * 9 * 5 * 4), cols2(cols1.size());
  serial::im2col(x.data(), 3, 9, 7, 3, 3, 2, 1, cols1.data());
  set_num_threads(4);
  omp::im2col(x.data(), 3, 9, 7, 3, 3, 2, 1, cols2.data());
  CHECK(cols1 == cols2);
  std::vector<double> dx1(x.size(), 0.0), dx2(x.size(), 0.0);
  serial::col2im(cols1.data(), 3, 9, 7, 3, 3, 2, 1, dx1.data());
  omp::col2im(cols1.data(), 3, 9, 7, 3, 3, 2, 1, dx2.data());
  CHECK(std::memcmp(dx1.data(), dx2.data(), dx1.size() * sizeof(double)) == 0);

  auto logits = random_tensor({31, 45}, 2, -30, 30).vec();
  std::vector<double> s1(logits.size()), s2(logits.size());
  serial::softmax_rows(logits.data(), 31, 45, s1.data());
  omp::softmax_rows(logits.data(), 31, 45, s2.data());
  CHECK(std::memcmp(s1.data(), s2.data(), s1.size() * sizeof(double)) == 0);

  auto img = random_tensor({4, 6, 7}, 3).vec();
  auto pts = random_tensor({2, 50}, 4, -1.0, 7.5).vec();
  std::vector<double> fill(4, 9.0), o1(4 * 50), o2(4 * 50);
  serial::bilinear_sample(img.data(), 4, 6, 7, pts.data(), 50, fill.data(), false, o1.data());
  omp::bilinear_sample(img.data(), 4, 6, 7, pts.data(), 50, fill.data(), false, o2.data());
  set_num_threads(1);
  CHECK(std::memcmp(o1.data(), o2.data(), o1.size() * sizeof(double)) == 0);
}

TEST_CASE("snapshot encoding is little-endian RFTN with f64 payload") {
  T t(Shape{2, 1, 3}, std::vector<double>{1.5, -2, 0, 3.25, 1e-300, 7});
  std::ostringstream os;
  write_snapshot(os, t);
  const std::string bytes = os.str();
  REQUIRE(bytes.size() == snapshot_size(t.shape()));
  CHECK(bytes.substr(0, 4) == "RFTN");
  CHECK(static_cast<unsigned char>(bytes[4]) == 3);
  CHECK(static_cast<unsigned char>(bytes[8]) == 2);
  CHECK(static_cast<unsigned char>(bytes[16]) == 3);
  double first = 0;
  std::memcpy(&first, bytes.data() + 20, 8);
  CHECK(first == 1.5);
  std::istringstream is(bytes);
  T back = read_snapshot<double>(is);
  CHECK(back.shape() == t.shape());
  CHECK(std::memcmp(back.vec().data(), t.vec().data(), t.numel() * sizeof(double)) == 0);
  std::istringstream bad("RFTX0000");
  CHECK_THROWS(read_snapshot<double>(bad));
}

TEST_CASE("parameter store initialization is a pure function of order, shape and seed") {
  ParameterStore<double> a(42), b(42), c(43);
  for (auto* s : {&a, &b, &c}) {
    s->add("x.weight", {3, 4}, Init::normal(0.5));
    s->add("x.bias", {4}, Init::uniform(0.1));
    s->add_buffer("x.running_mean", {4}, 0.0);
  }
  CHECK(a.get("x.weight").vec() == b.get("x.weight").vec());
  CHECK(a.get("x.bias").vec() == b.get("x.bias").vec());
  CHECK(a.get("x.weight").vec() != c.get("x.weight").vec());
  CHECK(a.parameter_count() == 16);
  CHECK_FALSE(a.trainable("x.running_mean"));
  CHECK_THROWS(a.add("x.bias", {1}, Init::zeros()));
  CHECK(a.names().size() == 3);
}
