#pragma once

// Shared fixtures and engine-aware oracles for the unit tests and the
// acceptance run. The plain-vector oracles live in oracles.hpp.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "oracles.hpp"
#include "rafd/eval.hpp"
#include "rafd/flowgt.hpp"
#include "rafd/gradcheck.hpp"
#include "rafd/net.hpp"
#include "rafd/ops.hpp"
#include "test_util.hpp"

namespace rafd::testing {

inline bool same_bits(const Tensor<double>& a, const Tensor<double>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

// 16 x 16 input, 4 x 4 feature map, one block of each kind.
inline NetConfig toy_config() {
  NetConfig c;
  c.hf = c.wf = 4;
  c.window_h = c.window_w = 2;
  c.cf = 8;
  c.c_stem = 4;
  c.c_mid = 4;
  c.c_deep = 8;
  c.k_queries = 2;
  c.n_deform_points = 2;
  c.n_enhance_blocks = 1;
  c.n_cross_blocks = 1;
  c.n_prop_blocks = 1;
  c.n_decoder_layers = 1;
  return c;
}

inline Tensor<double> toy_image(std::uint64_t seed, std::size_t size = 16) {
  return random_tensor({1, size, size}, seed, 0.0, 1.0);
}

// ---- gradients ----

using OpFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

struct OpCase {
  const char* name;
  OpFn fn;
  std::vector<Shape> shapes;
};

inline const std::vector<OpCase>& differentiable_ops() {
  using T = Tensor<double>;
  static T rm(Shape{3}, 0.0), rv(Shape{3}, 1.0);
  static const std::vector<std::uint8_t> mask = {1, 0, 1, 1, 1, 0, 0, 1, 1, 1, 1, 0};
  static const std::vector<OpCase> cases = {
      {"add", [](auto& in) { return add(in[0], in[1]); }, {{3, 4}, {3, 4}}},
      {"sub", [](auto& in) { return sub(in[0], in[1]); }, {{3, 4}, {3, 4}}},
      {"mul", [](auto& in) { return mul(in[0], in[1]); }, {{3, 4}, {3, 4}}},
      {"relu", [](auto& in) { return relu(in[0]); }, {{4, 5}}},
      {"sigmoid", [](auto& in) { return sigmoid(in[0]); }, {{4, 5}}},
      {"tanh", [](auto& in) { return tanh(in[0]); }, {{4, 5}}},
      {"exp", [](auto& in) { return exp(in[0]); }, {{4, 5}}},
      {"mean", [](auto& in) { return mean(in[0]); }, {{4, 5}}},
      {"sum", [](auto& in) { return sum(in[0]); }, {{4, 5}}},
      {"l1_loss", [](auto& in) { return l1_loss(in[0], in[1]); }, {{3, 4}, {3, 4}}},
      {"matmul", [](auto& in) { return matmul(in[0], in[1]); }, {{3, 5}, {5, 4}}},
      {"transpose", [](auto& in) { return transpose2d(in[0]); }, {{3, 5}}},
      {"linear", [](auto& in) { return linear(in[0], in[1], in[2]); }, {{4, 3}, {5, 3}, {5}}},
      {"add_rowvec", [](auto& in) { return add_rowvec(in[0], in[1]); }, {{4, 3}, {3}}},
      {"layer_scale_add", [](auto& in) { return layer_scale_add(in[0], in[1], in[2]); }, {{4, 3}, {4, 3}, {3}}},
      {"layer_norm", [](auto& in) { return layer_norm(in[0], in[1], in[2]); }, {{4, 6}, {6}, {6}}},
      {"batchnorm_train",
       [](auto& in) { return batchnorm2d(in[0], in[1], in[2], rm, rv, 1e-5, BatchNormMode::Train); },
       {{2, 3, 3, 3}, {3}, {3}}},
      {"batchnorm_eval",
       [](auto& in) { return batchnorm2d(in[0], in[1], in[2], rm, rv, 1e-5, BatchNormMode::Eval); },
       {{2, 3, 3, 3}, {3}, {3}}},
      {"softmax_trailing", [](auto& in) { return softmax(in[0], {2, 3}); }, {{2, 2, 3, 3}}},
      {"softmax_inner", [](auto& in) { return softmax(in[0], {0, 2}); }, {{2, 3, 4}}},
      {"attention", [](auto& in) { return scaled_dot_attention(in[0], in[1], in[2]); }, {{4, 3}, {5, 3}, {5, 2}}},
      {"attention_masked",
       [](auto& in) { return scaled_dot_attention(in[0], in[1], in[2], &mask); },
       {{3, 3}, {4, 3}, {4, 2}}},
      {"conv2d", [](auto& in) { return conv2d(in[0], in[1], in[2], 1, 1); }, {{2, 5, 5}, {3, 2, 3, 3}, {3}}},
      {"conv2d_strided", [](auto& in) { return conv2d(in[0], in[1], in[2], 2, 1); }, {{2, 2, 6, 6}, {3, 2, 3, 3}, {3}}},
      {"concat_slice",
       [](auto& in) { return slice0(concat0(std::vector<T>{in[0], in[1]}), 1, 4); },
       {{2, 3}, {3, 3}}},
      {"slice_cols", [](auto& in) { return slice_cols(in[0], 1, 3); }, {{4, 5}}},
      {"gather_rows", [](auto& in) { return gather_rows(in[0], {2, 0, 2, 1}); }, {{3, 4}}},
      {"reshape", [](auto& in) { return reshape(in[0], {6, 2}); }, {{3, 4}}},
      {"group_weighted_sum", [](auto& in) { return group_weighted_sum(in[0], in[1]); }, {{3, 8}, {2, 4}}},
  };
  return cases;
}

// Grad-checks `f` scalarized by a fixed random weighting of its output.
inline GradCheckReport check_op(const OpFn& f, std::vector<Tensor<double>> inputs, std::uint64_t seed,
                                const GradCheckOptions& options = {}) {
  std::vector<double> w;
  ScalarClosure closure = [&](const std::vector<Tensor<double>>& in) {
    Tensor<double> y = f(in);
    if (w.empty()) w = random_weights(y.numel(), seed);
    return weighted_sum(y, w);
  };
  return grad_check(closure, std::move(inputs), options);
}

inline std::vector<Tensor<double>> op_inputs(const OpCase& c, std::uint64_t seed) {
  std::vector<Tensor<double>> inputs;
  for (std::size_t i = 0; i < c.shapes.size(); ++i) inputs.push_back(random_tensor(c.shapes[i], seed * 31 + i));
  return inputs;
}

// Bilinear sampling inputs kept away from integer kinks, plus two points outside.
inline std::vector<Tensor<double>> grid_sample_inputs(std::uint64_t seed) {
  Tensor<double> input = random_tensor({2, 4, 5}, seed);
  Tensor<double> pts = random_tensor({2, 6}, seed + 1000, 0.1, 2.9);
  pts.data_mut()[4] = -3.0;
  pts.data_mut()[6 + 5] = 9.0;
  return {input, pts, random_tensor({2, 6}, seed + 2000)};
}

inline Tensor<double> weigh(const Tensor<double>& t, std::uint64_t seed) {
  return weighted_sum(t, random_weights(t.numel(), seed));
}

inline Tensor<double> scalarize(const ForwardOutput<double>& o, std::uint64_t seed) {
  Tensor<double> s = add(weigh(o.heatmap, seed), weigh(o.offsets, seed + 1));
  s = add(s, weigh(o.log_size, seed + 2));
  s = add(s, weigh(o.angle, seed + 3));
  for (std::size_t i = 0; i < o.flows.size(); ++i) s = add(s, weigh(o.flows[i], seed + 10 + i));
  return s;
}

inline std::vector<Tensor<double>> with_params(std::vector<Tensor<double>> inputs, const RaFDNet<double>& net) {
  for (const auto& t : net.store().trainable_tensors()) inputs.push_back(t);
  return inputs;
}

// Input image plus every parameter, two sampled entries each, through the
// whole two-frame forward with the query cells pinned.
inline GradCheckReport end_to_end_grad_check(std::uint64_t seed) {
  static const std::vector<std::size_t> cells{5, 10};
  RaFDNet<double> net(toy_config(), 200 + seed);
  const Pose2 pose{0.3, -0.45, 0.06};
  const Tensor<double> prev = toy_image(300 + seed);
  GradCheckOptions opts;
  opts.max_entries_per_input = 2;
  return grad_check([&](auto& in) { return scalarize(net.forward_pair(prev, in[0], pose, &cells), seed); },
                    with_params({toy_image(400 + seed)}, net), opts);
}

// ---- deformable attention ----

// Loop reference for block `block` of the propagation module: per token,
// linear offsets and weights, softmax over points, bilinear taps with zero
// outside [0, w-1] x [0, h-1].
inline double deform_attend_error(RaFDNet<double>& net, std::size_t block, const Tensor<double>& query,
                                  const Tensor<double>& vmap, const Tensor<double>& refs) {
  const Tensor<double> got = net.deform_attend(block, query, vmap, refs);
  const std::string pre = "prop.b" + std::to_string(block) + ".";
  const auto W = net.store().get(pre + "off.w").data(), B = net.store().get(pre + "off.b").data();
  const auto Wa = net.store().get(pre + "attw.w").data(), Ba = net.store().get(pre + "attw.b").data();
  const std::size_t c = vmap.dim(0), h = vmap.dim(1), w = vmap.dim(2), n = h * w, P = net.config().n_deform_points;
  auto sample = [&](std::size_t ch, double x, double y) {
    if (x < 0 || y < 0 || x > static_cast<double>(w - 1) || y > static_cast<double>(h - 1)) return 0.0;
    const std::size_t x0 = std::min(static_cast<std::size_t>(x), w - 2), y0 = std::min(static_cast<std::size_t>(y), h - 2);
    const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
    return (1 - fx) * (1 - fy) * vmap.at({ch, y0, x0}) + fx * (1 - fy) * vmap.at({ch, y0, x0 + 1}) +
           (1 - fx) * fy * vmap.at({ch, y0 + 1, x0}) + fx * fy * vmap.at({ch, y0 + 1, x0 + 1});
  };
  double worst = 0;
  for (std::size_t t = 0; t < n; ++t) {
    std::vector<double> off(2 * P), lw(P);
    for (std::size_t o = 0; o < 2 * P; ++o) {
      off[o] = B[o];
      for (std::size_t i = 0; i < c; ++i) off[o] += W[o * c + i] * query.at({t, i});
    }
    for (std::size_t o = 0; o < P; ++o) {
      lw[o] = Ba[o];
      for (std::size_t i = 0; i < c; ++i) lw[o] += Wa[o * c + i] * query.at({t, i});
    }
    const double mx = *std::max_element(lw.begin(), lw.end());
    double z = 0;
    for (auto& l : lw) z += (l = std::exp(l - mx));
    const double rx = refs.data()[t], ry = refs.data()[n + t];
    for (std::size_t ch = 0; ch < c; ++ch) {
      double ref = 0;
      for (std::size_t p = 0; p < P; ++p) ref += lw[p] / z * sample(ch, rx + off[2 * p], ry + off[2 * p + 1]);
      worst = std::max(worst, std::abs(ref - got.at({t, ch})));
    }
  }
  return worst;
}

// ---- pseudo ground-truth flow ----

struct FlowScene {
  std::vector<AnnotatedBox> cur, prev;
  Pose2 pose;
  double gamma = 2.0;
};

inline FlowScene random_flow_scene(std::uint64_t seed, const GridSpec& spec) {
  std::mt19937_64 rng(seed);
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const double size = static_cast<double>(spec.wf * spec.stride);
  FlowScene s;
  s.pose = {u(-2, 2), u(-2, 2), u(-0.3, 0.3)};
  s.gamma = u(0.5, 3.0);
  const int n = static_cast<int>(u(1, 7));
  for (int k = 0; k < n; ++k) {
    const int id = 3 * k + static_cast<int>(u(0, 3));
    AnnotatedBox b{id, u(0, size), u(0, size), u(4, 40), u(4, 40), u(-1.5, 1.5)};
    // Shared centers exercise the id tie-break.
    if (!s.cur.empty() && u(0, 1) < 0.2) {
      b.cx = s.cur.back().cx;
      b.cy = s.cur.back().cy;
    }
    const double roll = u(0, 1);
    if (roll < 0.8) s.cur.push_back(b);
    if (roll > 0.1) s.prev.push_back({id, b.cx + u(-8, 8), b.cy + u(-8, 8), b.w, b.h, b.theta});
  }
  return s;
}

struct FlowOracle {
  std::vector<int> owner;  // -1 for background
  std::vector<double> vx, vy;
};

// Per-cell brute force: gather every object whose disk covers the cell, sort
// by (distance, id) and take the first.
inline FlowOracle brute_force_flow(const FlowScene& s, const GridSpec& spec) {
  const double st = static_cast<double>(spec.stride), off = (st - 1) / 2;
  const double cx = (static_cast<double>(spec.wf) - 1) / 2, cy = (static_cast<double>(spec.hf) - 1) / 2;
  const double c = std::cos(s.pose.theta), sn = std::sin(s.pose.theta);
  const std::size_t n = spec.hf * spec.wf;
  FlowOracle out{std::vector<int>(n, -1), std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
  for (std::size_t i = 0; i < spec.hf; ++i)
    for (std::size_t j = 0; j < spec.wf; ++j) {
      std::vector<std::tuple<double, int, double, double>> cands;
      for (const auto& bt : s.cur) {
        const AnnotatedBox* bp = nullptr;
        for (const auto& q : s.prev)
          if (q.id == bt.id) bp = &q;
        if (!bp) continue;
        const double tx = (bt.cx - off) / st, ty = (bt.cy - off) / st;
        const double px = (bp->cx - off) / st - cx - s.pose.tx, py = (bp->cy - off) / st - cy - s.pose.ty;
        // R^T (p - c - t) + c
        const double ax = c * px + sn * py + cx, ay = -sn * px + c * py + cy;
        const double sigma = gaussian_radius(bt.h / st, bt.w / st, s.gamma);
        const double d = std::hypot(static_cast<double>(j) - tx, static_cast<double>(i) - ty);
        if (d <= sigma) cands.emplace_back(d, bt.id, tx - ax, ty - ay);
      }
      if (cands.empty()) continue;
      std::sort(cands.begin(), cands.end());
      const auto& [d, id, vx, vy] = cands.front();
      out.owner[i * spec.wf + j] = id;
      out.vx[i * spec.wf + j] = vx;
      out.vy[i * spec.wf + j] = vy;
    }
  return out;
}

// Largest disagreement between build_gt_flow and the brute force, with mask
// mismatches counted as infinite.
inline double gt_flow_error(const FlowScene& s, const GridSpec& spec) {
  const FlowField f = build_gt_flow(s.cur, s.prev, s.pose, spec, s.gamma);
  const FlowOracle o = brute_force_flow(s, spec);
  const std::size_t n = spec.hf * spec.wf;
  double worst = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (static_cast<bool>(f.mask[k]) != (o.owner[k] >= 0)) return HUGE_VAL;
    worst = std::max({worst, std::abs(f.vectors.data()[k] - o.vx[k]), std::abs(f.vectors.data()[n + k] - o.vy[k])});
  }
  return worst;
}

// ---- rotated IoU ----

inline bool inside_box(const OrientedBox& b, double x, double y) {
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  const double dx = x - b.cx, dy = y - b.cy;
  return std::abs(c * dx + s * dy) <= b.w / 2 && std::abs(-s * dx + c * dy) <= b.h / 2;
}

// Uniform sampling over the joint bounding rectangle.
inline double monte_carlo_iou(const OrientedBox& a, const OrientedBox& b, std::size_t n, std::uint64_t seed) {
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
  for (const auto& box : {a, b})
    for (const auto& p : box.corners()) {
      x0 = std::min(x0, p.x);
      y0 = std::min(y0, p.y);
      x1 = std::max(x1, p.x);
      y1 = std::max(y1, p.y);
    }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(x0, x1), uy(y0, y1);
  std::size_t both = 0, either = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = ux(rng), y = uy(rng);
    const bool ia = inside_box(a, x, y), ib = inside_box(b, x, y);
    both += ia && ib;
    either += ia || ib;
  }
  return either ? static_cast<double>(both) / static_cast<double>(either) : 0.0;
}

inline OrientedBox random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(-2, 2), size(0.5, 4), ang(-std::numbers::pi, std::numbers::pi);
  return {pos(rng), pos(rng), size(rng), size(rng), ang(rng)};
}

// Pairs pulled toward each other so most overlap.
inline std::pair<OrientedBox, OrientedBox> random_box_pair(std::mt19937_64& rng) {
  OrientedBox a = random_box(rng), b = random_box(rng);
  b.cx = a.cx + 0.4 * (b.cx - a.cx);
  b.cy = a.cy + 0.4 * (b.cy - a.cy);
  return {a, b};
}

}  // namespace rafd::testing
