#include "rafd/flowgt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>

namespace rafd {

namespace {

// Smaller root of a r^2 - b r + c = 0.
double small_root(double a, double b, double c) {
  const double disc = std::max(0.0, b * b - 4 * a * c);
  return (b - std::sqrt(disc)) / (2 * a);
}

std::map<int, const AnnotatedBox*> index_by_id(const std::vector<AnnotatedBox>& boxes, const char* which) {
  std::map<int, const AnnotatedBox*> out;
  for (const auto& b : boxes)
    if (!out.emplace(b.id, &b).second)
      throw std::invalid_argument(std::string("build_gt_flow: duplicate id ") + std::to_string(b.id) + " in " + which +
                                  " frame");
  return out;
}

}  // namespace

double gaussian_radius(double h, double w, double gamma, double o) {
  // One corner in, one out: (h-r)(w-r) / (2hw - (h-r)(w-r)) = o.
  const double r1 = small_root(1.0, h + w, w * h * (1 - o) / (1 + o));
  // Both corners inward: (h-2r)(w-2r) / hw = o.
  const double r2 = small_root(4.0, 2 * (h + w), (1 - o) * w * h);
  // Both corners outward: hw / ((h+2r)(w+2r)) = o.
  const double a3 = 4 * o, b3 = 2 * o * (h + w), c3 = (o - 1) * w * h;
  const double r3 = (-b3 + std::sqrt(b3 * b3 - 4 * a3 * c3)) / (2 * a3);
  return std::max(std::min({r1, r2, r3}), gamma);
}

FlowField build_gt_flow(const std::vector<AnnotatedBox>& boxes_t, const std::vector<AnnotatedBox>& boxes_prev,
                        const Pose2& pose_t_to_prev, const GridSpec& spec, double gamma) {
  const auto cur = index_by_id(boxes_t, "current");
  const auto prev = index_by_id(boxes_prev, "previous");
  const Pose2 back = inverse(pose_t_to_prev);
  const double s = static_cast<double>(spec.stride);

  struct Object {
    int id;
    Vec2 center, disp;
    double sigma;
  };
  std::vector<Object> objects;
  for (const auto& [id, bt] : cur) {
    auto it = prev.find(id);
    if (it == prev.end()) continue;
    const Vec2 ct = spec.pixel_to_cell({bt->cx, bt->cy});
    const Vec2 cp = apply(back, spec.pixel_to_cell({it->second->cx, it->second->cy}), spec.center());
    objects.push_back({id, ct, {ct.x - cp.x, ct.y - cp.y}, gaussian_radius(bt->h / s, bt->w / s, gamma)});
  }

  const std::size_t h = spec.hf, w = spec.wf;
  FlowField f{Tensor<double>(Shape{2, h, w}, 0.0), std::vector<std::uint8_t>(h * w, 0)};
  auto v = f.vectors.data_mut();
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const Object* best = nullptr;
      double best_d = std::numeric_limits<double>::infinity();
      for (const auto& o : objects) {  // ascending id, so strict < keeps the smaller id on ties
        const double d = std::hypot(static_cast<double>(j) - o.center.x, static_cast<double>(i) - o.center.y);
        if (d <= o.sigma && d < best_d) {
          best = &o;
          best_d = d;
        }
      }
      if (!best) continue;
      v[i * w + j] = best->disp.x;
      v[h * w + i * w + j] = best->disp.y;
      f.mask[i * w + j] = 1;
    }
  return f;
}

}  // namespace rafd
