#include "rafd/geometry.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "rafd/ops.hpp"

namespace rafd {

std::array<double, 4> rotation_matrix(double theta) {
  const double c = std::cos(theta), s = std::sin(theta);
  return {c, -s, s, c};
}

Pose2 compose(const Pose2& a, const Pose2& b) {
  const auto r = rotation_matrix(a.theta);
  return {r[0] * b.tx + r[1] * b.ty + a.tx, r[2] * b.tx + r[3] * b.ty + a.ty, a.theta + b.theta};
}

Pose2 inverse(const Pose2& p) {
  const auto r = rotation_matrix(-p.theta);
  return {-(r[0] * p.tx + r[1] * p.ty), -(r[2] * p.tx + r[3] * p.ty), -p.theta};
}

Vec2 apply(const Pose2& pose, Vec2 p, Vec2 center) {
  // Exact for pure translations, where the pivot cancels.
  if (pose.theta == 0.0) return {p.x + pose.tx, p.y + pose.ty};
  const auto r = rotation_matrix(pose.theta);
  const double dx = p.x - center.x, dy = p.y - center.y;
  return {r[0] * dx + r[1] * dy + center.x + pose.tx, r[2] * dx + r[3] * dy + center.y + pose.ty};
}

void GridSpec::validate() const {
  auto check = [](std::size_t v, const char* name) {
    if (v < 4 || v % 4 != 0)
      throw std::invalid_argument(std::string("GridSpec: ") + name + " must be >= 4 and divisible by 4, got " +
                                  std::to_string(v));
  };
  check(hf, "hf");
  check(wf, "wf");
  if (stride == 0) throw std::invalid_argument("GridSpec: stride must be positive");
}

Vec2 GridSpec::pixel_to_cell(Vec2 px) const {
  const double s = static_cast<double>(stride), off = (s - 1.0) / 2.0;
  return {(px.x - off) / s, (px.y - off) / s};
}

Vec2 GridSpec::cell_to_pixel(Vec2 cell) const {
  const double s = static_cast<double>(stride), off = (s - 1.0) / 2.0;
  return {cell.x * s + off, cell.y * s + off};
}

Pose2 relative_pose_cells(const Pose2& ego_t, const Pose2& ego_prev, double cell_size_m, std::size_t stride) {
  const auto r = rotation_matrix(-ego_prev.theta);
  const double dx = ego_t.tx - ego_prev.tx, dy = ego_t.ty - ego_prev.ty;
  const double unit = cell_size_m * static_cast<double>(stride);
  return {(r[0] * dx + r[1] * dy) / unit, (r[2] * dx + r[3] * dy) / unit, ego_t.theta - ego_prev.theta};
}

template <typename T>
Tensor<T> grid_coords(const GridSpec& spec) {
  const std::size_t h = spec.hf, w = spec.wf;
  std::vector<T> v(2 * h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      v[i * w + j] = static_cast<T>(j);
      v[h * w + i * w + j] = static_cast<T>(i);
    }
  return Tensor<T>(Shape{2, h, w}, std::move(v));
}

template <typename T>
Tensor<T> transform_points(const Tensor<T>& points, const Pose2& pose, Vec2 center) {
  if (points.rank() != 2 || points.dim(0) != 2)
    throw ShapeError("transform_points: points must be 2 x M, got " + shape_str(points.shape()));
  const std::size_t m = points.dim(1);
  const auto r = rotation_matrix(pose.theta);
  std::vector<T> y(2 * m);
  for (std::size_t i = 0; i < m; ++i) {
    const Vec2 q = apply(pose, {static_cast<double>(points.data()[i]), static_cast<double>(points.data()[m + i])}, center);
    y[i] = static_cast<T>(q.x);
    y[m + i] = static_cast<T>(q.y);
  }
  auto pi = points.impl();
  return detail::make_result<T>(Shape{2, m}, std::move(y), {points}, [pi, r, m](const TensorImpl<T>& out) {
    auto& g = pi->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const double gx = out.grad[i], gy = out.grad[m + i];
      g[i] += static_cast<T>(r[0] * gx + r[2] * gy);
      g[m + i] += static_cast<T>(r[1] * gx + r[3] * gy);
    }
  });
}

template <typename T>
Tensor<T> align_to_current(const Tensor<T>& prev_feat, const Pose2& pose_t_to_prev, const Tensor<T>& curr_feat) {
  if (prev_feat.rank() != 3 || prev_feat.shape() != curr_feat.shape())
    throw ShapeError("align_to_current: expected matching C x H x W maps, got " + shape_str(prev_feat.shape()) +
                     " and " + shape_str(curr_feat.shape()));
  const std::size_t c = prev_feat.dim(0), h = prev_feat.dim(1), w = prev_feat.dim(2);
  const Vec2 center{(static_cast<double>(w) - 1.0) / 2.0, (static_cast<double>(h) - 1.0) / 2.0};
  Tensor<T> pts;
  {
    NoGradGuard ng;
    pts = transform_points(reshape(grid_coords<T>(GridSpec{h, w, 1}), {2, h * w}), pose_t_to_prev, center);
  }
  Tensor<T> sampled = grid_sample_bilinear(prev_feat, pts, reshape(curr_feat, {c, h * w}));
  return reshape(sampled, {c, h, w});
}

template Tensor<float> grid_coords(const GridSpec&);
template Tensor<double> grid_coords(const GridSpec&);
template Tensor<float> transform_points(const Tensor<float>&, const Pose2&, Vec2);
template Tensor<double> transform_points(const Tensor<double>&, const Pose2&, Vec2);
template Tensor<float> align_to_current(const Tensor<float>&, const Pose2&, const Tensor<float>&);
template Tensor<double> align_to_current(const Tensor<double>&, const Pose2&, const Tensor<double>&);

}  // namespace rafd
