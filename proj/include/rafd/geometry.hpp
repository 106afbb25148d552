#pragma once

// Grid conventions and planar rigid transforms between frames.
//
// Coordinates are (x, y) = (column, row) everywhere. Rotations pivot about the
// grid center ((w-1)/2, (h-1)/2), where the simulated sensor sits.

#include <array>
#include <cstddef>

#include "rafd/tensor.hpp"

namespace rafd {

/// SE(2) transform acting on grid coordinates: p' = R(theta)(p - c) + c + t.
struct Pose2 {
  double tx = 0.0;
  double ty = 0.0;
  double theta = 0.0;
};

/// compose(a, b) applies b first, then a.
Pose2 compose(const Pose2& a, const Pose2& b);
Pose2 inverse(const Pose2& p);
/// Row-major 2x2 rotation matrix.
std::array<double, 4> rotation_matrix(double theta);

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

/// Transforms one point with rotation pivot `center`.
Vec2 apply(const Pose2& pose, Vec2 p, Vec2 center);

struct GridSpec {
  std::size_t hf = 32;
  std::size_t wf = 32;
  std::size_t stride = 4;

  /// Throws std::invalid_argument unless hf, wf >= 4 and divisible by 4.
  void validate() const;
  Vec2 center() const { return {(static_cast<double>(wf) - 1.0) / 2.0, (static_cast<double>(hf) - 1.0) / 2.0}; }
  /// Input-pixel coordinate to feature-cell coordinate (cell centers).
  Vec2 pixel_to_cell(Vec2 px) const;
  Vec2 cell_to_pixel(Vec2 cell) const;
};

/// Relative pose T_{t -> prev} in feature cells from metric world poses of
/// the ego at both frames. `cell_size_m` is metres per input pixel.
Pose2 relative_pose_cells(const Pose2& ego_t, const Pose2& ego_prev, double cell_size_m, std::size_t stride);

/// 2 x hf x wf coordinate grid G with G[:, i, j] = (j, i).
template <typename T>
Tensor<T> grid_coords(const GridSpec& spec);

/// Rigid transform of 2 x M points about `center`; differentiable w.r.t. points.
template <typename T>
Tensor<T> transform_points(const Tensor<T>& points, const Pose2& pose, Vec2 center);

/// Warps prev_feat into the current frame: every current cell is mapped by
/// `pose_t_to_prev` and prev_feat is bilinearly sampled there. Cells that land
/// outside the previous map keep curr_feat's value.
template <typename T>
Tensor<T> align_to_current(const Tensor<T>& prev_feat, const Pose2& pose_t_to_prev, const Tensor<T>& curr_feat);

}  // namespace rafd
