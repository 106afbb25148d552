#pragma once

// Pseudo ground-truth flow from instance-ID'd box annotations.

#include <cstdint>
#include <vector>

#include "rafd/geometry.hpp"
#include "rafd/scenesim.hpp"
#include "rafd/tensor.hpp"

namespace rafd {

struct FlowField {
  Tensor<double> vectors;            // 2 x hf x wf, cells, (x, y)
  std::vector<std::uint8_t> mask;    // hf * wf, row-major
};

/// Center-point radius: the smallest corner perturbation radius at which some
/// configuration drops IoU below `min_overlap`, clamped from below by gamma.
double gaussian_radius(double h_cells, double w_cells, double gamma, double min_overlap = 0.7);

/// Flow between consecutive annotated frames. Boxes are in input pixels.
/// Each object present in both frames paints its displacement (current center
/// minus the previous center mapped into the current frame) onto every cell
/// within its radius; overlaps go to the nearest center, then the smaller id.
/// Throws std::invalid_argument on duplicate ids within a frame.
FlowField build_gt_flow(const std::vector<AnnotatedBox>& boxes_t, const std::vector<AnnotatedBox>& boxes_prev,
                        const Pose2& pose_t_to_prev, const GridSpec& spec, double gamma = 2.0);

}  // namespace rafd
