#pragma once

// Detection and flow metrics.

#include <array>
#include <cstddef>
#include <vector>

#include "json.hpp"
#include "rafd/net.hpp"
#include "rafd/train.hpp"

namespace rafd {

/// Rectangle in feature cells; w spans the theta axis. theta and theta + pi
/// describe the same box.
struct OrientedBox {
  double cx = 0, cy = 0, w = 0, h = 0, theta = 0;

  std::array<Vec2, 4> corners() const;
  double area() const { return w * h; }
};

/// Intersection over union of two rotated rectangles; 0 when either box has
/// (near-)zero area.
double rotated_iou(const OrientedBox& a, const OrientedBox& b);

struct ScoredBox {
  OrientedBox box;
  double score = 0;
};

/// Single-class average precision over frames. Detections are pooled and
/// ranked by score (ties: frame, then center row, then column); each is
/// matched to the highest-IoU unmatched ground truth in its frame when that
/// IoU reaches `iou_threshold`. AP is the area under the all-point
/// interpolated precision-recall curve.
double map_at(const std::vector<std::vector<ScoredBox>>& detections,
              const std::vector<std::vector<OrientedBox>>& ground_truth, double iou_threshold);

struct EpeResult {
  double all = 0;
  double fg = 0;
};

/// Mean per-cell endpoint error over all cells and over the masked ones
/// (fg is 0 for an empty mask). Fields are 2 x H x W.
EpeResult epe(const Tensor<double>& pred, const Tensor<double>& target, const std::vector<std::uint8_t>& mask);

struct EvalReport {
  double map30 = 0, map50 = 0, map70 = 0;
  double epe_all = 0, epe_fg = 0;
  std::size_t n_frames = 0, n_gt = 0;

  nlohmann::json to_json() const;
};

OrientedBox to_oriented(const Detection& d);
OrientedBox to_oriented(const CellBox& b);

struct EvalOptions {
  std::size_t n_frames = 2;
  std::size_t tau = 1;
  double gamma = 2.0;
  /// Use ground-truth boxes and flow in place of network outputs.
  bool oracle = false;
};

/// Per-tuple outputs kept for rendering.
struct EvalFrame {
  Sample sample;
  std::vector<ScoredBox> detections;
  std::vector<OrientedBox> ground_truth;
  Tensor<double> flow;     // last pair, predicted
  Tensor<double> gt_flow;  // last pair
};

/// Runs the network (eval mode, top-K queries) over every tuple of the
/// dataset and scores the last frame of each tuple. Flow error pools every
/// consecutive pair of every tuple.
template <typename T>
EvalReport evaluate(RaFDNet<T>& net, const Dataset& data, const EvalOptions& options,
                    std::vector<EvalFrame>* frames = nullptr);

}  // namespace rafd
