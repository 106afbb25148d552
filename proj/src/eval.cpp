#include "rafd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

namespace rafd {

std::array<Vec2, 4> OrientedBox::corners() const {
  const double c = std::cos(theta), s = std::sin(theta);
  const double hw = w / 2, hh = h / 2;
  std::array<Vec2, 4> out;
  const double sx[4] = {-1, 1, 1, -1}, sy[4] = {-1, -1, 1, 1};
  for (int k = 0; k < 4; ++k) {
    const double x = sx[k] * hw, y = sy[k] * hh;
    out[k] = {cx + c * x - s * y, cy + s * x + c * y};
  }
  return out;
}

namespace {

constexpr double kMinArea = 1e-12;

double cross(const Vec2& o, const Vec2& a, const Vec2& b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

double shoelace(const std::vector<Vec2>& poly) {
  double s = 0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2& a = poly[i];
    const Vec2& b = poly[(i + 1) % poly.size()];
    s += a.x * b.y - b.x * a.y;
  }
  return s / 2;
}

// Sutherland-Hodgman: clip `subject` by every edge of the counter-clockwise
// convex polygon `clip`.
std::vector<Vec2> clip_polygon(std::vector<Vec2> subject, const std::vector<Vec2>& clip) {
  for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
    const Vec2& a = clip[e];
    const Vec2& b = clip[(e + 1) % clip.size()];
    std::vector<Vec2> out;
    for (std::size_t i = 0; i < subject.size(); ++i) {
      const Vec2& p = subject[i];
      const Vec2& q = subject[(i + 1) % subject.size()];
      const double dp = cross(a, b, p), dq = cross(a, b, q);
      if (dp >= 0) out.push_back(p);
      if ((dp >= 0) != (dq >= 0)) {
        const double t = dp / (dp - dq);
        out.push_back({p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)});
      }
    }
    subject = std::move(out);
  }
  return subject;
}

std::vector<Vec2> ccw_corners(const OrientedBox& b) {
  const auto c = b.corners();
  std::vector<Vec2> poly(c.begin(), c.end());
  if (shoelace(poly) < 0) std::reverse(poly.begin(), poly.end());
  return poly;
}

}  // namespace

double rotated_iou(const OrientedBox& a, const OrientedBox& b) {
  const double area_a = a.area(), area_b = b.area();
  if (!(area_a > kMinArea) || !(area_b > kMinArea)) return 0.0;
  const auto pa = ccw_corners(a), pb = ccw_corners(b);
  const auto inter_poly = clip_polygon(pa, pb);
  const double inter = inter_poly.size() < 3 ? 0.0 : std::abs(shoelace(inter_poly));
  const double iou = inter / (area_a + area_b - inter);
  return std::clamp(iou, 0.0, 1.0);
}

double map_at(const std::vector<std::vector<ScoredBox>>& detections,
              const std::vector<std::vector<OrientedBox>>& ground_truth, double iou_threshold) {
  if (detections.size() != ground_truth.size())
    throw std::invalid_argument("map_at: detections and ground truth cover different frame counts");
  std::size_t n_gt = 0;
  for (const auto& g : ground_truth) n_gt += g.size();
  if (n_gt == 0) return 0.0;

  struct Ranked {
    double score;
    std::size_t frame;
    double cy, cx;
    std::size_t index;
  };
  std::vector<Ranked> ranked;
  for (std::size_t f = 0; f < detections.size(); ++f)
    for (std::size_t i = 0; i < detections[f].size(); ++i) {
      const auto& d = detections[f][i];
      ranked.push_back({d.score, f, d.box.cy, d.box.cx, i});
    }
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.frame, a.cy, a.cx) < std::tie(b.frame, b.cy, b.cx);
  });

  std::vector<std::vector<bool>> used(ground_truth.size());
  for (std::size_t f = 0; f < ground_truth.size(); ++f) used[f].assign(ground_truth[f].size(), false);
  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (const auto& r : ranked) {
    const auto& box = detections[r.frame][r.index].box;
    int best = -1;
    double best_iou = 0;
    for (std::size_t g = 0; g < ground_truth[r.frame].size(); ++g) {
      if (used[r.frame][g]) continue;
      const double iou = rotated_iou(box, ground_truth[r.frame][g]);
      if (iou >= iou_threshold && iou > best_iou) {
        best = static_cast<int>(g);
        best_iou = iou;
      }
    }
    if (best >= 0) {
      used[r.frame][static_cast<std::size_t>(best)] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }
  // Precision envelope, then the area under the step curve.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0, prev_recall = 0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

EpeResult epe(const Tensor<double>& pred, const Tensor<double>& target, const std::vector<std::uint8_t>& mask) {
  if (pred.shape() != target.shape() || pred.rank() != 3 || pred.dim(0) != 2)
    throw ShapeError("epe: expected matching 2 x H x W fields, got " + shape_str(pred.shape()) + " and " +
                     shape_str(target.shape()));
  const std::size_t n = pred.dim(1) * pred.dim(2);
  if (mask.size() != n) throw ShapeError("epe: mask has " + std::to_string(mask.size()) + " cells, expected " + std::to_string(n));
  const auto a = pred.data(), b = target.data();
  double all = 0, fg = 0;
  std::size_t nf = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = std::hypot(a[i] - b[i], a[n + i] - b[n + i]);
    all += e;
    if (mask[i]) {
      fg += e;
      ++nf;
    }
  }
  return {all / static_cast<double>(n), nf ? fg / static_cast<double>(nf) : 0.0};
}

nlohmann::json EvalReport::to_json() const {
  return {{"map@0.3", map30}, {"map@0.5", map50}, {"map@0.7", map70}, {"epe_all", epe_all},
          {"epe_fg", epe_fg}, {"n_frames", n_frames}, {"n_gt", n_gt}};
}

OrientedBox to_oriented(const Detection& d) { return {d.cx, d.cy, d.w, d.h, d.theta}; }
OrientedBox to_oriented(const CellBox& b) { return {b.cx, b.cy, b.w, b.h, b.theta}; }

template <typename T>
EvalReport evaluate(RaFDNet<T>& net, const Dataset& data, const EvalOptions& options, std::vector<EvalFrame>* frames) {
  const GridSpec grid = net.config().grid();
  const bool was_training = net.training();
  net.set_training(false);
  NoGradGuard no_grad;

  std::vector<std::vector<ScoredBox>> dets;
  std::vector<std::vector<OrientedBox>> gts;
  double epe_all = 0, epe_fg = 0;
  std::size_t n_pairs = 0, n_fg = 0;
  EvalReport report;
  for (const Sample& s : data.samples(options.n_frames, options.tau)) {
    const auto& seq = data.sequences[s.sequence];
    const std::vector<Pose2> poses = data.tuple_poses(s, options.n_frames, options.tau);
    std::vector<FlowField> gt_flows;
    for (std::size_t k = 0; k + 1 < options.n_frames; ++k)
      gt_flows.push_back(build_gt_flow(seq.boxes[data.frame_index(s, k + 1, options.tau)],
                                       seq.boxes[data.frame_index(s, k, options.tau)], poses[k], grid, options.gamma));
    const DetTargets tg =
        make_det_targets(seq.boxes[data.frame_index(s, options.n_frames - 1, options.tau)], grid, options.gamma);

    std::vector<ScoredBox> frame_dets;
    std::vector<Tensor<double>> flows;
    if (options.oracle) {
      for (const auto& b : tg.boxes) frame_dets.push_back({to_oriented(b), 1.0});
      for (const auto& g : gt_flows) flows.push_back(g.vectors);
    } else {
      std::vector<Tensor<T>> images;
      for (std::size_t k = 0; k < options.n_frames; ++k)
        images.push_back(cast_tensor<T>(seq.images[data.frame_index(s, k, options.tau)]));
      const ForwardOutput<T> out = net.forward_multiframe(images, poses);
      for (const auto& d : out.detections) frame_dets.push_back({to_oriented(d), d.score});
      for (const auto& f : out.flows)
        flows.emplace_back(f.shape(), std::vector<double>(f.data().begin(), f.data().end()));
    }
    for (std::size_t k = 0; k < flows.size(); ++k) {
      const EpeResult e = epe(flows[k], gt_flows[k].vectors, gt_flows[k].mask);
      const auto fg_cells = static_cast<std::size_t>(std::count(gt_flows[k].mask.begin(), gt_flows[k].mask.end(), 1));
      epe_all += e.all;
      epe_fg += e.fg * static_cast<double>(fg_cells);
      n_fg += fg_cells;
      ++n_pairs;
    }
    std::vector<OrientedBox> frame_gt;
    for (const auto& b : tg.boxes) frame_gt.push_back(to_oriented(b));
    report.n_gt += frame_gt.size();
    if (frames) frames->push_back({s, frame_dets, frame_gt, flows.back(), gt_flows.back().vectors});
    dets.push_back(std::move(frame_dets));
    gts.push_back(std::move(frame_gt));
  }
  net.set_training(was_training);

  report.n_frames = dets.size();
  report.map30 = map_at(dets, gts, 0.3);
  report.map50 = map_at(dets, gts, 0.5);
  report.map70 = map_at(dets, gts, 0.7);
  report.epe_all = n_pairs ? epe_all / static_cast<double>(n_pairs) : 0.0;
  report.epe_fg = n_fg ? epe_fg / static_cast<double>(n_fg) : 0.0;
  return report;
}

template EvalReport evaluate(RaFDNet<float>&, const Dataset&, const EvalOptions&, std::vector<EvalFrame>*);
template EvalReport evaluate(RaFDNet<double>&, const Dataset&, const EvalOptions&, std::vector<EvalFrame>*);

}  // namespace rafd
