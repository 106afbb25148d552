#include "rafd/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "rafd/ops.hpp"
#include "rafd/rng.hpp"

namespace rafd {

using nlohmann::json;

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
  if (!(lr > 0)) fail("lr must be positive");
  if (!(weight_decay >= 0)) fail("weight_decay must be non-negative");
  if (batch_size == 0) fail("batch_size must be positive");
  if (epochs == 0) fail("epochs must be positive");
  if (n_frames < 2) fail("n_frames must be at least 2");
  if (tau == 0) fail("tau must be positive");
  if (!(gamma > 0)) fail("gamma must be positive");
  if (!(lambda_reg >= 0)) fail("lambda_reg must be non-negative");
}

// ---- data ----

std::vector<Sample> Dataset::samples(std::size_t n_frames, std::size_t tau) const {
  std::vector<Sample> out;
  const std::size_t span = (n_frames - 1) * tau;
  for (std::size_t s = 0; s < sequences.size(); ++s)
    for (std::size_t start = 0; start + span < sequences[s].images.size(); ++start) out.push_back({s, start});
  return out;
}

std::vector<Pose2> Dataset::tuple_poses(const Sample& s, std::size_t n_frames, std::size_t tau) const {
  const auto& seq = sequences.at(s.sequence);
  std::vector<Pose2> poses;
  for (std::size_t k = 0; k + 1 < n_frames; ++k)
    poses.push_back(relative_pose_cells(seq.ego[frame_index(s, k + 1, tau)], seq.ego[frame_index(s, k, tau)],
                                        meta.cell_size_m, meta.stride));
  return poses;
}

Dataset load_dataset(const std::filesystem::path& root, const std::string& split) {
  Dataset d;
  d.meta = load_meta(root);
  if (split == "train") {
    d.ids = d.meta.train;
  } else if (split == "val") {
    d.ids = d.meta.val;
  } else {
    throw std::invalid_argument("unknown split '" + split + "' (expected train or val)");
  }
  for (std::size_t id : d.ids) {
    SequenceData seq;
    for (std::size_t f = 0; f < d.meta.num_frames; ++f) {
      RadarFrame fr = load_frame(root, id, f);
      seq.images.push_back(fr.image);
      seq.boxes.push_back(std::move(fr.boxes));
      seq.ego.push_back(fr.ego_pose_world);
    }
    d.sequences.push_back(std::move(seq));
  }
  return d;
}

template <typename T>
Tensor<T> cast_tensor(const Tensor<double>& t) {
  if constexpr (std::is_same_v<T, double>) {
    return t.detach();
  } else {
    std::vector<T> v(t.data().begin(), t.data().end());
    return Tensor<T>(t.shape(), std::move(v));
  }
}

// ---- losses ----

template <typename T>
Tensor<T> flow_loss(const Tensor<T>& pred, const Tensor<double>& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("flow_loss: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  return l1_loss(pred, cast_tensor<T>(target));
}

template <typename T>
Tensor<T> flow_loss(const std::vector<Tensor<T>>& pred, const std::vector<Tensor<double>>& target) {
  if (pred.empty() || pred.size() != target.size())
    throw std::invalid_argument("flow_loss: need one target per predicted flow");
  Tensor<T> total = flow_loss(pred[0], target[0]);
  for (std::size_t i = 1; i < pred.size(); ++i) total = add(total, flow_loss(pred[i], target[i]));
  return total;
}

DetTargets make_det_targets(const std::vector<AnnotatedBox>& boxes, const GridSpec& spec, double gamma) {
  DetTargets tg;
  tg.heatmap = Tensor<double>(Shape{1, spec.hf, spec.wf}, 0.0);
  auto hm = tg.heatmap.data_mut();
  const double s = static_cast<double>(spec.stride);
  for (const auto& b : boxes) {
    const Vec2 c = spec.pixel_to_cell({b.cx, b.cy});
    const double ri = std::round(c.y), rj = std::round(c.x);
    if (ri < 0 || rj < 0 || ri >= static_cast<double>(spec.hf) || rj >= static_cast<double>(spec.wf)) continue;
    CellBox cb{c.x, c.y, b.w / s, b.h / s, b.theta, gaussian_radius(b.h / s, b.w / s, gamma)};
    const auto ci = static_cast<long>(ri), cj = static_cast<long>(rj);
    const long r = static_cast<long>(std::floor(cb.radius));
    const double sd = (2 * cb.radius + 1) / 6;
    for (long i = std::max(0L, ci - r); i <= std::min<long>(static_cast<long>(spec.hf) - 1, ci + r); ++i)
      for (long j = std::max(0L, cj - r); j <= std::min<long>(static_cast<long>(spec.wf) - 1, cj + r); ++j) {
        const double d2 = static_cast<double>((i - ci) * (i - ci) + (j - cj) * (j - cj));
        double& px = hm[static_cast<std::size_t>(i) * spec.wf + static_cast<std::size_t>(j)];
        px = std::max(px, std::exp(-d2 / (2 * sd * sd)));
      }
    tg.boxes.push_back(cb);
    tg.center_cells.push_back(static_cast<std::size_t>(ci) * spec.wf + static_cast<std::size_t>(cj));
  }
  return tg;
}

int match_query(std::size_t cell, const DetTargets& targets, std::size_t wf) {
  const double qx = static_cast<double>(cell % wf), qy = static_cast<double>(cell / wf);
  int best = -1;
  double best_d = 0;
  for (std::size_t k = 0; k < targets.boxes.size(); ++k) {
    const auto& b = targets.boxes[k];
    const double d = std::hypot(b.cx - qx, b.cy - qy);
    if (d <= b.radius && (best < 0 || d < best_d)) {
      best = static_cast<int>(k);
      best_d = d;
    }
  }
  return best;
}

template <typename T>
std::vector<std::size_t> training_queries(const Tensor<T>& heatmap, const DetTargets& targets, std::size_t k) {
  std::vector<std::size_t> cells;
  auto push = [&](std::size_t c) {
    if (cells.size() < k && std::find(cells.begin(), cells.end(), c) == cells.end()) cells.push_back(c);
  };
  for (std::size_t c : targets.center_cells) push(c);
  for (const auto& q : topk_queries(heatmap, k)) push(q.cell);
  return cells;
}

template <typename T>
DetLoss<T> det_loss(const ForwardOutput<T>& out, const DetTargets& targets, std::size_t wf, double lambda_reg) {
  if (out.heatmap.shape() != targets.heatmap.shape())
    throw ShapeError("det_loss: heatmap " + shape_str(out.heatmap.shape()) + " vs target " +
                     shape_str(targets.heatmap.shape()));
  DetLoss<T> loss;
  loss.focal = focal_loss(out.heatmap, cast_tensor<T>(targets.heatmap));

  std::vector<std::size_t> rows;
  std::vector<T> off, size, ang;
  for (std::size_t q = 0; q < out.query_cells.size(); ++q) {
    const int m = match_query(out.query_cells[q], targets, wf);
    if (m < 0) continue;
    const auto& b = targets.boxes[static_cast<std::size_t>(m)];
    rows.push_back(q);
    off.push_back(static_cast<T>(b.cx - static_cast<double>(out.query_cells[q] % wf)));
    off.push_back(static_cast<T>(b.cy - static_cast<double>(out.query_cells[q] / wf)));
    size.push_back(static_cast<T>(std::log(b.w)));
    size.push_back(static_cast<T>(std::log(b.h)));
    ang.push_back(static_cast<T>(std::sin(2 * b.theta)));
    ang.push_back(static_cast<T>(std::cos(2 * b.theta)));
  }
  if (rows.empty()) {
    loss.regression = Tensor<T>::scalar(T(0));
  } else {
    const Shape s{rows.size(), 2};
    // Each l1_loss is a mean over 2 entries per query; doubling gives the
    // per-query sum averaged over matched queries.
    Tensor<T> r = add(l1_loss(gather_rows(out.offsets, rows), Tensor<T>(s, off)),
                      l1_loss(gather_rows(out.log_size, rows), Tensor<T>(s, size)));
    r = add(r, l1_loss(gather_rows(out.angle, rows), Tensor<T>(s, ang)));
    loss.regression = scale(r, T(2));
  }
  loss.total = add(loss.focal, scale(loss.regression, static_cast<T>(lambda_reg)));
  return loss;
}

// ---- optimizer ----

template <typename T>
AdamState<T> AdamState<T>::zeros_like(const ParameterStore<T>& store) {
  AdamState<T> s;
  for (const auto& name : store.trainable_names()) {
    const Shape& shape = store.get(name).shape();
    s.names.push_back(name);
    s.m.emplace_back(shape, T(0));
    s.v.emplace_back(shape, T(0));
  }
  return s;
}

template <typename T>
void adam_step(ParameterStore<T>& store, AdamState<T>& state, double lr, double weight_decay, double beta1,
               double beta2, double eps) {
  ++state.t;
  const double bc1 = 1 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1 - std::pow(beta2, static_cast<double>(state.t));
  const T decay = static_cast<T>(1 - lr * weight_decay);
  for (std::size_t k = 0; k < state.names.size(); ++k) {
    Tensor<T> w = store.get(state.names[k]);
    auto wd = w.data_mut();
    auto m = state.m[k].data_mut(), v = state.v[k].data_mut();
    const bool has = w.has_grad();
    const auto g = has ? w.grad() : std::span<const T>();
    for (std::size_t i = 0; i < wd.size(); ++i) {
      wd[i] *= decay;
      const T gi = has ? g[i] : T(0);
      m[i] = static_cast<T>(beta1) * m[i] + static_cast<T>(1 - beta1) * gi;
      v[i] = static_cast<T>(beta2) * v[i] + static_cast<T>(1 - beta2) * gi * gi;
      const double mh = static_cast<double>(m[i]) / bc1, vh = static_cast<double>(v[i]) / bc2;
      wd[i] -= static_cast<T>(lr * mh / (std::sqrt(vh) + eps));
    }
  }
}

// ---- loop ----

template <typename T>
StepLosses train_step(RaFDNet<T>& net, AdamState<T>& adam, const Dataset& data, const std::vector<Sample>& batch,
                      const TrainConfig& config) {
  const GridSpec grid = net.config().grid();
  Tensor<T> det_sum, flow_sum;
  for (const Sample& s : batch) {
    const auto& seq = data.sequences.at(s.sequence);
    std::vector<Tensor<T>> frames;
    for (std::size_t k = 0; k < config.n_frames; ++k)
      frames.push_back(cast_tensor<T>(seq.images.at(data.frame_index(s, k, config.tau))));
    const std::vector<Pose2> poses = data.tuple_poses(s, config.n_frames, config.tau);
    const std::size_t last = data.frame_index(s, config.n_frames - 1, config.tau);
    const DetTargets tg = make_det_targets(seq.boxes[last], grid, config.gamma);
    std::vector<Tensor<double>> gt_flows;
    for (std::size_t k = 0; k + 1 < config.n_frames; ++k)
      gt_flows.push_back(build_gt_flow(seq.boxes[data.frame_index(s, k + 1, config.tau)],
                                       seq.boxes[data.frame_index(s, k, config.tau)], poses[k], grid, config.gamma)
                             .vectors);
    ForwardOutput<T> out = net.forward_multiframe_select(
        frames, poses, [&](const Tensor<T>& hm) { return training_queries(hm, tg, net.config().k_queries); });
    Tensor<T> ld = det_loss(out, tg, grid.wf, config.lambda_reg).total;
    Tensor<T> lf = flow_loss(out.flows, gt_flows);
    det_sum = det_sum.defined() ? add(det_sum, ld) : ld;
    flow_sum = flow_sum.defined() ? add(flow_sum, lf) : lf;
  }
  const T inv = static_cast<T>(1.0 / static_cast<double>(batch.size()));
  Tensor<T> l_det = scale(det_sum, inv), l_flow = scale(flow_sum, inv);
  Tensor<T> l_total = add(l_det, l_flow);
  StepLosses rec{adam.t, static_cast<double>(l_det.item()), static_cast<double>(l_flow.item()),
                 static_cast<double>(l_total.item())};
  if (!std::isfinite(rec.l_total))
    throw TrainingDiverged(rec.step, "non-finite loss at step " + std::to_string(rec.step) + " (l_det " +
                                         std::to_string(rec.l_det) + ", l_flow " + std::to_string(rec.l_flow) + ")");
  net.store().zero_grad();
  l_total.backward();
  adam_step(net.store(), adam, config.lr, config.weight_decay);
  return rec;
}

namespace {

// Seeded Fisher-Yates so the visiting order does not depend on the standard
// library's shuffle.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::uint64_t state = splitmix64(seed ^ splitmix64(0x7ea1 + epoch));
  for (std::size_t i = n; i > 1; --i) {
    state = splitmix64(state);
    std::swap(order[i - 1], order[state % i]);
  }
  return order;
}

template <typename T>
std::vector<NamedTensor<T>> adam_tensors(const AdamState<T>& s) {
  std::vector<NamedTensor<T>> out;
  for (std::size_t k = 0; k < s.names.size(); ++k) {
    out.push_back({"adam.m." + s.names[k], s.m[k]});
    out.push_back({"adam.v." + s.names[k], s.v[k]});
  }
  return out;
}

template <typename T>
void restore_adam(AdamState<T>& s, const std::vector<NamedTensor<T>>& extras, std::uint64_t t) {
  for (const auto& e : extras)
    for (std::size_t k = 0; k < s.names.size(); ++k) {
      Tensor<T>* dst = nullptr;
      if (e.name == "adam.m." + s.names[k]) dst = &s.m[k];
      if (e.name == "adam.v." + s.names[k]) dst = &s.v[k];
      if (!dst) continue;
      if (dst->shape() != e.tensor.shape()) throw std::runtime_error("optimizer state shape mismatch for " + e.name);
      std::copy(e.tensor.data().begin(), e.tensor.data().end(), dst->data_mut().begin());
    }
  s.t = t;
}

}  // namespace

template <typename T>
TrainResult train_loop(const std::filesystem::path& dataset_root, const NetConfig& net_config,
                       const TrainConfig& config, const std::filesystem::path& out_dir, bool resume) {
  config.validate();
  net_config.validate();
  const Dataset data = load_dataset(dataset_root, "train");
  if (data.meta.image_size != net_config.image_size_h() || net_config.hf != net_config.wf)
    throw std::invalid_argument("dataset image size " + std::to_string(data.meta.image_size) +
                                " does not match the network input " + std::to_string(net_config.image_size_h()));
  if (data.meta.stride != NetConfig::stride) throw std::invalid_argument("dataset stride does not match the network");
  const std::vector<Sample> samples = data.samples(config.n_frames, config.tau);
  if (samples.empty()) throw std::invalid_argument("dataset has no tuples of " + std::to_string(config.n_frames) + " frames");

  std::filesystem::create_directories(out_dir);
  RaFDNet<T> net(net_config, config.seed);
  net.set_training(true);
  AdamState<T> adam = AdamState<T>::zeros_like(net.store());
  std::size_t epoch = 0, batch_pos = 0;
  if (resume) {
    const auto extras = load_checkpoint(out_dir / "last", net);
    const CheckpointInfo info = read_checkpoint_info(out_dir / "last");
    restore_adam(adam, extras, info.step);
    epoch = info.extra.at("epoch");
    batch_pos = info.extra.at("batch");
  }

  std::ofstream log(out_dir / "losses.jsonl", resume ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot open " + (out_dir / "losses.jsonl").string());

  const std::size_t n_batches = (samples.size() + config.batch_size - 1) / config.batch_size;
  auto save = [&](const std::filesystem::path& stem) {
    save_checkpoint<T>(stem, net, adam_tensors(adam), adam.t,
                       json{{"epoch", epoch}, {"batch", batch_pos}, {"train", json{{"seed", config.seed}}}});
  };

  TrainResult result;
  const bool capped = config.max_steps > 0;
  while (epoch < config.epochs && !(capped && adam.t >= config.max_steps)) {
    const auto order = epoch_order(samples.size(), config.seed, epoch);
    for (; batch_pos < n_batches && !(capped && adam.t >= config.max_steps); ++batch_pos) {
      std::vector<Sample> batch;
      for (std::size_t i = batch_pos * config.batch_size; i < std::min(samples.size(), (batch_pos + 1) * config.batch_size);
           ++i)
        batch.push_back(samples[order[i]]);
      const StepLosses rec = train_step(net, adam, data, batch, config);
      log << json{{"step", rec.step}, {"l_det", rec.l_det}, {"l_flow", rec.l_flow}, {"l_total", rec.l_total}}.dump()
          << "\n";
      result.log.push_back(rec);
    }
    log.flush();
    if (batch_pos == n_batches) {
      ++epoch;
      batch_pos = 0;
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03zu", epoch);
      save(out_dir / name);
    }
    save(out_dir / "last");
  }
  if (!log) throw std::runtime_error("write failed for " + (out_dir / "losses.jsonl").string());
  result.steps = adam.t;
  return result;
}

#define RAFD_INSTANTIATE_TRAIN(T)                                                                                    \
  template Tensor<T> cast_tensor<T>(const Tensor<double>&);                                                          \
  template Tensor<T> flow_loss(const Tensor<T>&, const Tensor<double>&);                                             \
  template Tensor<T> flow_loss(const std::vector<Tensor<T>>&, const std::vector<Tensor<double>>&);                   \
  template std::vector<std::size_t> training_queries(const Tensor<T>&, const DetTargets&, std::size_t);              \
  template DetLoss<T> det_loss(const ForwardOutput<T>&, const DetTargets&, std::size_t, double);                     \
  template struct AdamState<T>;                                                                                      \
  template void adam_step(ParameterStore<T>&, AdamState<T>&, double, double, double, double, double);                \
  template StepLosses train_step(RaFDNet<T>&, AdamState<T>&, const Dataset&, const std::vector<Sample>&,             \
                                 const TrainConfig&);                                                                \
  template TrainResult train_loop<T>(const std::filesystem::path&, const NetConfig&, const TrainConfig&,             \
                                     const std::filesystem::path&, bool);

RAFD_INSTANTIATE_TRAIN(float)
RAFD_INSTANTIATE_TRAIN(double)
#undef RAFD_INSTANTIATE_TRAIN

}  // namespace rafd
