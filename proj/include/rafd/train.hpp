#pragma once

// Losses, optimizer and the training loop.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "rafd/flowgt.hpp"
#include "rafd/net.hpp"
#include "rafd/scenesim.hpp"

namespace rafd {

struct TrainConfig {
  double lr = 2e-4;
  double weight_decay = 1e-2;
  std::size_t batch_size = 2;
  std::size_t epochs = 1;
  /// Stops after this many optimizer steps in total; 0 means no cap.
  std::size_t max_steps = 0;
  std::uint64_t seed = 0;
  std::size_t n_frames = 2;
  /// Frame spacing inside a training tuple.
  std::size_t tau = 1;
  /// Lower bound of the target radius in cells (heatmap and flow).
  double gamma = 2.0;
  double lambda_reg = 1.0;

  void validate() const;
};

// ---- data ----

struct SequenceData {
  std::vector<Tensor<double>> images;  // 1 x H x W each
  std::vector<std::vector<AnnotatedBox>> boxes;
  std::vector<Pose2> ego;
};

/// One training or evaluation tuple: frames start, start+tau, ...
struct Sample {
  std::size_t sequence = 0;
  std::size_t start = 0;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<SequenceData> sequences;  // indexed by position in the split
  std::vector<std::size_t> ids;         // on-disk sequence ids

  /// All tuples of n_frames frames spaced tau apart, sequence-major.
  std::vector<Sample> samples(std::size_t n_frames, std::size_t tau) const;
  /// Poses mapping frame k+1 to frame k cells along the tuple.
  std::vector<Pose2> tuple_poses(const Sample& s, std::size_t n_frames, std::size_t tau) const;
  std::size_t frame_index(const Sample& s, std::size_t k, std::size_t tau) const { return s.start + k * tau; }
};

/// Loads one split ("train" or "val"). Throws std::runtime_error naming the
/// offending file when the dataset cannot be read.
Dataset load_dataset(const std::filesystem::path& root, const std::string& split);

template <typename T>
Tensor<T> cast_tensor(const Tensor<double>& t);

// ---- losses ----

/// Mean absolute error between predicted and target flow, summed over pairs.
template <typename T>
Tensor<T> flow_loss(const std::vector<Tensor<T>>& pred, const std::vector<Tensor<double>>& target);
template <typename T>
Tensor<T> flow_loss(const Tensor<T>& pred, const Tensor<double>& target);

/// A ground-truth box in feature cells.
struct CellBox {
  double cx = 0, cy = 0, w = 0, h = 0, theta = 0;
  double radius = 0;  // gaussian_radius of the box, clamped by gamma
};

struct DetTargets {
  Tensor<double> heatmap;  // 1 x hf x wf, exactly 1 at each center cell
  std::vector<CellBox> boxes;
  std::vector<std::size_t> center_cells;  // one per box, in box order
};

/// Boxes are in input pixels; boxes whose center cell falls outside the grid
/// are dropped. Each box splats exp(-d^2 / (2 s^2)) with s = (2r + 1) / 6 over
/// cells within floor(r) per axis; overlapping splats keep the maximum.
DetTargets make_det_targets(const std::vector<AnnotatedBox>& boxes, const GridSpec& spec, double gamma);

/// Index of the nearest box center within its radius of `cell`, or -1.
/// Ties go to the lower box index.
int match_query(std::size_t cell, const DetTargets& targets, std::size_t wf);

/// Training queries: box center cells first (deduplicated, in box order),
/// then the best heatmap peaks, up to k.
template <typename T>
std::vector<std::size_t> training_queries(const Tensor<T>& heatmap, const DetTargets& targets, std::size_t k);

template <typename T>
struct DetLoss {
  Tensor<T> focal;
  Tensor<T> regression;
  Tensor<T> total;  // focal + lambda_reg * regression
};

/// Focal loss on the heatmap plus L1 on (offset, log-size, sin 2theta,
/// cos 2theta) for matched queries, averaged over matched queries.
template <typename T>
DetLoss<T> det_loss(const ForwardOutput<T>& out, const DetTargets& targets, std::size_t wf, double lambda_reg);

// ---- optimizer ----

template <typename T>
struct AdamState {
  std::vector<std::string> names;
  std::vector<Tensor<T>> m, v;
  std::uint64_t t = 0;

  static AdamState zeros_like(const ParameterStore<T>& store);
};

/// Adam with decoupled weight decay: w -= lr * wd * w, then the
/// bias-corrected Adam update. Parameters without gradients see only decay.
template <typename T>
void adam_step(ParameterStore<T>& store, AdamState<T>& state, double lr, double weight_decay, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

// ---- loop ----

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::uint64_t step, const std::string& what) : std::runtime_error(what), step_(step) {}
  std::uint64_t step() const { return step_; }

 private:
  std::uint64_t step_;
};

struct StepLosses {
  std::uint64_t step = 0;
  double l_det = 0, l_flow = 0, l_total = 0;
};

struct TrainResult {
  std::uint64_t steps = 0;  // total steps including resumed ones
  std::vector<StepLosses> log;  // records written by this call
};

/// Trains on the "train" split of `dataset_root`. Writes `losses.jsonl`
/// (one record per step), `epoch_NNN.{bin,json}` and `last.{bin,json}` under
/// `out_dir`. With `resume`, continues from `last` and appends to the log.
/// Throws TrainingDiverged on a non-finite loss.
template <typename T>
TrainResult train_loop(const std::filesystem::path& dataset_root, const NetConfig& net_config,
                       const TrainConfig& config, const std::filesystem::path& out_dir, bool resume = false);

/// One optimizer step over a batch; returns the batch-mean losses.
template <typename T>
StepLosses train_step(RaFDNet<T>& net, AdamState<T>& adam, const Dataset& data, const std::vector<Sample>& batch,
                      const TrainConfig& config);

}  // namespace rafd
