#pragma once

// The flow-guided detector: CNN backbone, windowed self-attention
// enhancement, cost-volume flow estimation, flow-guided deformable
// propagation and a center-heatmap + query-refinement detection head.
//
// Feature maps are C x hf x wf; token matrices are (hf*wf) x C in row-major
// cell order. Flow and coordinates use (x, y) = (column, row) in cells.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rafd/geometry.hpp"
#include "rafd/params.hpp"
#include "rafd/tensor.hpp"

namespace rafd {

struct NetConfig {
  std::size_t cf = 64;
  std::size_t hf = 32;
  std::size_t wf = 32;
  std::size_t k_queries = 16;
  std::size_t n_deform_points = 4;
  std::size_t window_h = 16;
  std::size_t window_w = 16;
  std::size_t n_enhance_blocks = 2;
  std::size_t n_cross_blocks = 2;
  std::size_t n_prop_blocks = 2;
  std::size_t n_decoder_layers = 2;
  std::size_t c_stem = 16;
  std::size_t c_mid = 32;
  std::size_t c_deep = 64;
  std::size_t ffn_mult = 2;
  /// false: propagation references stay on the grid (zero-flow baseline).
  bool flow_guided = true;

  static constexpr std::size_t stride = 4;

  std::size_t image_size_h() const { return hf * stride; }
  std::size_t image_size_w() const { return wf * stride; }
  std::size_t cells() const { return hf * wf; }
  GridSpec grid() const { return {hf, wf, stride}; }
  /// Throws std::invalid_argument on inconsistent sizes.
  void validate() const;

  nlohmann::json to_json() const;
  static NetConfig from_json(const nlohmann::json& j);
  bool operator==(const NetConfig&) const = default;
};

/// Box in feature cells; w spans the heading axis. theta in (-pi/2, pi/2].
struct Detection {
  double cx = 0, cy = 0, w = 0, h = 0, theta = 0, score = 0;
  std::size_t cell = 0;
};

struct Query {
  std::size_t cell = 0;
  double score = 0;
};

/// 3x3 peak suppression, then the k best cells by score (ties: row-major
/// order). When fewer than k peaks exist the remaining slots take the best
/// suppressed cells in the same order.
template <typename T>
std::vector<Query> topk_queries(const Tensor<T>& heatmap, std::size_t k);

/// Token order for window attention. Returns, for each window in row-major
/// order, its cells row-major, after a cyclic shift by `shift` cells.
std::vector<std::size_t> window_partition_index(std::size_t h, std::size_t w, std::size_t wh, std::size_t ww,
                                                std::size_t shift);

/// C[i,j,k,l] = <Et[:,i,j], Ep[:,k,l]> / sqrt(c), returned as hf x wf x hf x wf.
template <typename T>
Tensor<T> cost_volume(const Tensor<T>& e_t, const Tensor<T>& e_prev);

/// V = G - E_softmax(C)[G] with the softmax over the last two axes.
template <typename T>
Tensor<T> flow_from_cost(const Tensor<T>& cost, const Tensor<T>& grid);

/// Reference points for the previous frame: G - V.
template <typename T>
Tensor<T> flow_guided_refs(const Tensor<T>& flow, const Tensor<T>& grid);

/// Differentiable outputs of one forward pass.
template <typename T>
struct ForwardOutput {
  std::vector<Detection> detections;
  std::vector<Tensor<T>> flows;  // one 2 x hf x wf field per consecutive pair
  Tensor<T> heatmap;             // 1 x hf x wf
  std::vector<std::size_t> query_cells;
  Tensor<T> offsets;   // K x 2, in (-1, 1)
  Tensor<T> log_size;  // K x 2, (log w, log h)
  Tensor<T> angle;     // K x 2, raw (sin 2theta, cos 2theta)
  Tensor<T> features;  // propagated feature, cf x hf x wf
};

template <typename T>
class RaFDNet {
 public:
  RaFDNet(const NetConfig& config, std::uint64_t seed);

  const NetConfig& config() const { return cfg_; }
  ParameterStore<T>& store() { return store_; }
  const ParameterStore<T>& store() const { return store_; }

  /// Train mode normalizes with batch statistics and updates running ones.
  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

  /// N x 1 x H x W images to N x cf x hf x wf features; batchnorm statistics
  /// are shared across the N frames.
  Tensor<T> backbone_neck(const Tensor<T>& images);
  Tensor<T> enhance(const Tensor<T>& feat);
  /// N x cf x hf x wf to N x cf/2 x hf x wf with one set of weights.
  Tensor<T> flow_feat(const Tensor<T>& s);
  /// Cross-attention stack over aligned flow features; returns (E_prev', E_t').
  std::pair<Tensor<T>, Tensor<T>> cross_attend(const Tensor<T>& e_prev, const Tensor<T>& e_t);
  /// One cross-attention block on token matrices: x attends to src.
  Tensor<T> cross_block(std::size_t layer, const Tensor<T>& x, const Tensor<T>& src);
  /// Estimated flow from a pair of flow-feature maps (cross-attention, cost
  /// volume, soft matching).
  Tensor<T> estimate_flow(const Tensor<T>& e_prev_aligned, const Tensor<T>& e_t);
  /// Deformable propagation from the aligned previous feature into the
  /// current one. References are G - flow, or G when flow_guided is off.
  Tensor<T> propagate(const Tensor<T>& s_t, const Tensor<T>& s_prev, const Tensor<T>& flow);
  /// Propagation with explicit reference points (2 x hf x wf).
  Tensor<T> propagate_from_refs(const Tensor<T>& s_t, const Tensor<T>& s_prev, const Tensor<T>& refs);
  /// Attended content of one propagation block, before the output projection:
  /// query tokens N x C (already normalized), value map C x hf x wf.
  Tensor<T> deform_attend(std::size_t block, const Tensor<T>& query, const Tensor<T>& value_map,
                          const Tensor<T>& refs);
  Tensor<T> center_heatmap(const Tensor<T>& t_hat);
  /// Query refinement; fills detections and head tensors of `out`.
  void detr_refine(const std::vector<std::size_t>& cells, const Tensor<T>& t_hat, const Tensor<T>& heatmap,
                   ForwardOutput<T>& out);

  /// Two-frame forward. `pose` maps current cells to previous cells. When
  /// `query_cells` is given it replaces top-K selection.
  ForwardOutput<T> forward_pair(const Tensor<T>& frame_prev, const Tensor<T>& frame_t, const Pose2& pose,
                                const std::vector<std::size_t>* query_cells = nullptr);
  /// Cascade over frames oldest to newest; poses[m] maps frame m+1 cells to
  /// frame m cells.
  ForwardOutput<T> forward_multiframe(const std::vector<Tensor<T>>& frames, const std::vector<Pose2>& poses,
                                      const std::vector<std::size_t>* query_cells = nullptr);

  /// Picks query cells from the (detached) heatmap.
  using QuerySelector = std::function<std::vector<std::size_t>(const Tensor<T>& heatmap)>;
  ForwardOutput<T> forward_multiframe_select(const std::vector<Tensor<T>>& frames, const std::vector<Pose2>& poses,
                                             const QuerySelector& select);

 private:
  Tensor<T> p(const std::string& name) const { return store_.get(name); }
  Tensor<T> conv_bn(const std::string& prefix, const Tensor<T>& x, std::size_t stride, std::size_t pad, bool relu);
  Tensor<T> bn(const std::string& prefix, const Tensor<T>& x);
  Tensor<T> lin(const std::string& prefix, const Tensor<T>& x);
  Tensor<T> ln(const std::string& prefix, const Tensor<T>& x);
  Tensor<T> ffn(const std::string& prefix, const Tensor<T>& x);
  Tensor<T> window_block(const std::string& prefix, const Tensor<T>& x, std::size_t shift);
  Tensor<T> head_features(const Tensor<T>& frames_feat, std::size_t n);
  std::vector<std::size_t> default_cells(const Tensor<T>& heatmap) const;

  NetConfig cfg_;
  ParameterStore<T> store_;
  bool training_ = true;
  Tensor<T> grid_;
  struct WindowPlan {
    std::vector<std::size_t> order, inverse;
    std::vector<std::vector<std::uint8_t>> masks;  // empty when unshifted
    std::size_t window_len = 0;
  };
  WindowPlan plain_, shifted_;
};

/// Map <-> token conversions.
template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& map);
template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, std::size_t h, std::size_t w);

// Checkpoints: `<stem>.bin` holds concatenated tensor snapshots, `<stem>.json`
// holds {config, step, extra, tensors: {name: {offset, shape}}}.

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& stem, const RaFDNet<T>& net,
                     const std::vector<NamedTensor<T>>& extra_tensors, std::uint64_t step,
                     const nlohmann::json& extra = nlohmann::json::object());

struct CheckpointInfo {
  NetConfig config;
  std::uint64_t step = 0;
  nlohmann::json extra;
  nlohmann::json index;
};

CheckpointInfo read_checkpoint_info(const std::filesystem::path& stem);

/// Loads parameters and buffers into `net` (config must match) and returns
/// the remaining named tensors in file order.
template <typename T>
std::vector<NamedTensor<T>> load_checkpoint(const std::filesystem::path& stem, RaFDNet<T>& net);

}  // namespace rafd
