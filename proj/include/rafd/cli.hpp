#pragma once

// Operator commands and their flat key=value run configuration.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "rafd/eval.hpp"
#include "rafd/net.hpp"
#include "rafd/scenesim.hpp"
#include "rafd/train.hpp"

namespace rafd {

struct RunConfig {
  SequenceSpec sim;
  std::size_t n_train = 16;
  std::size_t n_val = 4;
  NetConfig net;  // hf and wf follow sim.image_size
  TrainConfig train;
  std::string precision = "float";  // float | double
  std::filesystem::path dataset = "data";
  std::filesystem::path run_dir = "run";

  /// Syncs derived fields (feature size) and validates every part.
  void finalize();
};

/// One documented config key.
struct ConfigKey {
  std::string name;
  std::string doc;
  std::string default_value;
};

std::vector<ConfigKey> config_keys();

/// Parses `key = value` lines; '#' starts a comment. Unknown keys, duplicate
/// keys and malformed values throw std::invalid_argument naming the line.
RunConfig parse_config(const std::string& text, const std::string& source = "<config>");
/// Sets one key on an existing config, as a later override.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);
RunConfig load_config(const std::filesystem::path& path);
/// Every key in a fixed order, each preceded by its documentation comment.
std::string serialize_config(const RunConfig& config);

// ---- rendering ----

struct RgbImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB

  RgbImage(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h * 3, fill) {}
  void set(long x, long y, std::uint8_t r, std::uint8_t g, std::uint8_t b);
};

/// Grayscale radar frame scaled up by `scale` with nearest-neighbour pixels.
RgbImage render_radar(const Tensor<double>& image, std::size_t scale);
/// Outline of a box given in feature cells.
void draw_box(RgbImage& img, const OrientedBox& cells, std::size_t stride, std::size_t scale, std::uint8_t r,
              std::uint8_t g, std::uint8_t b);
/// Colour-wheel flow image: hue from direction, saturation from magnitude
/// relative to `max_magnitude` (the field's own maximum when <= 0). Zero flow
/// is white. Each cell becomes a block of `block` pixels.
RgbImage render_flow(const Tensor<double>& flow, std::size_t block, double max_magnitude = 0);
void write_ppm(const std::filesystem::path& path, const RgbImage& img);

// ---- commands ----
// Each returns a process exit code and reports to `out` / `err`.

int cmd_generate(const RunConfig& config, const std::filesystem::path& out_dir, bool force, std::ostream& out,
                 std::ostream& err);
int cmd_train(const RunConfig& config, bool resume, std::ostream& out, std::ostream& err);

struct EvalCommand {
  std::filesystem::path checkpoint;  // empty: <run_dir>/last
  std::string split = "val";
  bool oracle = false;
  std::filesystem::path report;       // optional JSON output file
  std::filesystem::path dump_images;  // optional directory for PPMs
};
int cmd_eval(const RunConfig& config, const EvalCommand& command, std::ostream& out, std::ostream& err);

struct InferCommand {
  std::filesystem::path checkpoint;
  std::string split = "val";
  std::size_t sequence = 0;  // index within the split
  std::size_t frame = 0;     // first frame of the tuple
};
/// Prints detections and flow statistics of one tuple as JSON.
int cmd_infer(const RunConfig& config, const InferCommand& command, std::ostream& out, std::ostream& err);

struct RenderCommand {
  std::filesystem::path checkpoint;  // empty: ground truth only
  std::string split = "val";
  std::size_t sequence = 0;
  std::size_t frame = 0;
  std::size_t scale = 4;
  std::filesystem::path prefix = "render";  // writes <prefix>_boxes.ppm, <prefix>_flow.ppm
};
int cmd_render(const RunConfig& config, const RenderCommand& command, std::ostream& out, std::ostream& err);

}  // namespace rafd
