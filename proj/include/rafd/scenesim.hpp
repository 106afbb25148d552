#pragma once

// Seeded synthetic BEV radar sequences: oriented rectangles seen from a
// moving ego platform, with azimuthal blur, ghost echoes and speckle.
//
// World coordinates are metres; image coordinates are pixels with the ego at
// the image center. Box annotations are in image pixels of their own frame.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rafd/geometry.hpp"
#include "rafd/tensor.hpp"

namespace rafd {

enum class EgoMotion { Static, Linear, Turning };

EgoMotion parse_ego_motion(const std::string& s);
std::string to_string(EgoMotion m);

struct SequenceSpec {
  std::size_t image_size = 128;
  std::size_t num_frames = 4;
  std::size_t tau = 1;
  std::size_t n_objects = 4;
  double noise_sigma = 0.05;
  double ghost_prob = 0.2;
  double ghost_offset_range = 12.0;  // max radial ghost displacement, pixels
  double blur_azimuth_cells = 3.0;   // tangential smear width, pixels of arc
  EgoMotion ego_motion = EgoMotion::Linear;
  double ego_speed = 1.0;       // pixels per frame
  double ego_turn_rate = 0.02;  // radians per frame (turning model)
  double max_speed = 2.0;       // object pixels per frame
  double length_min = 10.0;
  double length_max = 18.0;
  double width_min = 5.0;
  double width_max = 9.0;
  double reflectivity_min = 0.6;
  double reflectivity_max = 1.0;
  double cell_size_m = 0.5;  // metres per pixel
  std::uint64_t seed = 0;

  void validate() const;
};

/// Oriented box in image pixels; w spans the heading axis, h the normal axis.
struct AnnotatedBox {
  int id = 0;
  double cx = 0, cy = 0, w = 0, h = 0, theta = 0;
};

struct ObjectTrack {
  int id = 0;
  std::vector<Vec2> world;      // per-frame center, metres
  std::vector<Vec2> pixel;      // per-frame center, image pixels
  std::vector<double> heading;  // per-frame world heading
  double length = 0;            // pixels, along heading
  double width = 0;             // pixels
  double reflectivity = 1;
};

struct RadarFrame {
  Tensor<double> image;  // 1 x H x W in [0, 1]
  Pose2 ego_pose_world;  // metres / radians
  std::vector<AnnotatedBox> boxes;
  std::size_t frame_index = 0;
};

struct Sequence {
  std::vector<RadarFrame> frames;
  std::vector<ObjectTrack> tracks;
};

/// Object state at one frame as seen in the image.
struct RenderObject {
  AnnotatedBox box;
  double reflectivity = 1;
};

Sequence simulate_sequence(const SequenceSpec& spec);

/// Rasterizes objects with blur, ghosts and noise. Randomness is drawn from a
/// stream keyed by (spec.seed, frame_index).
Tensor<double> render_frame(const std::vector<RenderObject>& objects, const SequenceSpec& spec,
                            std::size_t frame_index);

/// True when the pixel center lies inside the box (boundary inclusive).
bool box_contains(const AnnotatedBox& b, double x, double y);

/// Wraps an angle into (-pi/2, pi/2].
double wrap_half_pi(double theta);

// On-disk dataset.

struct DatasetMeta {
  std::size_t image_size = 0;
  std::size_t stride = 4;
  std::size_t tau = 1;
  std::size_t num_frames = 0;
  double cell_size_m = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Generates n_train + n_val sequences (sequence i uses seed + i) and writes
/// the dataset layout under `root`, which must exist.
DatasetMeta write_dataset(const std::filesystem::path& root, const SequenceSpec& spec, std::size_t stride,
                          std::size_t n_train, std::size_t n_val);

DatasetMeta load_meta(const std::filesystem::path& root);
RadarFrame load_frame(const std::filesystem::path& root, std::size_t sequence, std::size_t frame);

std::filesystem::path sequence_dir(const std::filesystem::path& root, std::size_t sequence);
std::filesystem::path frame_stem(const std::filesystem::path& root, std::size_t sequence, std::size_t frame);

void write_pgm16(const std::filesystem::path& path, const Tensor<double>& image);
Tensor<double> read_pgm16(const std::filesystem::path& path);

}  // namespace rafd
