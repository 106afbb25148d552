#include "rafd/scenesim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "rafd/kernels.hpp"
#include "rafd/rng.hpp"

namespace rafd {

using nlohmann::json;

EgoMotion parse_ego_motion(const std::string& s) {
  if (s == "static") return EgoMotion::Static;
  if (s == "linear") return EgoMotion::Linear;
  if (s == "turning") return EgoMotion::Turning;
  throw std::invalid_argument("unknown ego motion model '" + s + "' (expected static, linear or turning)");
}

std::string to_string(EgoMotion m) {
  switch (m) {
    case EgoMotion::Static:
      return "static";
    case EgoMotion::Linear:
      return "linear";
    case EgoMotion::Turning:
      return "turning";
  }
  return "static";
}

void SequenceSpec::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("SequenceSpec: " + msg); };
  if (image_size < 8) fail("image_size must be at least 8");
  if (num_frames < 2) fail("num_frames must be at least 2");
  if (tau < 1) fail("tau must be positive");
  if (ghost_prob < 0 || ghost_prob > 1) fail("ghost_prob must lie in [0, 1]");
  if (reflectivity_min < 0 || reflectivity_max > 1 || reflectivity_min > reflectivity_max)
    fail("reflectivity range must lie in [0, 1]");
  if (noise_sigma < 0 || ghost_offset_range < 0 || blur_azimuth_cells < 0 || max_speed < 0)
    fail("noise, ghost offset, blur and speed must be non-negative");
  if (length_min <= 0 || width_min <= 0 || length_min > length_max || width_min > width_max)
    fail("object size ranges must be positive and ordered");
  if (cell_size_m <= 0) fail("cell_size_m must be positive");
}

double wrap_half_pi(double theta) {
  const double pi = std::numbers::pi;
  double t = std::remainder(theta, pi);  // [-pi/2, pi/2]
  if (t <= -pi / 2) t += pi;
  return t;
}

bool box_contains(const AnnotatedBox& b, double x, double y) {
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  const double dx = x - b.cx, dy = y - b.cy;
  const double lx = c * dx + s * dy, ly = -s * dx + c * dy;
  return std::abs(lx) <= b.w / 2 && std::abs(ly) <= b.h / 2;
}

namespace {

double image_center(const SequenceSpec& spec) { return (static_cast<double>(spec.image_size) - 1.0) / 2.0; }

Vec2 world_to_pixel(const Pose2& ego, Vec2 w, const SequenceSpec& spec) {
  const auto r = rotation_matrix(-ego.theta);
  const double dx = w.x - ego.tx, dy = w.y - ego.ty, c = image_center(spec);
  return {(r[0] * dx + r[1] * dy) / spec.cell_size_m + c, (r[2] * dx + r[3] * dy) / spec.cell_size_m + c};
}

Vec2 pixel_to_world(const Pose2& ego, Vec2 p, const SequenceSpec& spec) {
  const auto r = rotation_matrix(ego.theta);
  const double c = image_center(spec);
  const double dx = (p.x - c) * spec.cell_size_m, dy = (p.y - c) * spec.cell_size_m;
  return {r[0] * dx + r[1] * dy + ego.tx, r[2] * dx + r[3] * dy + ego.ty};
}

std::vector<Pose2> ego_trajectory(const SequenceSpec& spec) {
  std::vector<Pose2> poses(spec.num_frames);
  const double step = spec.ego_speed * spec.cell_size_m;
  for (std::size_t f = 1; f < spec.num_frames; ++f) {
    const Pose2& p = poses[f - 1];
    switch (spec.ego_motion) {
      case EgoMotion::Static:
        poses[f] = p;
        break;
      case EgoMotion::Linear:
        poses[f] = {static_cast<double>(f) * step, 0.0, 0.0};
        break;
      case EgoMotion::Turning:
        poses[f] = {p.tx + step * std::cos(p.theta), p.ty + step * std::sin(p.theta), p.theta + spec.ego_turn_rate};
        break;
    }
  }
  return poses;
}

void paint(std::vector<double>& img, std::size_t n, const AnnotatedBox& b, double value) {
  const double reach = 0.5 * std::hypot(b.w, b.h) + 1.0;
  const long x0 = std::max(0L, static_cast<long>(std::floor(b.cx - reach)));
  const long x1 = std::min(static_cast<long>(n) - 1, static_cast<long>(std::ceil(b.cx + reach)));
  const long y0 = std::max(0L, static_cast<long>(std::floor(b.cy - reach)));
  const long y1 = std::min(static_cast<long>(n) - 1, static_cast<long>(std::ceil(b.cy + reach)));
  for (long y = y0; y <= y1; ++y)
    for (long x = x0; x <= x1; ++x)
      if (box_contains(b, static_cast<double>(x), static_cast<double>(y))) {
        double& px = img[static_cast<std::size_t>(y) * n + static_cast<std::size_t>(x)];
        px = std::max(px, value);
      }
}

// Tangential smear about the image center: mean of nearest-neighbour taps
// spaced one pixel of arc apart.
std::vector<double> azimuthal_blur(const std::vector<double>& img, std::size_t n, double width) {
  const long k = static_cast<long>(std::floor(width / 2));
  if (k <= 0) return img;
  const double c = (static_cast<double>(n) - 1.0) / 2.0;
  std::vector<double> out(img.size(), 0.0);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double dx = static_cast<double>(x) - c, dy = static_cast<double>(y) - c;
      const double r = std::max(1.0, std::hypot(dx, dy));
      double acc = 0;
      for (long t = -k; t <= k; ++t) {
        const double a = static_cast<double>(t) / r, ca = std::cos(a), sa = std::sin(a);
        const long sx = std::lround(ca * dx - sa * dy + c), sy = std::lround(sa * dx + ca * dy + c);
        if (sx < 0 || sy < 0 || sx >= static_cast<long>(n) || sy >= static_cast<long>(n)) continue;
        acc += img[static_cast<std::size_t>(sy) * n + static_cast<std::size_t>(sx)];
      }
      out[y * n + x] = acc / static_cast<double>(2 * k + 1);
    }
  return out;
}

}  // namespace

Tensor<double> render_frame(const std::vector<RenderObject>& objects, const SequenceSpec& spec,
                            std::size_t frame_index) {
  const std::size_t n = spec.image_size;
  std::mt19937_64 rng(splitmix64(splitmix64(spec.seed) ^ splitmix64(0x5eedULL + frame_index)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> img(n * n, 0.0);
  for (const auto& o : objects) paint(img, n, o.box, o.reflectivity);
  const double c = (static_cast<double>(n) - 1.0) / 2.0;
  for (const auto& o : objects) {
    // Both draws happen for every object so the stream does not depend on ghost_prob.
    const double u = unit(rng), off = spec.ghost_offset_range * (0.5 + 0.5 * unit(rng));
    if (u >= spec.ghost_prob) continue;
    const double dx = o.box.cx - c, dy = o.box.cy - c, r = std::hypot(dx, dy);
    AnnotatedBox g = o.box;
    if (r > 1e-9) {
      g.cx += off * dx / r;
      g.cy += off * dy / r;
    } else {
      g.cx += off;
    }
    paint(img, n, g, 0.5 * o.reflectivity);
  }
  img = azimuthal_blur(img, n, spec.blur_azimuth_cells);
  if (spec.noise_sigma > 0) {
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (auto& v : img) v += noise(rng);
  }
  for (auto& v : img) v = std::clamp(v, 0.0, 1.0);
  return Tensor<double>(Shape{1, n, n}, std::move(img));
}

Sequence simulate_sequence(const SequenceSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(splitmix64(spec.seed));
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const double n = static_cast<double>(spec.image_size);
  const auto ego = ego_trajectory(spec);

  Sequence seq;
  struct Placed {
    Vec2 p;
    double radius;
  };
  std::vector<Placed> placed;
  for (std::size_t k = 0; k < spec.n_objects; ++k) {
    ObjectTrack tr;
    tr.id = static_cast<int>(k);
    bool ok = false;
    Vec2 p0;
    for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
      tr.length = uniform(spec.length_min, std::nextafter(spec.length_max, 1e300));
      tr.width = uniform(spec.width_min, std::nextafter(spec.width_max, 1e300));
      const double radius = 0.5 * std::hypot(tr.length, tr.width);
      const double margin = radius + 0.1 * n;
      if (2 * margin >= n - 1) continue;
      p0 = {uniform(margin, n - 1 - margin), uniform(margin, n - 1 - margin)};
      ok = std::all_of(placed.begin(), placed.end(), [&](const Placed& q) {
        return std::hypot(q.p.x - p0.x, q.p.y - p0.y) >= q.radius + radius + 2.0;
      });
      if (ok) placed.push_back({p0, radius});
    }
    if (!ok)
      throw std::runtime_error("simulate_sequence: could not place " + std::to_string(spec.n_objects) +
                               " objects without overlap in a " + std::to_string(spec.image_size) + " px image");
    const double heading = uniform(-std::numbers::pi, std::numbers::pi);
    const double speed = uniform(0.0, std::nextafter(spec.max_speed, 1e300)) * spec.cell_size_m;
    tr.reflectivity = uniform(spec.reflectivity_min, std::nextafter(spec.reflectivity_max, 1e300));
    const Vec2 w0 = pixel_to_world(ego[0], p0, spec);
    for (std::size_t f = 0; f < spec.num_frames; ++f) {
      const double t = static_cast<double>(f);
      const Vec2 w{w0.x + t * speed * std::cos(heading), w0.y + t * speed * std::sin(heading)};
      tr.world.push_back(w);
      tr.pixel.push_back(f == 0 ? p0 : world_to_pixel(ego[f], w, spec));
      tr.heading.push_back(heading);
    }
    seq.tracks.push_back(std::move(tr));
  }

  for (std::size_t f = 0; f < spec.num_frames; ++f) {
    RadarFrame fr;
    fr.frame_index = f;
    fr.ego_pose_world = ego[f];
    std::vector<RenderObject> objs;
    for (const auto& tr : seq.tracks) {
      AnnotatedBox b{tr.id, tr.pixel[f].x, tr.pixel[f].y, tr.length, tr.width,
                     wrap_half_pi(tr.heading[f] - ego[f].theta)};
      objs.push_back({b, tr.reflectivity});
      if (b.cx >= 0 && b.cy >= 0 && b.cx <= n - 1 && b.cy <= n - 1) fr.boxes.push_back(b);
    }
    fr.image = render_frame(objs, spec, f);
    seq.frames.push_back(std::move(fr));
  }
  return seq;
}

// ---- dataset IO ----

std::filesystem::path sequence_dir(const std::filesystem::path& root, std::size_t sequence) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "seq_%04zu", sequence);
  return root / buf;
}

std::filesystem::path frame_stem(const std::filesystem::path& root, std::size_t sequence, std::size_t frame) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%03zu", frame);
  return sequence_dir(root, sequence) / buf;
}

void write_pgm16(const std::filesystem::path& path, const Tensor<double>& image) {
  if (image.rank() != 3 || image.dim(0) != 1) throw ShapeError("write_pgm16: expected 1 x H x W image");
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "P5\n" << w << " " << h << "\n65535\n";
  std::string buf(2 * h * w, '\0');
  for (std::size_t i = 0; i < h * w; ++i) {
    const auto g = static_cast<std::uint16_t>(std::lround(std::clamp(image.data()[i], 0.0, 1.0) * 65535.0));
    buf[2 * i] = static_cast<char>(g >> 8);
    buf[2 * i + 1] = static_cast<char>(g & 0xff);
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

Tensor<double> read_pgm16(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P5" || maxval != 65535 || w == 0 || h == 0)
    throw std::runtime_error(path.string() + ": not a 16-bit binary PGM");
  is.get();
  std::string buf(2 * h * w, '\0');
  is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) throw std::runtime_error(path.string() + ": truncated PGM");
  std::vector<double> v(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    const unsigned hi = static_cast<unsigned char>(buf[2 * i]), lo = static_cast<unsigned char>(buf[2 * i + 1]);
    v[i] = static_cast<double>((hi << 8) | lo) / 65535.0;
  }
  return Tensor<double>(Shape{1, h, w}, std::move(v));
}

namespace {

json spec_to_json(const SequenceSpec& s) {
  return json{{"image_size", s.image_size},
              {"num_frames", s.num_frames},
              {"tau", s.tau},
              {"n_objects", s.n_objects},
              {"noise_sigma", s.noise_sigma},
              {"ghost_prob", s.ghost_prob},
              {"ghost_offset_range", s.ghost_offset_range},
              {"blur_azimuth_cells", s.blur_azimuth_cells},
              {"ego_motion", to_string(s.ego_motion)},
              {"ego_speed", s.ego_speed},
              {"ego_turn_rate", s.ego_turn_rate},
              {"max_speed", s.max_speed},
              {"length_min", s.length_min},
              {"length_max", s.length_max},
              {"width_min", s.width_min},
              {"width_max", s.width_max},
              {"reflectivity_min", s.reflectivity_min},
              {"reflectivity_max", s.reflectivity_max},
              {"cell_size_m", s.cell_size_m},
              {"seed", s.seed}};
}

json frame_to_json(const RadarFrame& f) {
  json boxes = json::array();
  for (const auto& b : f.boxes)
    boxes.push_back({{"id", b.id}, {"cx", b.cx}, {"cy", b.cy}, {"w", b.w}, {"h", b.h}, {"theta", b.theta}});
  return json{{"frame_index", f.frame_index},
              {"ego_pose_world", {{"tx", f.ego_pose_world.tx}, {"ty", f.ego_pose_world.ty}, {"theta", f.ego_pose_world.theta}}},
              {"boxes", boxes}};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << text;
}

json read_json(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace

DatasetMeta write_dataset(const std::filesystem::path& root, const SequenceSpec& spec, std::size_t stride,
                          std::size_t n_train, std::size_t n_val) {
  spec.validate();
  if (stride == 0 || spec.image_size % stride != 0)
    throw std::invalid_argument("image_size must be a multiple of stride");
  const std::size_t total = n_train + n_val;
  std::vector<Sequence> seqs(total);
  std::vector<std::string> errors(total);
  const int threads = kernels::num_threads();
#pragma omp parallel for schedule(static) num_threads(threads)
  for (std::size_t i = 0; i < total; ++i) {
    try {
      SequenceSpec s = spec;
      s.seed = spec.seed + i;
      seqs[i] = simulate_sequence(s);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (std::size_t i = 0; i < total; ++i)
    if (!errors[i].empty()) throw std::runtime_error("sequence " + std::to_string(i) + ": " + errors[i]);

  DatasetMeta meta;
  meta.image_size = spec.image_size;
  meta.stride = stride;
  meta.tau = spec.tau;
  meta.num_frames = spec.num_frames;
  meta.cell_size_m = spec.cell_size_m;
  meta.seed = spec.seed;
  for (std::size_t i = 0; i < total; ++i) (i < n_train ? meta.train : meta.val).push_back(i);

  for (std::size_t i = 0; i < total; ++i) {
    std::filesystem::create_directories(sequence_dir(root, i));
    for (const auto& f : seqs[i].frames) {
      const auto stem = frame_stem(root, i, f.frame_index);
      write_pgm16(stem.string() + ".pgm", f.image);
      write_text(stem.string() + ".json", frame_to_json(f).dump(2) + "\n");
    }
  }
  json m{{"image_size", meta.image_size}, {"stride", meta.stride},         {"tau", meta.tau},
         {"num_frames", meta.num_frames}, {"cell_size_m", meta.cell_size_m}, {"seed", meta.seed},
         {"splits", {{"train", meta.train}, {"val", meta.val}}},
         {"sim", spec_to_json(spec)}};
  write_text(root / "meta.json", m.dump(2) + "\n");
  return meta;
}

DatasetMeta load_meta(const std::filesystem::path& root) {
  const auto path = root / "meta.json";
  const json m = read_json(path);
  try {
    DatasetMeta meta;
    meta.image_size = m.at("image_size").get<std::size_t>();
    meta.stride = m.at("stride").get<std::size_t>();
    meta.tau = m.at("tau").get<std::size_t>();
    meta.num_frames = m.at("num_frames").get<std::size_t>();
    meta.cell_size_m = m.at("cell_size_m").get<double>();
    meta.seed = m.at("seed").get<std::uint64_t>();
    meta.train = m.at("splits").at("train").get<std::vector<std::size_t>>();
    meta.val = m.at("splits").at("val").get<std::vector<std::size_t>>();
    return meta;
  } catch (const json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

RadarFrame load_frame(const std::filesystem::path& root, std::size_t sequence, std::size_t frame) {
  const auto stem = frame_stem(root, sequence, frame);
  const std::filesystem::path json_path = stem.string() + ".json";
  const json j = read_json(json_path);
  RadarFrame f;
  try {
    f.frame_index = j.at("frame_index").get<std::size_t>();
    const auto& p = j.at("ego_pose_world");
    f.ego_pose_world = {p.at("tx").get<double>(), p.at("ty").get<double>(), p.at("theta").get<double>()};
    for (const auto& b : j.at("boxes"))
      f.boxes.push_back({b.at("id").get<int>(), b.at("cx").get<double>(), b.at("cy").get<double>(),
                         b.at("w").get<double>(), b.at("h").get<double>(), b.at("theta").get<double>()});
  } catch (const json::exception& e) {
    throw std::runtime_error(json_path.string() + ": " + e.what());
  }
  f.image = read_pgm16(stem.string() + ".pgm");
  return f;
}

}  // namespace rafd
