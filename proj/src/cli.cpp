#include "rafd/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <ostream>
#include <sstream>

#include "json.hpp"

namespace rafd {

using nlohmann::json;

// ---- config ----

void RunConfig::finalize() {
  sim.validate();
  if (sim.image_size % NetConfig::stride != 0)
    throw std::invalid_argument("sim.image_size must be a multiple of " + std::to_string(NetConfig::stride));
  net.hf = net.wf = sim.image_size / NetConfig::stride;
  net.validate();
  train.validate();
  if (precision != "float" && precision != "double")
    throw std::invalid_argument("train.precision must be float or double, got '" + precision + "'");
  if (train.n_frames > sim.num_frames)
    throw std::invalid_argument("train.n_frames exceeds sim.num_frames");
}

namespace {

std::string format(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
std::string format(std::size_t v) { return std::to_string(v); }
std::string format(bool v) { return v ? "true" : "false"; }
std::string format(const std::string& v) { return v; }
std::string format(const std::filesystem::path& v) { return v.string(); }
std::string format(EgoMotion v) { return to_string(v); }

void parse(const std::string& s, double& v) {
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v))
    throw std::invalid_argument("expected a number, got '" + s + "'");
}
void parse(const std::string& s, std::size_t& v) {
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw std::invalid_argument("expected a non-negative integer, got '" + s + "'");
}
void parse(const std::string& s, bool& v) {
  if (s == "true" || s == "1") {
    v = true;
  } else if (s == "false" || s == "0") {
    v = false;
  } else {
    throw std::invalid_argument("expected true or false, got '" + s + "'");
  }
}
void parse(const std::string& s, std::string& v) { v = s; }
void parse(const std::string& s, std::filesystem::path& v) {
  if (s.empty()) throw std::invalid_argument("expected a path");
  v = s;
}
void parse(const std::string& s, EgoMotion& v) { v = parse_ego_motion(s); }

struct Field {
  std::string name, doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename Acc>
Field field(std::string name, std::string doc, Acc acc) {
  return {std::move(name), std::move(doc),
          [acc](const RunConfig& c) { return format(acc(const_cast<RunConfig&>(c))); },
          [acc](RunConfig& c, const std::string& s) { parse(s, acc(c)); }};
}

#define RAFD_FIELD(key, doc, member) field(key, doc, [](RunConfig& c) -> auto& { return c.member; })

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f{
        RAFD_FIELD("sim.image_size", "input image side in pixels; the feature map is a quarter of it", sim.image_size),
        RAFD_FIELD("sim.num_frames", "frames per sequence", sim.num_frames),
        RAFD_FIELD("sim.tau", "simulation steps between recorded frames", sim.tau),
        RAFD_FIELD("sim.n_objects", "vehicles per sequence", sim.n_objects),
        RAFD_FIELD("sim.noise_sigma", "std of additive speckle-like noise", sim.noise_sigma),
        RAFD_FIELD("sim.ghost_prob", "probability that an object casts a multipath ghost", sim.ghost_prob),
        RAFD_FIELD("sim.ghost_offset_range", "max radial ghost displacement, pixels", sim.ghost_offset_range),
        RAFD_FIELD("sim.blur_azimuth_cells", "tangential smear width, pixels of arc", sim.blur_azimuth_cells),
        RAFD_FIELD("sim.ego_motion", "static, linear or turning", sim.ego_motion),
        RAFD_FIELD("sim.ego_speed", "ego speed, pixels per frame", sim.ego_speed),
        RAFD_FIELD("sim.ego_turn_rate", "ego yaw rate for the turning model, radians per frame", sim.ego_turn_rate),
        RAFD_FIELD("sim.max_speed", "max object speed, pixels per frame", sim.max_speed),
        RAFD_FIELD("sim.length_min", "min object length, pixels", sim.length_min),
        RAFD_FIELD("sim.length_max", "max object length, pixels", sim.length_max),
        RAFD_FIELD("sim.width_min", "min object width, pixels", sim.width_min),
        RAFD_FIELD("sim.width_max", "max object width, pixels", sim.width_max),
        RAFD_FIELD("sim.reflectivity_min", "min object reflectivity", sim.reflectivity_min),
        RAFD_FIELD("sim.reflectivity_max", "max object reflectivity", sim.reflectivity_max),
        RAFD_FIELD("sim.cell_size_m", "metres per pixel", sim.cell_size_m),
        RAFD_FIELD("sim.seed", "dataset seed; sequence i uses seed + i", sim.seed),
        RAFD_FIELD("data.n_train", "training sequences", n_train),
        RAFD_FIELD("data.n_val", "validation sequences", n_val),
        RAFD_FIELD("data.dir", "dataset directory", dataset),
        RAFD_FIELD("net.cf", "feature channels", net.cf),
        RAFD_FIELD("net.k_queries", "detection queries per frame", net.k_queries),
        RAFD_FIELD("net.n_deform_points", "sampling points per deformable query", net.n_deform_points),
        RAFD_FIELD("net.n_enhance_blocks", "window / shifted-window block pairs", net.n_enhance_blocks),
        RAFD_FIELD("net.n_cross_blocks", "cross-attention layers before matching", net.n_cross_blocks),
        RAFD_FIELD("net.n_prop_blocks", "deformable propagation blocks", net.n_prop_blocks),
        RAFD_FIELD("net.n_decoder_layers", "query decoder layers", net.n_decoder_layers),
        RAFD_FIELD("net.c_stem", "backbone stem channels", net.c_stem),
        RAFD_FIELD("net.c_mid", "backbone stage 1 channels", net.c_mid),
        RAFD_FIELD("net.c_deep", "backbone stage 2 channels", net.c_deep),
        RAFD_FIELD("net.ffn_mult", "feed-forward expansion", net.ffn_mult),
        RAFD_FIELD("net.flow_guided", "false samples the previous frame at the grid (zero-flow baseline)",
                   net.flow_guided),
        RAFD_FIELD("train.lr", "Adam learning rate", train.lr),
        RAFD_FIELD("train.weight_decay", "decoupled weight decay", train.weight_decay),
        RAFD_FIELD("train.batch_size", "tuples per step", train.batch_size),
        RAFD_FIELD("train.epochs", "passes over the training tuples", train.epochs),
        RAFD_FIELD("train.max_steps", "step cap across epochs; 0 for none", train.max_steps),
        RAFD_FIELD("train.seed", "initialisation and shuffling seed", train.seed),
        RAFD_FIELD("train.n_frames", "frames per input tuple", train.n_frames),
        RAFD_FIELD("train.tau", "frame spacing inside a tuple", train.tau),
        RAFD_FIELD("train.gamma", "minimum target radius, cells", train.gamma),
        RAFD_FIELD("train.lambda_reg", "box regression weight", train.lambda_reg),
        RAFD_FIELD("train.precision", "float or double", precision),
        RAFD_FIELD("train.run_dir", "checkpoint and log directory", run_dir),
    };
    const auto after = std::find_if(f.begin(), f.end(), [](const Field& x) { return x.name == "net.n_deform_points"; });
    f.insert(after + 1,
             Field{"net.window", "attention window side in cells",
                   [](const RunConfig& c) { return format(c.net.window_h); },
                   [](RunConfig& c, const std::string& s) {
                     parse(s, c.net.window_h);
                     c.net.window_w = c.net.window_h;
                   }});
    return f;
  }();
  return table;
}

#undef RAFD_FIELD

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace

std::vector<ConfigKey> config_keys() {
  const RunConfig defaults;
  std::vector<ConfigKey> out;
  for (const auto& f : fields()) out.push_back({f.name, f.doc, f.get(defaults)});
  return out;
}

RunConfig parse_config(const std::string& text, const std::string& source) {
  RunConfig c;
  std::map<std::string, const Field*> by_name;
  for (const auto& f : fields()) by_name[f.name] = &f;
  std::map<std::string, std::size_t> seen;
  std::istringstream is(text);
  std::size_t lineno = 0;
  for (std::string line; std::getline(is, line);) {
    ++lineno;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    const std::string body = trim(line.substr(0, line.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw std::invalid_argument(where + "expected key = value");
    const std::string key = trim(body.substr(0, eq)), value = trim(body.substr(eq + 1));
    const auto it = by_name.find(key);
    if (it == by_name.end()) throw std::invalid_argument(where + "unknown key '" + key + "'");
    if (seen.count(key))
      throw std::invalid_argument(where + "duplicate key '" + key + "' (first set on line " +
                                  std::to_string(seen[key]) + ")");
    seen[key] = lineno;
    try {
      it->second->set(c, value);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(where + key + ": " + e.what());
    }
  }
  return c;
}

void apply_setting(RunConfig& config, const std::string& key, const std::string& value) {
  for (const auto& f : fields())
    if (f.name == key) {
      try {
        f.set(config, trim(value));
      } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(key + ": " + e.what());
      }
      return;
    }
  throw std::invalid_argument("unknown key '" + key + "'");
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string serialize_config(const RunConfig& config) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields()) {
    const std::string sec = f.name.substr(0, f.name.find('.'));
    if (sec != section) {
      if (!section.empty()) os << "\n";
      section = sec;
    }
    os << "# " << f.doc << "\n" << f.name << " = " << f.get(config) << "\n";
  }
  return os.str();
}

// ---- rendering ----

void RgbImage::set(long x, long y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  if (x < 0 || y < 0 || x >= static_cast<long>(width) || y >= static_cast<long>(height)) return;
  const std::size_t k = (static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)) * 3;
  pixels[k] = r;
  pixels[k + 1] = g;
  pixels[k + 2] = b;
}

RgbImage render_radar(const Tensor<double>& image, std::size_t scale) {
  if (image.rank() != 3 || image.dim(0) != 1)
    throw ShapeError("render_radar: expected 1 x H x W, got " + shape_str(image.shape()));
  const std::size_t h = image.dim(1), w = image.dim(2);
  RgbImage out(w * scale, h * scale);
  for (std::size_t y = 0; y < h * scale; ++y)
    for (std::size_t x = 0; x < w * scale; ++x) {
      const double v = std::clamp(image.data()[(y / scale) * w + x / scale], 0.0, 1.0);
      const auto g = static_cast<std::uint8_t>(std::lround(255 * v));
      out.set(static_cast<long>(x), static_cast<long>(y), g, g, g);
    }
  return out;
}

void draw_box(RgbImage& img, const OrientedBox& cells, std::size_t stride, std::size_t scale, std::uint8_t r,
              std::uint8_t g, std::uint8_t b) {
  const double s = static_cast<double>(stride), k = static_cast<double>(scale);
  const OrientedBox px{cells.cx * s + (s - 1) / 2, cells.cy * s + (s - 1) / 2, cells.w * s, cells.h * s, cells.theta};
  const auto c = px.corners();
  for (int e = 0; e < 4; ++e) {
    // Bresenham between rounded endpoints in output pixels.
    long x0 = std::lround((c[e].x + 0.5) * k - 0.5), y0 = std::lround((c[e].y + 0.5) * k - 0.5);
    const long x1 = std::lround((c[(e + 1) % 4].x + 0.5) * k - 0.5), y1 = std::lround((c[(e + 1) % 4].y + 0.5) * k - 0.5);
    const long dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0), sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    long err = dx + dy;
    while (true) {
      img.set(x0, y0, r, g, b);
      if (x0 == x1 && y0 == y1) break;
      const long e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }
}

RgbImage render_flow(const Tensor<double>& flow, std::size_t block, double max_magnitude) {
  if (flow.rank() != 3 || flow.dim(0) != 2)
    throw ShapeError("render_flow: expected 2 x H x W, got " + shape_str(flow.shape()));
  const std::size_t h = flow.dim(1), w = flow.dim(2), n = h * w;
  const auto v = flow.data();
  double peak = max_magnitude;
  if (peak <= 0)
    for (std::size_t i = 0; i < n; ++i) peak = std::max(peak, std::hypot(v[i], v[n + i]));
  RgbImage out(w * block, h * block, 255);
  for (std::size_t i = 0; i < n; ++i) {
    const double mag = std::hypot(v[i], v[n + i]);
    const double sat = peak > 0 ? std::min(1.0, mag / peak) : 0.0;
    double hue = std::atan2(v[n + i], v[i]) / (2 * std::numbers::pi);
    if (hue < 0) hue += 1;
    // HSV with value 1.
    const double hh = hue * 6;
    const int sector = static_cast<int>(hh) % 6;
    const double f = hh - std::floor(hh);
    const double p = 1 - sat, q = 1 - sat * f, t = 1 - sat * (1 - f);
    double rgb[3];
    switch (sector) {
      case 0: rgb[0] = 1, rgb[1] = t, rgb[2] = p; break;
      case 1: rgb[0] = q, rgb[1] = 1, rgb[2] = p; break;
      case 2: rgb[0] = p, rgb[1] = 1, rgb[2] = t; break;
      case 3: rgb[0] = p, rgb[1] = q, rgb[2] = 1; break;
      case 4: rgb[0] = t, rgb[1] = p, rgb[2] = 1; break;
      default: rgb[0] = 1, rgb[1] = p, rgb[2] = q; break;
    }
    std::uint8_t c[3];
    for (int k = 0; k < 3; ++k) c[k] = static_cast<std::uint8_t>(std::lround(255 * rgb[k]));
    for (std::size_t a = 0; a < block; ++a)
      for (std::size_t b = 0; b < block; ++b)
        out.set(static_cast<long>((i % w) * block + b), static_cast<long>((i / w) * block + a), c[0], c[1], c[2]);
  }
  return out;
}

void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

// ---- commands ----

namespace {

std::filesystem::path checkpoint_stem(const RunConfig& c, const std::filesystem::path& given) {
  return given.empty() ? c.run_dir / "last" : given;
}

void check_checkpoint_config(const RunConfig& c, const std::filesystem::path& stem) {
  const CheckpointInfo info = read_checkpoint_info(stem);
  if (!(info.config == c.net))
    throw std::invalid_argument("checkpoint " + stem.string() + " was trained with net config " +
                                info.config.to_json().dump() + " but the run config gives " + c.net.to_json().dump());
}

void write_boxes_and_flow(const std::filesystem::path& prefix, const Tensor<double>& radar,
                          const std::vector<OrientedBox>& gt, const std::vector<ScoredBox>& dets,
                          const Tensor<double>& flow, std::size_t scale) {
  RgbImage img = render_radar(radar, scale);
  for (const auto& b : gt) draw_box(img, b, NetConfig::stride, scale, 0, 255, 0);
  for (const auto& d : dets) draw_box(img, d.box, NetConfig::stride, scale, 255, 0, 0);
  write_ppm(prefix.string() + "_boxes.ppm", img);
  write_ppm(prefix.string() + "_flow.ppm", render_flow(flow, NetConfig::stride * scale));
}

Dataset load_split(const RunConfig& c, const std::string& split) {
  Dataset data = load_dataset(c.dataset, split);
  if (data.meta.image_size != c.sim.image_size)
    throw std::invalid_argument("dataset " + c.dataset.string() + " has image size " +
                                std::to_string(data.meta.image_size) + " but the run config gives " +
                                std::to_string(c.sim.image_size));
  return data;
}

EvalOptions eval_options(const RunConfig& c, bool oracle) {
  EvalOptions o;
  o.n_frames = c.train.n_frames;
  o.tau = c.train.tau;
  o.gamma = c.train.gamma;
  o.oracle = oracle;
  return o;
}

template <typename T>
int run_eval(const RunConfig& c, const EvalCommand& cmd, std::ostream& out) {
  RaFDNet<T> net(c.net, c.train.seed);
  if (!cmd.oracle) load_checkpoint(checkpoint_stem(c, cmd.checkpoint), net);
  const Dataset data = load_split(c, cmd.split);
  std::vector<EvalFrame> frames;
  const EvalReport report = evaluate(net, data, eval_options(c, cmd.oracle), cmd.dump_images.empty() ? nullptr : &frames);
  const std::string text = report.to_json().dump(2) + "\n";
  out << text;
  if (!cmd.report.empty()) {
    std::ofstream os(cmd.report, std::ios::binary);
    if (!(os << text)) throw std::runtime_error("cannot write " + cmd.report.string());
  }
  if (!cmd.dump_images.empty()) {
    std::filesystem::create_directories(cmd.dump_images);
    for (const auto& f : frames) {
      const std::size_t last = data.frame_index(f.sample, c.train.n_frames - 1, c.train.tau);
      char name[64];
      std::snprintf(name, sizeof name, "seq_%04zu_frame_%03zu", data.ids[f.sample.sequence], last);
      write_boxes_and_flow(cmd.dump_images / name, data.sequences[f.sample.sequence].images[last], f.ground_truth,
                           f.detections, f.flow, 4);
    }
  }
  return 0;
}

struct TupleResult {
  std::vector<ScoredBox> detections;
  Tensor<double> flow;
};

template <typename T>
TupleResult run_tuple(const RunConfig& c, const std::filesystem::path& stem, const Dataset& data, const Sample& s) {
  RaFDNet<T> net(c.net, c.train.seed);
  load_checkpoint(stem, net);
  net.set_training(false);
  NoGradGuard no_grad;
  std::vector<Tensor<T>> frames;
  for (std::size_t k = 0; k < c.train.n_frames; ++k)
    frames.push_back(cast_tensor<T>(data.sequences[s.sequence].images[data.frame_index(s, k, c.train.tau)]));
  const auto fo = net.forward_multiframe(frames, data.tuple_poses(s, c.train.n_frames, c.train.tau));
  TupleResult r;
  for (const auto& d : fo.detections) r.detections.push_back({to_oriented(d), d.score});
  const auto& f = fo.flows.back();
  r.flow = Tensor<double>(f.shape(), std::vector<double>(f.data().begin(), f.data().end()));
  return r;
}

Sample pick_tuple(const RunConfig& c, const Dataset& data, std::size_t sequence, std::size_t frame) {
  if (sequence >= data.sequences.size())
    throw std::invalid_argument("sequence " + std::to_string(sequence) + " out of range (split has " +
                                std::to_string(data.sequences.size()) + ")");
  const std::size_t span = (c.train.n_frames - 1) * c.train.tau;
  if (frame + span >= data.sequences[sequence].images.size())
    throw std::invalid_argument("frame " + std::to_string(frame) + " does not start a full tuple");
  return {sequence, frame};
}

}  // namespace

int cmd_generate(const RunConfig& config, const std::filesystem::path& out_dir, bool force, std::ostream& out,
                 std::ostream& err) {
  if (std::filesystem::exists(out_dir) && !std::filesystem::is_empty(out_dir)) {
    if (!force) {
      err << "error: " << out_dir.string() << " is not empty (use --force to overwrite)\n";
      return 2;
    }
    std::filesystem::remove_all(out_dir);
  }
  std::filesystem::create_directories(out_dir);
  write_dataset(out_dir, config.sim, NetConfig::stride, config.n_train, config.n_val);
  out << "wrote " << config.n_train + config.n_val << " sequences (" << config.n_train << " train, " << config.n_val
      << " val) with seed " << config.sim.seed << " to " << out_dir.string() << "\n";
  return 0;
}

int cmd_train(const RunConfig& config, bool resume, std::ostream& out, std::ostream& err) {
  std::filesystem::create_directories(config.run_dir);
  {
    std::ofstream os(config.run_dir / "config.txt", std::ios::binary);
    os << serialize_config(config);
  }
  try {
    const TrainResult r = config.precision == "float"
                              ? train_loop<float>(config.dataset, config.net, config.train, config.run_dir, resume)
                              : train_loop<double>(config.dataset, config.net, config.train, config.run_dir, resume);
    out << "trained " << r.log.size() << " steps (total " << r.steps << ")";
    if (!r.log.empty()) out << ", final loss " << r.log.back().l_total;
    out << "; checkpoint " << (config.run_dir / "last").string() << "\n";
    return 0;
  } catch (const TrainingDiverged& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  }
}

int cmd_eval(const RunConfig& config, const EvalCommand& command, std::ostream& out, std::ostream& err) {
  if (!command.oracle) {
    try {
      check_checkpoint_config(config, checkpoint_stem(config, command.checkpoint));
    } catch (const std::invalid_argument& e) {
      err << "error: " << e.what() << "\n";
      return 2;
    }
  }
  return config.precision == "float" ? run_eval<float>(config, command, out) : run_eval<double>(config, command, out);
}

int cmd_infer(const RunConfig& config, const InferCommand& command, std::ostream& out, std::ostream& err) {
  const auto stem = checkpoint_stem(config, command.checkpoint);
  try {
    check_checkpoint_config(config, stem);
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  const Dataset data = load_split(config, command.split);
  const Sample s = pick_tuple(config, data, command.sequence, command.frame);
  const TupleResult r = config.precision == "float" ? run_tuple<float>(config, stem, data, s)
                                                    : run_tuple<double>(config, stem, data, s);
  const double st = NetConfig::stride, off = (st - 1) / 2;
  json dets = json::array();
  for (const auto& d : r.detections)
    dets.push_back({{"cx", d.box.cx * st + off},
                    {"cy", d.box.cy * st + off},
                    {"w", d.box.w * st},
                    {"h", d.box.h * st},
                    {"theta", d.box.theta},
                    {"score", d.score}});
  double mean_mag = 0;
  const std::size_t n = r.flow.numel() / 2;
  for (std::size_t i = 0; i < n; ++i) mean_mag += std::hypot(r.flow.data()[i], r.flow.data()[n + i]);
  out << json{{"sequence", data.ids[s.sequence]},
              {"frame", data.frame_index(s, config.train.n_frames - 1, config.train.tau)},
              {"detections", dets},
              {"mean_flow_cells", mean_mag / static_cast<double>(n)}}
             .dump(2)
      << "\n";
  return 0;
}

int cmd_render(const RunConfig& config, const RenderCommand& command, std::ostream& out, std::ostream& err) {
  const bool predict = !command.checkpoint.empty();
  if (predict) {
    try {
      check_checkpoint_config(config, command.checkpoint);
    } catch (const std::invalid_argument& e) {
      err << "error: " << e.what() << "\n";
      return 2;
    }
  }
  const Dataset data = load_split(config, command.split);
  const Sample s = pick_tuple(config, data, command.sequence, command.frame);
  const auto& seq = data.sequences[s.sequence];
  const std::size_t last = data.frame_index(s, config.train.n_frames - 1, config.train.tau);
  const GridSpec grid = config.net.grid();
  std::vector<OrientedBox> gt;
  for (const auto& b : make_det_targets(seq.boxes[last], grid, config.train.gamma).boxes) gt.push_back(to_oriented(b));
  TupleResult r;
  if (predict) {
    r = config.precision == "float" ? run_tuple<float>(config, command.checkpoint, data, s)
                                    : run_tuple<double>(config, command.checkpoint, data, s);
  } else {
    const auto poses = data.tuple_poses(s, config.train.n_frames, config.train.tau);
    r.flow = build_gt_flow(seq.boxes[last], seq.boxes[data.frame_index(s, config.train.n_frames - 2, config.train.tau)],
                           poses.back(), grid, config.train.gamma)
                 .vectors;
  }
  if (!command.prefix.parent_path().empty()) std::filesystem::create_directories(command.prefix.parent_path());
  write_boxes_and_flow(command.prefix, seq.images[last], gt, r.detections, r.flow, command.scale);
  out << "wrote " << command.prefix.string() << "_boxes.ppm and " << command.prefix.string() << "_flow.ppm\n";
  return 0;
}

}  // namespace rafd
