#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <queue>

#include "doctest.h"
#include "rafd/scenesim.hpp"

using namespace rafd;
namespace fs = std::filesystem;

namespace {

SequenceSpec quiet_spec() {
  SequenceSpec s;
  s.image_size = 64;
  s.num_frames = 3;
  s.n_objects = 3;
  s.noise_sigma = 0;
  s.ghost_prob = 0;
  s.blur_azimuth_cells = 0;
  s.seed = 11;
  return s;
}

bool same_bits(const Tensor<double>& a, const Tensor<double>& b) {
  return a.shape() == b.shape() && std::memcmp(a.vec().data(), b.vec().data(), a.numel() * sizeof(double)) == 0;
}

std::size_t count_blobs(const Tensor<double>& img) {
  const std::size_t n = img.dim(1);
  std::vector<int> seen(n * n, 0);
  std::size_t blobs = 0;
  for (std::size_t s = 0; s < n * n; ++s) {
    if (seen[s] || img.data()[s] <= 0) continue;
    ++blobs;
    std::queue<std::size_t> q;
    q.push(s);
    seen[s] = 1;
    while (!q.empty()) {
      const std::size_t p = q.front();
      q.pop();
      const long y = static_cast<long>(p / n), x = static_cast<long>(p % n);
      for (auto [dy, dx] : {std::pair{-1, 0}, {1, 0}, {0, -1}, {0, 1}}) {
        const long yy = y + dy, xx = x + dx;
        if (yy < 0 || xx < 0 || yy >= static_cast<long>(n) || xx >= static_cast<long>(n)) continue;
        const std::size_t k = static_cast<std::size_t>(yy) * n + static_cast<std::size_t>(xx);
        if (!seen[k] && img.data()[k] > 0) {
          seen[k] = 1;
          q.push(k);
        }
      }
    }
  }
  return blobs;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TEST_CASE("same seed gives bitwise-identical sequences") {
  SequenceSpec s;
  s.image_size = 64;
  s.seed = 5;
  Sequence a = simulate_sequence(s), b = simulate_sequence(s);
  REQUIRE(a.frames.size() == b.frames.size());
  for (std::size_t f = 0; f < a.frames.size(); ++f) {
    CHECK(same_bits(a.frames[f].image, b.frames[f].image));
    REQUIRE(a.frames[f].boxes.size() == b.frames[f].boxes.size());
    for (std::size_t k = 0; k < a.frames[f].boxes.size(); ++k)
      CHECK(std::memcmp(&a.frames[f].boxes[k], &b.frames[f].boxes[k], sizeof(AnnotatedBox)) == 0);
  }
  s.seed = 6;
  CHECK_FALSE(same_bits(simulate_sequence(s).frames[0].image, a.frames[0].image));
}

TEST_CASE("static world and static ego keep annotations fixed") {
  SequenceSpec s = quiet_spec();
  s.ego_motion = EgoMotion::Static;
  s.max_speed = 0;
  s.num_frames = 2;
  Sequence seq = simulate_sequence(s);
  for (const auto& tr : seq.tracks) {
    CHECK(tr.world[0].x == tr.world[1].x);
    CHECK(tr.world[0].y == tr.world[1].y);
    CHECK(std::abs(tr.pixel[0].x - tr.pixel[1].x) < 1e-9);
  }
}

TEST_CASE("linear ego motion shifts static objects against the motion") {
  SequenceSpec s = quiet_spec();
  s.ego_motion = EgoMotion::Linear;
  s.ego_speed = 2.0;
  s.max_speed = 0;
  s.num_frames = 4;
  Sequence seq = simulate_sequence(s);
  for (const auto& tr : seq.tracks)
    for (std::size_t f = 1; f < 4; ++f) {
      CHECK(tr.pixel[f].x - tr.pixel[f - 1].x == doctest::Approx(-2.0).epsilon(1e-12));
      CHECK(std::abs(tr.pixel[f].y - tr.pixel[f - 1].y) < 1e-9);
    }
}

TEST_CASE("per-frame displacement is bounded by max_speed") {
  SequenceSpec s = quiet_spec();
  s.ego_motion = EgoMotion::Static;
  s.max_speed = 1.5;
  s.num_frames = 5;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    s.seed = seed;
    for (const auto& tr : simulate_sequence(s).tracks)
      for (std::size_t f = 1; f < 5; ++f)
        CHECK(std::hypot(tr.pixel[f].x - tr.pixel[f - 1].x, tr.pixel[f].y - tr.pixel[f - 1].y) <= 1.5 + 1e-9);
  }
}

TEST_CASE("annotations agree with world trajectories under turning ego motion") {
  SequenceSpec s = quiet_spec();
  s.ego_motion = EgoMotion::Turning;
  s.ego_turn_rate = 0.05;
  s.num_frames = 4;
  Sequence seq = simulate_sequence(s);
  const double c = (64.0 - 1.0) / 2.0;
  for (std::size_t f = 0; f < 4; ++f) {
    const Pose2& ego = seq.frames[f].ego_pose_world;
    for (const auto& b : seq.frames[f].boxes) {
      const auto& tr = seq.tracks[static_cast<std::size_t>(b.id)];
      // pixel -> world with the frame's ego pose
      const auto r = rotation_matrix(ego.theta);
      const double dx = (b.cx - c) * s.cell_size_m, dy = (b.cy - c) * s.cell_size_m;
      CHECK(std::abs(r[0] * dx + r[1] * dy + ego.tx - tr.world[f].x) < 1e-9);
      CHECK(std::abs(r[2] * dx + r[3] * dy + ego.ty - tr.world[f].y) < 1e-9);
      CHECK(std::abs(std::sin(2 * (b.theta - (tr.heading[f] - ego.theta)))) < 1e-9);
    }
  }
}

TEST_CASE("render: noiseless single box is nonzero exactly on its support") {
  SequenceSpec s = quiet_spec();
  AnnotatedBox b{0, 30.3, 25.7, 14, 6, 0.4};
  Tensor<double> img = render_frame({{b, 1.0}}, s, 0);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      const bool inside = box_contains(b, static_cast<double>(x), static_cast<double>(y));
      CHECK((img.at({0, y, x}) > 0) == inside);
      if (inside) CHECK(img.at({0, y, x}) == 1.0);
    }
}

TEST_CASE("render: blurred support is the union of rotated copies") {
  SequenceSpec s = quiet_spec();
  s.blur_azimuth_cells = 5;
  AnnotatedBox b{0, 45, 31.5, 8, 4, 0.0};
  Tensor<double> img = render_frame({{b, 1.0}}, s, 0);
  const double c = 31.5;
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      const double dx = static_cast<double>(x) - c, dy = static_cast<double>(y) - c;
      const double r = std::max(1.0, std::hypot(dx, dy));
      bool hit = false;
      for (int t = -2; t <= 2; ++t) {
        const double a = t / r;
        const long sx = std::lround(std::cos(a) * dx - std::sin(a) * dy + c);
        const long sy = std::lround(std::sin(a) * dx + std::cos(a) * dy + c);
        hit = hit || (sx >= 0 && sy >= 0 && sx < 64 && sy < 64 &&
                      box_contains(b, static_cast<double>(sx), static_cast<double>(sy)));
      }
      CHECK((img.at({0, y, x}) > 0) == hit);
    }
}

TEST_CASE("render: ghost probability one adds exactly one blob per object") {
  SequenceSpec s = quiet_spec();
  s.ghost_prob = 1.0;
  s.ghost_offset_range = 20;
  std::vector<RenderObject> objs = {{{0, 40, 32, 6, 4, 0.0}, 0.8}, {{1, 20, 20, 6, 4, 0.0}, 0.9}};
  Tensor<double> img = render_frame(objs, s, 3);
  CHECK(count_blobs(img) == 4);
  double ghost_max = 0;
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x)
      if (img.at({0, y, x}) > 0 && img.at({0, y, x}) < 0.8) ghost_max = std::max(ghost_max, img.at({0, y, x}));
  CHECK(ghost_max == doctest::Approx(0.45));
}

TEST_CASE("render: empty scene noise matches the clipped Gaussian mean") {
  SequenceSpec s = quiet_spec();
  s.image_size = 128;
  s.noise_sigma = 0.05;
  Tensor<double> img = render_frame({}, s, 0);
  double mean = 0;
  for (double v : img.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    mean += v;
  }
  mean /= static_cast<double>(img.numel());
  // E[max(0, X)] for X ~ N(0, sigma) is sigma / sqrt(2 pi).
  const double expected = 0.05 / std::sqrt(2 * std::numbers::pi);
  CHECK(std::abs(mean - expected) < 0.1 * expected);
  // Row means carry no structure beyond sampling noise.
  for (std::size_t y = 0; y < 128; y += 16) {
    double rm = 0;
    for (std::size_t x = 0; x < 128; ++x) rm += img.at({0, y, x});
    CHECK(std::abs(rm / 128 - expected) < 0.5 * expected);
  }
}

TEST_CASE("pixel values always lie in [0, 1]") {
  SequenceSpec s;
  s.image_size = 64;
  s.noise_sigma = 0.4;
  s.ghost_prob = 0.5;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    s.seed = seed;
    for (const auto& f : simulate_sequence(s).frames)
      for (double v : f.image.data()) CHECK((v >= 0.0 && v <= 1.0));
  }
}

TEST_CASE("overcrowded scenes are rejected") {
  SequenceSpec s = quiet_spec();
  s.image_size = 32;
  s.n_objects = 40;
  CHECK_THROWS_AS(simulate_sequence(s), std::runtime_error);
}

TEST_CASE("invalid specs are rejected") {
  SequenceSpec s;
  s.num_frames = 1;
  CHECK_THROWS_AS(simulate_sequence(s), std::invalid_argument);
  s = SequenceSpec{};
  s.ghost_prob = 1.5;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  CHECK_THROWS(parse_ego_motion("hover"));
  CHECK(parse_ego_motion(to_string(EgoMotion::Turning)) == EgoMotion::Turning);
}

TEST_CASE("wrap_half_pi range") {
  const double pi = std::numbers::pi;
  CHECK(wrap_half_pi(pi / 2) == doctest::Approx(pi / 2));
  CHECK(wrap_half_pi(-pi / 2) == doctest::Approx(pi / 2));
  CHECK(wrap_half_pi(pi) == doctest::Approx(0.0));
  for (double t = -10; t < 10; t += 0.37) {
    const double w = wrap_half_pi(t);
    CHECK(w > -pi / 2);
    CHECK(w <= pi / 2);
    CHECK(std::abs(std::sin(2 * (w - t))) < 1e-12);
  }
}

TEST_CASE("dataset layout, determinism and round-trip") {
  TempDir a("rafd_ds_a"), b("rafd_ds_b");
  SequenceSpec s;
  s.image_size = 32;
  s.n_objects = 2;
  s.length_max = 10;
  s.width_max = 6;
  s.num_frames = 4;
  s.seed = 9;
  write_dataset(a.path, s, 4, 1, 1);
  write_dataset(b.path, s, 4, 1, 1);
  std::size_t pgm = 0, js = 0;
  for (const auto& e : fs::recursive_directory_iterator(a.path)) {
    if (!e.is_regular_file()) continue;
    pgm += e.path().extension() == ".pgm";
    js += e.path().extension() == ".json";
    CHECK(slurp(e.path()) == slurp(b.path / fs::relative(e.path(), a.path)));
  }
  CHECK(pgm == 8);
  CHECK(js == 9);

  DatasetMeta meta = load_meta(a.path);
  CHECK(meta.image_size == 32);
  CHECK(meta.train == std::vector<std::size_t>{0});
  CHECK(meta.val == std::vector<std::size_t>{1});

  SequenceSpec s1 = s;
  s1.seed = 10;  // sequence 1 uses seed + 1
  Sequence ref = simulate_sequence(s1);
  RadarFrame f = load_frame(a.path, 1, 2);
  CHECK(f.frame_index == 2);
  REQUIRE(f.boxes.size() == ref.frames[2].boxes.size());
  for (std::size_t k = 0; k < f.boxes.size(); ++k) CHECK(f.boxes[k].cx == ref.frames[2].boxes[k].cx);
  for (std::size_t i = 0; i < f.image.numel(); ++i)
    CHECK(std::abs(f.image.data()[i] - ref.frames[2].image.data()[i]) <= 0.5 / 65535 + 1e-15);

  const std::string raw = slurp(frame_stem(a.path, 0, 0).string() + ".pgm");
  CHECK(raw.rfind("P5\n32 32\n65535\n", 0) == 0);
  CHECK(raw.size() == 15 + 2 * 32 * 32);
}

TEST_CASE("corrupt metadata reports the file path") {
  TempDir d("rafd_ds_bad");
  std::ofstream(d.path / "meta.json") << "{ not json";
  try {
    load_meta(d.path);
    FAIL("expected failure");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find((d.path / "meta.json").string()) != std::string::npos);
  }
}
