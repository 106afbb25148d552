#include "rafd/snapshot.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace rafd {

namespace {

constexpr std::array<char, 4> kMagic = {'R', 'F', 'T', 'N'};

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_f64(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

void get_bytes(std::istream& is, unsigned char* dst, std::size_t n) {
  is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw std::runtime_error("snapshot: truncated stream");
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  get_bytes(is, b, 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  get_bytes(is, b, 8);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

std::size_t snapshot_size(const Shape& shape) { return 4 + 4 + 4 * shape.size() + 8 * numel_of(shape); }

template <typename T>
void write_snapshot(std::ostream& os, const Tensor<T>& t) {
  os.write(kMagic.data(), kMagic.size());
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
  for (T v : t.data()) put_f64(os, static_cast<double>(v));
}

template <typename T>
Tensor<T> read_snapshot(std::istream& is) {
  unsigned char magic[4];
  get_bytes(is, magic, 4);
  if (std::memcmp(magic, kMagic.data(), 4) != 0) throw std::runtime_error("snapshot: bad magic");
  const std::uint32_t rank = get_u32(is);
  if (rank > 16) throw std::runtime_error("snapshot: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get_u32(is);
  std::vector<T> values(numel_of(shape));
  for (auto& v : values) v = static_cast<T>(get_f64(is));
  return Tensor<T>(std::move(shape), std::move(values));
}

template <typename T>
void save_snapshot(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("snapshot: cannot open " + path.string() + " for writing");
  write_snapshot(os, t);
  if (!os) throw std::runtime_error("snapshot: write failed for " + path.string());
}

template <typename T>
Tensor<T> load_snapshot(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("snapshot: cannot open " + path.string());
  try {
    return read_snapshot<T>(is);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

template void write_snapshot(std::ostream&, const Tensor<float>&);
template void write_snapshot(std::ostream&, const Tensor<double>&);
template Tensor<float> read_snapshot(std::istream&);
template Tensor<double> read_snapshot(std::istream&);
template void save_snapshot(const std::filesystem::path&, const Tensor<float>&);
template void save_snapshot(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_snapshot(const std::filesystem::path&);
template Tensor<double> load_snapshot(const std::filesystem::path&);

}  // namespace rafd
