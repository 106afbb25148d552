#pragma once

// Tensor snapshot interchange: little-endian "RFTN" magic, u32 rank,
// u32 dims[rank], f64 payload in row-major order.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "rafd/tensor.hpp"

namespace rafd {

template <typename T>
void write_snapshot(std::ostream& os, const Tensor<T>& t);
/// Size in bytes of the snapshot encoding of a tensor with this shape.
std::size_t snapshot_size(const Shape& shape);
/// Reads one snapshot; values are converted to T. Throws std::runtime_error on
/// truncated input or bad magic.
template <typename T>
Tensor<T> read_snapshot(std::istream& is);

template <typename T>
void save_snapshot(const std::filesystem::path& path, const Tensor<T>& t);
template <typename T>
Tensor<T> load_snapshot(const std::filesystem::path& path);

}  // namespace rafd
