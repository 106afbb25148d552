#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rafd/tensor.hpp"

namespace rafd {

struct Init {
  enum class Kind { Zeros, Constant, Normal, Uniform };
  Kind kind = Kind::Zeros;
  double value = 0.0;  // constant value, normal std, or uniform half-width

  static Init zeros() { return {Kind::Zeros, 0.0}; }
  static Init constant(double v) { return {Kind::Constant, v}; }
  static Init normal(double std) { return {Kind::Normal, std}; }
  static Init uniform(double bound) { return {Kind::Uniform, bound}; }
};

/// Named parameters and buffers keyed by dotted path. Initial values depend
/// only on (registration index, shape, seed): each entry draws from its own
/// generator seeded by mixing the store seed with the index.
template <typename T>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}

  /// Registers a trainable tensor. Throws on duplicate names.
  Tensor<T> add(const std::string& name, Shape shape, Init init);
  /// Registers a non-trainable state tensor (e.g. batchnorm running stats).
  Tensor<T> add_buffer(const std::string& name, Shape shape, T value);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<T> get(const std::string& name) const;
  bool trainable(const std::string& name) const;

  /// All names in registration order.
  const std::vector<std::string>& names() const { return names_; }
  std::vector<std::string> trainable_names() const;
  std::vector<Tensor<T>> trainable_tensors() const;

  std::size_t parameter_count() const;
  void zero_grad();
  std::uint64_t seed() const { return seed_; }

 private:
  struct Entry {
    Tensor<T> tensor;
    bool trainable;
  };
  std::uint64_t seed_;
  std::vector<std::string> names_;
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

extern template class ParameterStore<float>;
extern template class ParameterStore<double>;

}  // namespace rafd
