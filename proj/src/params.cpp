#include "rafd/params.hpp"

#include <random>
#include <stdexcept>

#include "rafd/rng.hpp"

namespace rafd {

template <typename T>
Tensor<T> ParameterStore<T>::add(const std::string& name, Shape shape, Init init) {
  if (contains(name)) throw std::invalid_argument("parameter store: duplicate name '" + name + "'");
  const std::size_t idx = entries_.size();
  std::mt19937_64 rng(splitmix64(seed_ ^ splitmix64(idx + 1)));
  std::vector<T> values(numel_of(shape));
  switch (init.kind) {
    case Init::Kind::Zeros:
      break;
    case Init::Kind::Constant:
      for (auto& v : values) v = static_cast<T>(init.value);
      break;
    case Init::Kind::Normal: {
      std::normal_distribution<double> dist(0.0, init.value);
      for (auto& v : values) v = static_cast<T>(dist(rng));
      break;
    }
    case Init::Kind::Uniform: {
      std::uniform_real_distribution<double> dist(-init.value, init.value);
      for (auto& v : values) v = static_cast<T>(dist(rng));
      break;
    }
  }
  Tensor<T> t(std::move(shape), std::move(values));
  t.set_requires_grad(true);
  names_.push_back(name);
  entries_.push_back({t, true});
  index_[name] = idx;
  return t;
}

template <typename T>
Tensor<T> ParameterStore<T>::add_buffer(const std::string& name, Shape shape, T value) {
  if (contains(name)) throw std::invalid_argument("parameter store: duplicate name '" + name + "'");
  Tensor<T> t(std::move(shape), value);
  index_[name] = entries_.size();
  names_.push_back(name);
  entries_.push_back({t, false});
  return t;
}

template <typename T>
Tensor<T> ParameterStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("parameter store: no entry '" + name + "'");
  return entries_[it->second].tensor;
}

template <typename T>
bool ParameterStore<T>::trainable(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("parameter store: no entry '" + name + "'");
  return entries_[it->second].trainable;
}

template <typename T>
std::vector<std::string> ParameterStore<T>::trainable_names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].trainable) out.push_back(names_[i]);
  return out;
}

template <typename T>
std::vector<Tensor<T>> ParameterStore<T>::trainable_tensors() const {
  std::vector<Tensor<T>> out;
  for (const auto& e : entries_)
    if (e.trainable) out.push_back(e.tensor);
  return out;
}

template <typename T>
std::size_t ParameterStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.trainable) n += e.tensor.numel();
  return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

template class ParameterStore<float>;
template class ParameterStore<double>;

}  // namespace rafd
