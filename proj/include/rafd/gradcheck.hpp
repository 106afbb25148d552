#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "rafd/tensor.hpp"

namespace rafd {

struct GradCheckOptions {
  double step = 1e-6;
  /// Denominator floor of the relative error |a - n| / max(|a|, |n|, floor),
  /// so entries with near-zero gradients are judged on absolute error.
  double floor = 1e-3;
  /// 0 checks every entry; otherwise at most this many evenly strided entries
  /// per input tensor.
  std::size_t max_entries_per_input = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
  bool finite = true;
  std::string failure;  // set when a non-finite gradient was found

  bool passed(double tolerance) const { return finite && max_rel_error < tolerance; }
  std::string describe() const;
};

using ScalarClosure = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Compares the reverse-mode gradient of a scalar closure against central
/// finite differences. Inputs are marked as requiring gradients and perturbed
/// in place, so closures may also reach them through captured references
/// (e.g. parameters held by a store).
GradCheckReport grad_check(const ScalarClosure& fn, std::vector<Tensor<double>> inputs,
                           const GradCheckOptions& options = {});

}  // namespace rafd
