#include "rafd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace rafd {

std::string GradCheckReport::describe() const {
  std::ostringstream os;
  os.precision(6);
  if (!finite) return failure;
  os << "max rel err " << max_rel_error << " at input " << worst_input << " entry " << worst_index << " (analytic "
     << worst_analytic << ", numeric " << worst_numeric << ", " << entries_checked << " entries)";
  return os.str();
}

GradCheckReport grad_check(const ScalarClosure& fn, std::vector<Tensor<double>> inputs,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  {
    Tensor<double> out = fn(inputs);
    if (out.numel() != 1) throw ShapeError("grad_check: closure must return a scalar, got " + shape_str(out.shape()));
    out.backward();
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& in : inputs) {
    analytic.emplace_back(in.has_grad() ? std::vector<double>(in.grad().begin(), in.grad().end())
                                        : std::vector<double>(in.numel(), 0.0));
    in.zero_grad();
  }

  NoGradGuard no_grad;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& in = inputs[t];
    auto values = in.data_mut();
    const std::size_t n = values.size();
    std::size_t stride = 1;
    if (options.max_entries_per_input > 0 && n > options.max_entries_per_input) {
      stride = (n + options.max_entries_per_input - 1) / options.max_entries_per_input;
    }
    for (std::size_t i = 0; i < n; i += stride) {
      const double a = analytic[t][i];
      if (!std::isfinite(a)) {
        report.finite = false;
        report.failure = "non-finite analytic gradient at input " + std::to_string(t) + " entry " + std::to_string(i);
        return report;
      }
      const double orig = values[i];
      values[i] = orig + options.step;
      const double fp = fn(inputs).item();
      values[i] = orig - options.step;
      const double fm = fn(inputs).item();
      values[i] = orig;
      const double num = (fp - fm) / (2.0 * options.step);
      if (!std::isfinite(num)) {
        report.finite = false;
        report.failure = "non-finite numeric gradient at input " + std::to_string(t) + " entry " + std::to_string(i);
        return report;
      }
      const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), options.floor});
      ++report.entries_checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_input = t;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = num;
      }
    }
  }
  return report;
}

}  // namespace rafd
