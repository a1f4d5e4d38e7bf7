#pragma once

// Test-only oracle: central finite differences. Each layer's analytic
// backward is compared against (f(x+h) - f(x-h)) / 2h coordinate by
// coordinate; the loss is a fixed random weighting of the forward output so
// a single scalar probes every output element.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rsaforge/random.hpp"
#include "rsaforge/tensor.hpp"

namespace gradcheck {

struct Result {
  std::size_t checked = 0;
  std::size_t failed = 0;
  double worst_abs_err = 0.0;
  std::string first_failure;
};

inline constexpr double kStep = 1e-3;
inline constexpr double kRelTol = 1e-2;
inline constexpr double kAbsFloor = 1e-4;

// f() evaluates the scalar loss with the current contents of `x`.
// skip[i] == true exempts kink-adjacent coordinates (relu, maxpool ties).
inline Result check(rsaforge::Tensor& x, const rsaforge::Tensor& analytic,
                    const std::function<double()>& f,
                    const std::vector<bool>* skip = nullptr, double h = kStep,
                    double rtol = kRelTol, double afloor = kAbsFloor) {
  Result res;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (skip && (*skip)[i]) continue;
    const float saved = x[i];
    x[i] = saved + static_cast<float>(h);
    const double f_plus = f();
    x[i] = saved - static_cast<float>(h);
    const double f_minus = f();
    x[i] = saved;
    const double fd = (f_plus - f_minus) / (2.0 * h);
    const double g = analytic[i];
    const double err = std::abs(fd - g);
    const double tol = std::max(afloor, rtol * std::max(std::abs(fd), std::abs(g)));
    ++res.checked;
    res.worst_abs_err = std::max(res.worst_abs_err, err);
    if (err > tol) {
      ++res.failed;
      if (res.first_failure.empty())
        res.first_failure = "coord " + std::to_string(i) + ": fd=" + std::to_string(fd) +
                            " analytic=" + std::to_string(g);
    }
  }
  return res;
}

// Loss = sum of upstream .* output, accumulated in double.
inline double weighted_sum(const rsaforge::Tensor& out, const rsaforge::Tensor& upstream) {
  double acc = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i)
    acc += static_cast<double>(out[i]) * static_cast<double>(upstream[i]);
  return acc;
}

inline rsaforge::Tensor random_tensor(rsaforge::SplitMix64& rng, std::vector<std::size_t> shape,
                                      float lo = -1.0f, float hi = 1.0f) {
  rsaforge::Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform_f(lo, hi);
  return t;
}

} // namespace gradcheck
