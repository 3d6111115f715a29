// Central finite-difference oracle for reverse-mode gradients.

#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "fqa/tensor.hpp"

namespace fqa::testing {

struct GradCheck {
  double worst = 0.0;  // max |analytic - numeric| / max(1, |numeric|)
  std::string where;
};

/// Compares tape gradients of `loss()` against central differences with step
/// `h` for every element of every leaf in `leaves`.
inline GradCheck check_gradients(std::vector<Tensor> leaves, const std::function<Tensor()>& loss, double h = 1e-6) {
  for (auto& l : leaves) l.zero_grad();
  {
    Tape tape;
    tape.backward(loss());
  }
  GradCheck out;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    const auto analytic = leaves[k].grad();
    auto data = leaves[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double x0 = data[i];
      data[i] = x0 + h;
      const double up = loss().item();
      data[i] = x0 - h;
      const double down = loss().item();
      data[i] = x0;
      const double numeric = (up - down) / (2 * h);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      if (err > out.worst) {
        out.worst = err;
        out.where = "leaf " + std::to_string(k) + " element " + std::to_string(i);
      }
    }
  }
  return out;
}

inline Tensor random_parameter(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

/// Weighted sum with fixed random weights, so every output element gets a
/// distinct upstream gradient.
inline Tensor probe_sum(const Tensor& x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> w(x.numel());
  for (auto& v : w) v = u(rng);
  return sum(mul(x, Tensor::constant(x.shape(), std::move(w))));
}

}  // namespace fqa::testing
