#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "robustkd/network.hpp"
#include "robustkd/tensor.hpp"

namespace rkd_test {

using robustkd::Network;
using robustkd::Rng;
using robustkd::Shape;
using robustkd::Tensor;

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

inline std::vector<std::size_t> random_labels(std::size_t n, std::size_t classes, Rng& rng) {
  std::uniform_int_distribution<std::size_t> u(0, classes - 1);
  std::vector<std::size_t> out(n);
  for (auto& l : out) l = u(rng);
  return out;
}

/// Central differences of f with respect to every element of x (x restored).
inline Tensor numeric_gradient(const std::function<double()>& f, Tensor& x, double h = 1e-5) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = f();
    x[i] = orig - h;
    const double down = f();
    x[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// ||a - n|| / max(||a||, ||n||); zero when both vanish.
inline double relative_error(const Tensor& analytic, const Tensor& numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::sqrt(std::max(na, nn));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

/// Small MLP with taps h1, h2 and random (non-Glorot) biases so ReLU kinks are
/// rarely hit exactly.
inline Network small_mlp(const Shape& in, std::size_t h1, std::size_t h2, std::size_t classes, std::uint64_t seed) {
  Network net = robustkd::make_mlp(in, h1, h2, classes, seed);
  Rng rng(seed ^ 0xb1a5);
  for (Tensor* p : net.parameters())
    if (p->rank() == 1) *p = random_tensor(p->shape(), rng, -0.5, 0.5);
  return net;
}

}  // namespace rkd_test
