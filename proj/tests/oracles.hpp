#pragma once

// Test-side oracles, independent of the kernels they check: naive loops,
// direct evaluation, central finite differences.

#include <cmath>
#include <functional>
#include <vector>

#include "lrsa/rng.hpp"
#include "lrsa/tensor.hpp"

namespace oracles {

using lrsa::i64;
using lrsa::Rng;
using lrsa::Shape;
using lrsa::Tensor;

inline Tensor<double> randn(Shape shape, Rng& rng, bool requires_grad = false, double sigma = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape), requires_grad);
  for (i64 i = 0; i < t.numel(); ++i) t.at(i) = rng.normal() * sigma;
  return t;
}

// Scalar triple loop, textbook order.
inline std::vector<double> matmul_loops(const std::vector<double>& a, const std::vector<double>& b,
                                        i64 m, i64 k, i64 n) {
  std::vector<double> c(static_cast<std::size_t>(m * n), 0.0);
  for (i64 i = 0; i < m; ++i)
    for (i64 j = 0; j < n; ++j) {
      double acc = 0.0;
      for (i64 p = 0; p < k; ++p)
        acc += a[static_cast<std::size_t>(i * k + p)] * b[static_cast<std::size_t>(p * n + j)];
      c[static_cast<std::size_t>(i * n + j)] = acc;
    }
  return c;
}

// Direct softmax evaluation (no max-subtraction; safe for small test values).
inline std::vector<double> softmax_direct(const std::vector<double>& x) {
  double sum = 0.0;
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i]);
    sum += y[i];
  }
  for (auto& v : y) v /= sum;
  return y;
}

// sqrt(mean(x^2) - mean(x)^2)
inline double population_std_direct(const std::vector<double>& x) {
  double s = 0.0, s2 = 0.0;
  for (double v : x) {
    s += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(x.size());
  return std::sqrt(std::max(0.0, s2 / n - (s / n) * (s / n)));
}

// Central finite differences of a scalar function of x's entries. Mutates
// and restores x in place.
inline std::vector<double> fd_grad(Tensor<double>& x, const std::function<double()>& f, double h) {
  std::vector<double> g(static_cast<std::size_t>(x.numel()));
  for (i64 i = 0; i < x.numel(); ++i) {
    const double orig = x.at(i);
    x.at(i) = orig + h;
    const double lp = f();
    x.at(i) = orig - h;
    const double lm = f();
    x.at(i) = orig;
    g[static_cast<std::size_t>(i)] = (lp - lm) / (2.0 * h);
  }
  return g;
}

inline double rel_err(double a, double b, double floor_) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor_});
}

// Generic gradient check for a tensor->tensor op: loss = sum(op(x) * w) with
// fixed random weights so errors cannot cancel. Returns max relative error.
inline double op_grad_check(Shape in_shape,
                            const std::function<Tensor<double>(const Tensor<double>&)>& op,
                            std::uint64_t seed, double h = 1e-5, double floor_ = 1e-3) {
  Rng rng(seed);
  Tensor<double> x = randn(in_shape, rng, true);
  Tensor<double> probe;
  {
    lrsa::NoGradGuard ng;
    probe = op(x.detached());
  }
  Tensor<double> w = randn(probe.shape, rng);
  Tensor<double> loss = lrsa::sum(lrsa::mul(op(x), w));
  lrsa::backward(loss);
  auto f = [&]() {
    lrsa::NoGradGuard ng;
    Tensor<double> y = op(x.detached());
    double acc = 0.0;
    for (i64 i = 0; i < y.numel(); ++i) acc += y.at(i) * w.at(i);
    return acc;
  };
  std::vector<double> fd = fd_grad(x, f, h);
  double mx = 0.0;
  for (i64 i = 0; i < x.numel(); ++i)
    mx = std::max(mx, rel_err((*x.grad)[static_cast<std::size_t>(i)],
                              fd[static_cast<std::size_t>(i)], floor_));
  return mx;
}

}  // namespace oracles
