#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "smolpipe/tensor.hpp"

namespace gradcheck {

inline double rel_err(double a, double b) {
  double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

struct Result {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
};

// Compares analytic leaf gradients against central finite differences.
// `forward` must rebuild the graph from the leaves on every call and return a
// scalar; the leaves are perturbed in place between calls.
inline Result check(const std::function<smolpipe::Tensor()>& forward,
                    std::vector<smolpipe::Tensor> leaves, double eps = 1e-5) {
  using namespace smolpipe;
  Tensor out = forward();
  backward(out);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (Tensor& leaf : leaves) analytic.push_back(leaf.grad_data());

  Result res;
  NoGradGuard ng;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    std::vector<double>& data = leaves[li].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      double orig = data[i];
      data[i] = orig + eps;
      double up = forward().data()[0];
      data[i] = orig - eps;
      double down = forward().data()[0];
      data[i] = orig;
      double fd = (up - down) / (2.0 * eps);
      res.max_rel_err = std::max(res.max_rel_err, rel_err(analytic[li][i], fd));
      ++res.checked;
    }
  }
  for (Tensor& leaf : leaves) leaf.zero_grad();
  return res;
}

// Deterministic quasi-random fill so repeated runs check identical points.
inline smolpipe::Tensor varied(const smolpipe::Shape& shape, double lo, double hi,
                               std::uint64_t salt = 0, bool requires_grad = true) {
  std::size_t n = smolpipe::shape_numel(shape);
  std::vector<double> data(n);
  std::uint64_t state = 0x9e3779b97f4a7c15ULL + salt;
  for (std::size_t i = 0; i < n; ++i) {
    state ^= state << 13;
    state ^= state >> 7;
    state ^= state << 17;
    double u = static_cast<double>(state % 100003) / 100003.0;
    data[i] = lo + u * (hi - lo);
  }
  return smolpipe::Tensor::from_data(shape, std::move(data), requires_grad);
}

}  // namespace gradcheck
