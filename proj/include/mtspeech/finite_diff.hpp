#pragma once

#include <functional>

#include "mtspeech/tensor.hpp"

namespace mtspeech {

// Central-difference gradient estimate of a tensor-to-scalar function,
// (f(x+h) - f(x-h)) / 2h per coordinate. The function must be deterministic;
// stochastic pipelines are checked by passing frozen noise explicitly.
template <typename Real>
Tensor<Real> finite_difference(const std::function<double(const Tensor<Real>&)>& f,
                               const Tensor<Real>& x, double step) {
  Tensor<Real> grad(x.shape());
  Tensor<Real> probe = x;
  for (int64_t i = 0; i < x.size(); ++i) {
    const Real orig = probe[i];
    probe[i] = orig + static_cast<Real>(step);
    const double up = f(probe);
    probe[i] = orig - static_cast<Real>(step);
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = static_cast<Real>((up - down) / (2.0 * step));
  }
  return grad;
}

// Same oracle restricted to a subset of coordinates; untouched entries of
// the result stay zero. Used where a full sweep would be needlessly slow.
template <typename Real>
Tensor<Real> finite_difference_at(const std::function<double(const Tensor<Real>&)>& f,
                                  const Tensor<Real>& x, double step,
                                  const std::vector<int64_t>& coords) {
  Tensor<Real> grad(x.shape());
  Tensor<Real> probe = x;
  for (int64_t i : coords) {
    const Real orig = probe[i];
    probe[i] = orig + static_cast<Real>(step);
    const double up = f(probe);
    probe[i] = orig - static_cast<Real>(step);
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = static_cast<Real>((up - down) / (2.0 * step));
  }
  return grad;
}

}  // namespace mtspeech
