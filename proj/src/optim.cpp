// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include "smn/optim.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "smn/tensor.hpp"

namespace smn {

template <class Real>
std::span<Real> OptimizerState<Real>::buffer(std::size_t slot, std::size_t n) {
  if (slot >= buffers_.size()) buffers_.resize(slot + 1);
  auto& b = buffers_[slot];
  if (b.empty()) b.assign(n, Real(0));
  if (b.size() != n) throw DimensionError("optimizer buffer shape changed for slot " + std::to_string(slot));
  return b;
}

template <class Real>
void sgd_step(std::span<Real> params, std::span<const Real> grads, std::span<Real> velocity,
              const SgdParams& hp, std::span<const std::uint8_t> trainable) {
  if (params.size() != grads.size() || params.size() != velocity.size() ||
      (!trainable.empty() && trainable.size() != params.size())) {
    throw DimensionError("sgd_step: parameter, gradient and buffer sizes differ");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      std::ostringstream msg;
      msg << "sgd_step: non-finite gradient " << grads[i] << " at index " << i << " of "
          << grads.size() << " (param " << params[i] << ")";
      throw NumericError(msg.str());
    }
  }
  const Real lr = static_cast<Real>(hp.lr);
  const Real mom = static_cast<Real>(hp.momentum);
  const Real wd = static_cast<Real>(hp.weight_decay);
  const bool decay = hp.weight_decay != 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!trainable.empty() && !trainable[i]) continue;
    const Real g = decay ? grads[i] + wd * params[i] : grads[i];
    velocity[i] = mom * velocity[i] + g;
    params[i] -= lr * velocity[i];
  }
}

double cosine_warmup_lr(std::size_t step, std::size_t total_steps, double base_lr,
                        double warmup_fraction) {
  if (total_steps == 0) throw std::invalid_argument("cosine_warmup_lr: total_steps is 0");
  if (step > total_steps) throw std::invalid_argument("cosine_warmup_lr: step past the end");
  const double warmup = warmup_fraction * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s < warmup) return base_lr * s / warmup;
  const double span = static_cast<double>(total_steps) - warmup;
  if (span <= 0.0) return base_lr;
  const double progress = (s - warmup) / span;
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

template class OptimizerState<float>;
template class OptimizerState<double>;
template void sgd_step<float>(std::span<float>, std::span<const float>, std::span<float>,
                              const SgdParams&, std::span<const std::uint8_t>);
template void sgd_step<double>(std::span<double>, std::span<const double>, std::span<double>,
                               const SgdParams&, std::span<const std::uint8_t>);

}  // namespace smn
