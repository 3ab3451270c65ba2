// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include "smn/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "smn/kernels.hpp"
#include "smn/linalg.hpp"

namespace smn {

std::size_t BinaryMask::active_count() const {
  std::size_t n = 0;
  for (auto b : bits) n += b;
  return n;
}

std::size_t mask_agreement(const BinaryMask& a, const BinaryMask& b) {
  if (a.bits.size() != b.bits.size()) throw DimensionError("mask_agreement: size mismatch");
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) same += (a.bits[i] == b.bits[i]);
  return same;
}

template <class Real>
MaskState<Real> MaskState<Real>::initialized(std::size_t n, Real score_init, Real threshold) {
  MaskState s;
  s.scores.assign(n, score_init);
  s.threshold = threshold;
  s.trainable.assign(n, 1);
  return s;
}

template <class Real>
BinaryMask threshold_mask(std::span<const Real> scores, Real mu, std::vector<std::size_t> shape) {
  BinaryMask m;
  m.shape = shape.empty() ? std::vector<std::size_t>{scores.size()} : std::move(shape);
  m.bits.resize(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) m.bits[i] = scores[i] > mu ? 1 : 0;
  return m;
}

AlphaInfo layer_alpha(const BinaryMask& mask) {
  if (mask.bits.empty()) throw std::invalid_argument("layer_alpha: empty mask");
  AlphaInfo info;
  info.total = mask.bits.size();
  info.active = mask.active_count();
  info.degenerate = info.active == 0;
  info.alpha = info.degenerate
                   ? 1.0
                   : std::sqrt(static_cast<double>(info.active) / static_cast<double>(info.total));
  return info;
}

std::size_t topk_count(std::size_t n, double fraction) {
  if (!(fraction > 0.0) || fraction > 1.0) {
    throw std::invalid_argument("topk fraction must be in (0, 1]");
  }
  // Products like 0.1 * 30 land a hair above the integer; forgive that.
  const long double exact = static_cast<long double>(fraction) * static_cast<long double>(n);
  auto k = static_cast<std::size_t>(std::ceil(exact - 1e-9L * std::max<long double>(1.0L, exact)));
  return std::clamp<std::size_t>(k, 1, n);
}

template <class Real>
BinaryMask topk_mask(std::span<const Real> scores, double fraction, std::vector<std::size_t> shape) {
  const std::size_t n = scores.size();
  const std::size_t k = topk_count(n, fraction);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto by_score = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  if (k < n) std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), by_score);
  BinaryMask m;
  m.shape = shape.empty() ? std::vector<std::size_t>{n} : std::move(shape);
  m.bits.assign(n, 0);
  for (std::size_t i = 0; i < k; ++i) m.bits[order[i]] = 1;
  return m;
}

double progressive_fraction(std::size_t step, std::size_t total_steps, double target_fraction) {
  if (step >= total_steps) return target_fraction;
  const double t = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
  return 1.0 + (target_fraction - 1.0) * t;
}

template <class Real>
BinaryMask current_mask(const MaskState<Real>& state, const std::vector<std::size_t>& shape) {
  if (state.rule == MaskRule::topk) {
    return topk_mask<Real>(state.scores, state.active_fraction, shape);
  }
  return threshold_mask<Real>(state.scores, state.threshold, shape);
}

template <class Real>
EffectiveWeights<Real> effective_weights(const Tensor<Real>& weights, const MaskState<Real>& state) {
  if (state.scores.size() != weights.size()) {
    throw DimensionError("mask scores do not match weight shape");
  }
  EffectiveWeights<Real> eff;
  eff.mask = current_mask(state, weights.shape());
  eff.alpha = layer_alpha(eff.mask);
  eff.weights = Tensor<Real>(weights.shape());
  const Real inv_alpha = static_cast<Real>(1.0 / eff.alpha.alpha);
  kernels::masked_scale<Real>(weights.span(), eff.mask.bits, inv_alpha, eff.weights.span());
  return eff;
}

template <class Real>
Tensor<Real> masked_forward(const Tensor<Real>& weights, std::span<const Real> bias,
                            const EffectiveWeights<Real>& effective, const Tensor<Real>& input) {
  if (effective.weights.shape() != weights.shape()) {
    throw DimensionError("effective weights do not match layer");
  }
  return linear_forward(effective.weights, bias, input);
}

template <class Real>
std::vector<Real> straight_through_backward(const Tensor<Real>& weights,
                                            const EffectiveWeights<Real>& effective,
                                            const Tensor<Real>& effective_weight_grads) {
  if (effective_weight_grads.size() != weights.size()) {
    throw DimensionError("straight_through_backward: gradient shape mismatch");
  }
  std::vector<Real> score_grads(weights.size());
  const Real inv_alpha = static_cast<Real>(1.0 / effective.alpha.alpha);
  kernels::mul_scale<Real>(effective_weight_grads.span(), weights.span(), inv_alpha, score_grads);
  return score_grads;
}

#define SMN_INSTANTIATE(Real)                                                                   \
  template struct MaskState<Real>;                                                            \
  template BinaryMask threshold_mask<Real>(std::span<const Real>, Real, std::vector<std::size_t>); \
  template BinaryMask topk_mask<Real>(std::span<const Real>, double, std::vector<std::size_t>);  \
  template BinaryMask current_mask<Real>(const MaskState<Real>&, const std::vector<std::size_t>&); \
  template EffectiveWeights<Real> effective_weights<Real>(const Tensor<Real>&, const MaskState<Real>&); \
  template Tensor<Real> masked_forward<Real>(const Tensor<Real>&, std::span<const Real>,         \
                                             const EffectiveWeights<Real>&, const Tensor<Real>&); \
  template std::vector<Real> straight_through_backward<Real>(                                  \
      const Tensor<Real>&, const EffectiveWeights<Real>&, const Tensor<Real>&);

SMN_INSTANTIATE(float)
SMN_INSTANTIATE(double)
#undef SMN_INSTANTIATE

}  // namespace smn
