// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "smn/tensor.hpp"

namespace smn {

/// One byte per weight, each 0 or 1. Bit packing happens only in mask_io.
struct BinaryMask {
  std::vector<std::size_t> shape;
  std::vector<std::uint8_t> bits;

  std::size_t size() const { return bits.size(); }
  std::size_t active_count() const;
  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

/// Number of positions where the two masks agree (shapes must match).
std::size_t mask_agreement(const BinaryMask& a, const BinaryMask& b);

/// true = score trainable.
using FreezeMask = std::vector<std::uint8_t>;

enum class MaskRule { threshold, topk };

/// Per-layer learnable mask parameters: one score per weight.
template <class Real>
struct MaskState {
  std::vector<Real> scores;
  Real threshold = Real(0);
  FreezeMask trainable;
  MaskRule rule = MaskRule::threshold;
  double active_fraction = 1.0;  // topk only

  /// Scores at s0, everything trainable.
  static MaskState initialized(std::size_t n, Real score_init, Real threshold);
};

/// Degenerate means no weight is active; alpha is then reported as 1.
struct AlphaInfo {
  double alpha = 1.0;
  std::size_t active = 0;
  std::size_t total = 0;
  bool degenerate = false;
};

/// Bit i set iff scores[i] > mu (strict).
template <class Real>
BinaryMask threshold_mask(std::span<const Real> scores, Real mu,
                          std::vector<std::size_t> shape = {});

AlphaInfo layer_alpha(const BinaryMask& mask);

/// Exactly ceil(fraction * N) bits set, highest scores first; equal scores
/// resolve to the lower flat index. Throws std::invalid_argument if
/// fraction <= 0 or > 1.
template <class Real>
BinaryMask topk_mask(std::span<const Real> scores, double fraction,
                     std::vector<std::size_t> shape = {});

/// Number of active weights topk_mask keeps for a layer of n weights.
std::size_t topk_count(std::size_t n, double fraction);

/// Linear schedule of the active fraction from 1 at step 0 to target at total.
double progressive_fraction(std::size_t step, std::size_t total_steps, double target_fraction);

template <class Real>
BinaryMask current_mask(const MaskState<Real>& state, const std::vector<std::size_t>& shape);

/// Effective weights theta / alpha * M, plus the mask and alpha that produced them.
template <class Real>
struct EffectiveWeights {
  Tensor<Real> weights;
  BinaryMask mask;
  AlphaInfo alpha;
};

template <class Real>
EffectiveWeights<Real> effective_weights(const Tensor<Real>& weights, const MaskState<Real>& state);

/// y = x W_eff^T + b for a masked layer; the returned effective weights are
/// what straight_through_backward needs.
template <class Real>
Tensor<Real> masked_forward(const Tensor<Real>& weights, std::span<const Real> bias,
                            const EffectiveWeights<Real>& effective, const Tensor<Real>& input);

/// Pass-through gradients. Given dL/dW_eff, returns dL/dS = dL/dM with
/// dL/dM_i = dL/dW_eff_i * theta_i / alpha. Alpha is a constant here, and
/// inactive weights receive gradients too. Input gradients, when wanted, are
/// dY W_eff and are the caller's business (see backward in model.hpp).
template <class Real>
std::vector<Real> straight_through_backward(const Tensor<Real>& weights,
                                            const EffectiveWeights<Real>& effective,
                                            const Tensor<Real>& effective_weight_grads);

}  // namespace smn
