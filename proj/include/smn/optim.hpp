// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace smn {

struct SgdParams {
  double lr = 0.1;
  double momentum = 0.0;
  double weight_decay = 0.0;
};

/// Momentum buffers, lazily created zero-filled per parameter slot.
template <class Real>
class OptimizerState {
 public:
  std::span<Real> buffer(std::size_t slot, std::size_t n);
  std::uint64_t step() const { return step_; }
  void advance() { ++step_; }
  std::size_t slot_count() const { return buffers_.size(); }
  const std::vector<Real>& slot(std::size_t i) const { return buffers_.at(i); }

 private:
  std::vector<std::vector<Real>> buffers_;
  std::uint64_t step_ = 0;
};

/// v <- momentum * v + (g + wd * p);  p <- p - lr * v.
/// Entries with trainable[i] == 0 are skipped entirely (p and v untouched).
/// Throws NumericError naming the first non-finite gradient entry.
template <class Real>
void sgd_step(std::span<Real> params, std::span<const Real> grads, std::span<Real> velocity,
              const SgdParams& hp, std::span<const std::uint8_t> trainable = {});

/// Linear ramp from 0 to base_lr over warmup_fraction * total_steps, then a
/// half cosine down to 0 at total_steps. Throws std::invalid_argument when
/// total_steps == 0 or step > total_steps.
double cosine_warmup_lr(std::size_t step, std::size_t total_steps, double base_lr,
                        double warmup_fraction);

}  // namespace smn
