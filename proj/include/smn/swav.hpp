// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Swapped-prediction clustering objective with Sinkhorn-Knopp codes, and the
// label-free mask training loop built on it.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <ostream>
#include <vector>

#include "smn/config.hpp"
#include "smn/model.hpp"
#include "smn/optim.hpp"
#include "smn/rng.hpp"
#include "smn/training.hpp"

namespace smn {

template <class Real>
struct ViewPair {
  Tensor<Real> t;
  Tensor<Real> s;
};

/// One stochastic draw of the augmentation pipeline for every row of x.
template <class Real>
Tensor<Real> augment(const Tensor<Real>& x, const AugConfig& aug, Rng& rng);

/// Two independent augmentation draws of x, both from the same rng stream.
template <class Real>
ViewPair<Real> make_views(const Tensor<Real>& x, const AugConfig& aug, Rng& rng);

/// Views of rows `idx` of `data`, each sample on its own stream derived from
/// (seed, epoch, sample index) so results do not depend on batch composition.
template <class Real>
ViewPair<Real> make_views_for(const Tensor<Real>& data, std::span<const std::size_t> idx,
                              const AugConfig& aug, std::uint64_t seed, std::size_t epoch);

/// K prototypes of dimension d, stored one per row, each of unit L2 norm.
template <class Real>
struct PrototypeBank {
  Tensor<Real> vectors;  // K x d

  static PrototypeBank random(std::size_t k, std::size_t dim, std::uint64_t seed);
  std::size_t count() const { return vectors.rows(); }
  std::size_t dim() const { return vectors.cols(); }
  void normalize();
};

/// Entropy-regularized equipartition of B samples over K prototypes.
/// scores is K x B. Q = exp((scores - max) / eps), normalized to total mass 1,
/// then `iters` rounds of (rows to 1/K, columns to 1/B). Columns end at 1/B.
Matrix sinkhorn_assign(const Matrix& scores, double eps, std::size_t iters);

template <class Real>
struct SwavLoss {
  double loss = 0.0;
  std::vector<double> per_sample;  // averaged over both prediction directions
  Tensor<Real> grad_z_t;
  Tensor<Real> grad_z_s;
  Tensor<Real> grad_prototypes;  // K x d
  Matrix targets_t;              // B x K, rows sum to 1
  Matrix targets_s;
};

/// Symmetrized swapped prediction: view t predicts the code of view s and
/// vice versa. z_t, z_s must be L2-normalized rows. Codes carry no gradient.
template <class Real>
SwavLoss<Real> swav_loss(const Tensor<Real>& z_t, const Tensor<Real>& z_s, const PrototypeBank<Real>& bank,
                         double tau, double eps, std::size_t sinkhorn_iters);

/// Same loss with caller-provided codes (B x K, rows summing to 1).
template <class Real>
SwavLoss<Real> swav_loss_with_targets(const Tensor<Real>& z_t, const Tensor<Real>& z_s,
                                      const PrototypeBank<Real>& bank, double tau,
                                      const Matrix& targets_t, const Matrix& targets_s);

/// Row-wise L2 normalization and its backward pass.
template <class Real>
Tensor<Real> l2_normalize_rows(const Tensor<Real>& h, std::vector<Real>* norms = nullptr);

template <class Real>
Tensor<Real> l2_normalize_backward(const Tensor<Real>& z, std::span<const Real> norms,
                                   const Tensor<Real>& grad_z);

template <class Real>
struct SmnResult {
  std::vector<EpochSummary> log;
  PrototypeBank<Real> prototypes;
  bool diverged = false;
};

/// Label-free mask learning over a frozen backbone. The model's head is used
/// as the trainable projection (created if missing). Labels never enter.
template <class Real>
class SmnTrainer {
 public:
  SmnTrainer(SmallModel<Real>& model, Tensor<Real> data, TrainConfig config,
             AdaptMode mode = AdaptMode::mask);

  std::size_t steps_per_epoch() const { return steps_per_epoch_; }
  std::size_t total_steps() const { return steps_per_epoch_ * config_.epochs; }
  bool done() const { return global_step_ >= total_steps() || diverged_; }

  StepResult step();
  SmnResult<Real> run();

  const std::vector<EpochSummary>& epochs() const { return epochs_; }
  const PrototypeBank<Real>& prototypes() const { return bank_; }
  bool diverged() const { return diverged_; }

 private:
  struct Snapshot {
    std::vector<std::vector<Real>> scores;
    DenseLayer<Real> head;
    PrototypeBank<Real> bank;
  };

  void begin_epoch();
  Snapshot snapshot() const;
  void restore(const Snapshot& s);
  Matrix codes_with_queue(const Tensor<Real>& z) const;

  SmallModel<Real>& model_;
  Tensor<Real> data_;
  TrainConfig config_;
  AdaptMode mode_;
  PrototypeBank<Real> bank_;
  OptimizerState<Real> opt_;
  std::vector<Real> proto_velocity_;
  std::deque<std::vector<Real>> queue_;
  std::vector<std::size_t> order_;
  std::size_t steps_per_epoch_ = 0;
  std::size_t global_step_ = 0;
  std::size_t epoch_ = 0;
  std::size_t batch_in_epoch_ = 0;
  double epoch_loss_sum_ = 0.0;
  std::size_t epoch_rows_ = 0;
  bool diverged_ = false;
  Snapshot last_good_;
  std::vector<EpochSummary> epochs_;
};

template <class Real>
SmnResult<Real> train_smn(SmallModel<Real>& model, const Tensor<Real>& data, const TrainConfig& config);

/// One JSON object per line: {"epoch", "loss", "lr", "active_fraction"}.
void write_training_log(std::ostream& os, const std::vector<EpochSummary>& log);

}  // namespace smn
