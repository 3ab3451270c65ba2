// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "smn/config.hpp"
#include "smn/masking.hpp"
#include "smn/model.hpp"
#include "smn/optim.hpp"

namespace smn {

enum class AdaptMode { mask, fft };

/// How masks are derived from scores during training.
struct MaskSchedule {
  MaskRule rule = MaskRule::threshold;
  double topk_fraction = 0.5;
  bool progressive = false;  // topk only: fraction goes 1 -> topk_fraction linearly
};

struct StepResult {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct EpochSummary {
  std::size_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double active_fraction = 1.0;
};

/// Mean softmax cross-entropy; returns the loss and fills dL/dlogits.
template <class Real>
double softmax_cross_entropy(const Tensor<Real>& logits, std::span<const int> labels,
                             Tensor<Real>& grad);

/// Learning rate at a global step under the config's schedule.
double scheduled_lr(const TrainConfig& cfg, double base_lr, std::size_t step,
                    std::size_t total_steps, bool with_warmup);

/// Overall active fraction across masked layers (1 when nothing is masked).
template <class Real>
double active_fraction(const SmallModel<Real>& model);

/// Applies one optimizer update to every trainable backbone tensor and the head.
/// Scores honor their FreezeMask.
template <class Real>
void apply_update(SmallModel<Real>& model, const Gradients<Real>& grads, OptimizerState<Real>& state,
                  const SgdParams& backbone, const SgdParams& head);

/// Score update for one labeled batch (pass-through gradients, SGD on the scores).
/// Masks follow from the new scores on the next forward.
template <class Real>
double mask_train_step(SmallModel<Real>& model, const Tensor<Real>& batch, std::span<const int> labels,
                       const TrainConfig& config, OptimizerState<Real>& state, double lr, double head_lr);

/// Supervised training with a linear classifier head, either of scores only
/// (mask) or of all backbone parameters (fft). Steps can be driven one at a
/// time so that two trainers can run in lockstep.
template <class Real>
class SupervisedTrainer {
 public:
  SupervisedTrainer(SmallModel<Real>& model, Tensor<Real> features, std::vector<int> labels,
                    std::size_t num_classes, TrainConfig config, AdaptMode mode,
                    MaskSchedule schedule = {});

  std::size_t steps_per_epoch() const { return steps_per_epoch_; }
  std::size_t total_steps() const { return steps_per_epoch_ * config_.epochs; }
  bool done() const { return global_step_ >= total_steps(); }

  StepResult step();
  void run();

  const std::vector<EpochSummary>& epochs() const { return epochs_; }
  const SmallModel<Real>& model() const { return model_; }

 private:
  void begin_epoch();

  SmallModel<Real>& model_;
  Tensor<Real> features_;
  std::vector<int> labels_;
  TrainConfig config_;
  AdaptMode mode_;
  MaskSchedule schedule_;
  OptimizerState<Real> opt_;
  std::vector<std::size_t> order_;
  std::size_t steps_per_epoch_ = 0;
  std::size_t global_step_ = 0;
  std::size_t epoch_ = 0;
  std::size_t batch_in_epoch_ = 0;
  double epoch_loss_sum_ = 0.0;
  std::size_t epoch_rows_ = 0;
  std::vector<EpochSummary> epochs_;
};

/// Per-layer trainability of mask scores under a freeze policy:
/// random(p) freezes each score with probability p, max_magnitude(f) keeps
/// the ceil(f * N) largest-|weight| scores of every layer trainable,
/// layer_subset keeps whole layers. Throws std::invalid_argument when nothing
/// would train or a layer index is out of range.
template <class Real>
std::vector<FreezeMask> select_trainable(const SmallModel<Real>& model, const FreezeConfig& policy,
                                         std::uint64_t seed);

/// Installs FreezeMasks on the model's mask states (one per layer).
template <class Real>
void apply_freeze(SmallModel<Real>& model, const std::vector<FreezeMask>& masks);

/// Random linear head (classifier or projection).
template <class Real>
DenseLayer<Real> make_head(std::size_t in, std::size_t out, std::uint64_t seed);

template <class Real>
std::vector<int> predict_classes(const SmallModel<Real>& model, const Tensor<Real>& features);

double accuracy(std::span<const int> predicted, std::span<const int> truth);

}  // namespace smn
