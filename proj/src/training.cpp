// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include "smn/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace smn {

namespace {

constexpr std::size_t kSlotsPerLayer = 3;
constexpr std::size_t kHeadSlot = 1u << 16;

enum Slot : std::size_t { scores_slot = 0, weight_slot = 1, bias_slot = 2 };

}  // namespace

template <class Real>
double softmax_cross_entropy(const Tensor<Real>& logits, std::span<const int> labels, Tensor<Real>& grad) {
  const std::size_t n = logits.rows();
  const std::size_t k = logits.cols();
  if (labels.size() != n) throw DimensionError("softmax_cross_entropy: label count mismatch");
  grad = Tensor<Real>(logits.shape());
  double loss = 0.0;
  std::vector<double> p(k);
  for (std::size_t b = 0; b < n; ++b) {
    const auto z = logits.row(b);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      p[c] = std::exp(static_cast<double>(z[c]) - zmax);
      sum += p[c];
    }
    const auto y = static_cast<std::size_t>(labels[b]);
    if (y >= k) throw DimensionError("softmax_cross_entropy: label out of range");
    loss -= std::log(p[y] / sum);
    auto g = grad.row(b);
    for (std::size_t c = 0; c < k; ++c) {
      g[c] = static_cast<Real>((p[c] / sum - (c == y ? 1.0 : 0.0)) / static_cast<double>(n));
    }
  }
  return loss / static_cast<double>(n);
}

double scheduled_lr(const TrainConfig& cfg, double base_lr, std::size_t step, std::size_t total_steps,
                    bool with_warmup) {
  if (cfg.schedule == LrSchedule::constant || total_steps == 0) return base_lr;
  return cosine_warmup_lr(std::min(step, total_steps), total_steps, base_lr,
                          with_warmup ? cfg.warmup_fraction : 0.0);
}

template <class Real>
double active_fraction(const SmallModel<Real>& model) {
  std::size_t active = 0;
  std::size_t total = 0;
  for (const auto& m : model.masks()) {
    active += m.active_count();
    total += m.size();
  }
  return total == 0 ? 1.0 : static_cast<double>(active) / static_cast<double>(total);
}

template <class Real>
void apply_update(SmallModel<Real>& model, const Gradients<Real>& grads, OptimizerState<Real>& state,
                  const SgdParams& backbone, const SgdParams& head) {
  auto& layers = model.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& layer = layers[i];
    const auto& g = grads.layers[i];
    const std::size_t base = i * kSlotsPerLayer;
    if (layer.masked() && !g.scores.empty()) {
      auto& m = *layer.mask;
      sgd_step<Real>(m.scores, g.scores, state.buffer(base + scores_slot, m.scores.size()), backbone,
                     m.trainable);
    }
    if (layer.weight_trainable && !g.weight.empty()) {
      sgd_step<Real>(layer.weight.span(), g.weight.span(),
                     state.buffer(base + weight_slot, layer.weight.size()), backbone);
    }
    if (layer.bias_trainable && !g.bias.empty()) {
      sgd_step<Real>(layer.bias, g.bias, state.buffer(base + bias_slot, layer.bias.size()), backbone);
    }
  }
  if (model.head() && grads.head) {
    auto& h = *model.head();
    if (h.weight_trainable) {
      sgd_step<Real>(h.weight.span(), grads.head->weight.span(),
                     state.buffer(kHeadSlot + weight_slot, h.weight.size()), head);
    }
    if (h.bias_trainable) {
      sgd_step<Real>(h.bias, grads.head->bias, state.buffer(kHeadSlot + bias_slot, h.bias.size()), head);
    }
  }
  state.advance();
  model.touch();
}

template <class Real>
double mask_train_step(SmallModel<Real>& model, const Tensor<Real>& batch, std::span<const int> labels,
                       const TrainConfig& config, OptimizerState<Real>& state, double lr, double head_lr) {
  const auto record = forward(model, batch);
  Tensor<Real> grad;
  const double loss = softmax_cross_entropy(record.output(), labels, grad);
  const auto grads = backward(model, record, grad);
  apply_update(model, grads, state, SgdParams{lr, config.momentum, config.weight_decay},
               SgdParams{head_lr, config.head_momentum, 0.0});
  return loss;
}

template <class Real>
std::vector<FreezeMask> select_trainable(const SmallModel<Real>& model, const FreezeConfig& policy,
                                         std::uint64_t seed) {
  const auto& layers = model.layers();
  std::vector<FreezeMask> out;
  std::size_t trainable = 0;
  if (policy.policy == "layer_subset") {
    for (std::size_t i : policy.layers) {
      if (i >= layers.size()) {
        throw std::invalid_argument("select_trainable: layer " + std::to_string(i) + " out of range");
      }
    }
  }
  Rng rng(derive_seed(seed, 0xf4ee));
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& w = layers[li].weight;
    FreezeMask f(w.size(), 1);
    if (policy.policy == "random") {
      for (auto& b : f) b = rng.uniform() >= policy.p;
    } else if (policy.policy == "max_magnitude") {
      std::vector<Real> mag(w.size());
      for (std::size_t j = 0; j < w.size(); ++j) mag[j] = std::abs(w[j]);
      f = topk_mask<Real>(mag, policy.fraction).bits;
    } else if (policy.policy == "layer_subset") {
      const bool keep = std::find(policy.layers.begin(), policy.layers.end(), li) != policy.layers.end();
      std::fill(f.begin(), f.end(), static_cast<std::uint8_t>(keep));
    } else if (policy.policy != "none") {
      throw std::invalid_argument("select_trainable: unknown policy '" + policy.policy + "'");
    }
    trainable += static_cast<std::size_t>(std::count(f.begin(), f.end(), std::uint8_t{1}));
    out.push_back(std::move(f));
  }
  if (trainable == 0) throw std::invalid_argument("select_trainable: no score would be trainable");
  return out;
}

template <class Real>
void apply_freeze(SmallModel<Real>& model, const std::vector<FreezeMask>& masks) {
  auto& layers = model.layers();
  if (masks.size() != layers.size()) throw DimensionError("apply_freeze: one FreezeMask per layer required");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!layers[i].mask) throw std::logic_error("apply_freeze: layer has no mask");
    if (masks[i].size() != layers[i].weight.size()) throw DimensionError("apply_freeze: size mismatch");
    layers[i].mask->trainable = masks[i];
  }
  model.touch();
}

template <class Real>
DenseLayer<Real> make_head(std::size_t in, std::size_t out, std::uint64_t seed) {
  Rng rng(seed);
  auto head = DenseLayer<Real>::random(in, out, Activation::identity, rng);
  head.weight_trainable = true;
  head.bias_trainable = true;
  return head;
}

template <class Real>
SupervisedTrainer<Real>::SupervisedTrainer(SmallModel<Real>& model, Tensor<Real> features,
                                           std::vector<int> labels, std::size_t num_classes,
                                           TrainConfig config, AdaptMode mode, MaskSchedule schedule)
    : model_(model),
      features_(std::move(features)),
      labels_(std::move(labels)),
      config_(std::move(config)),
      mode_(mode),
      schedule_(schedule) {
  config_.validate();
  if (features_.rows() != labels_.size()) throw DimensionError("trainer: feature/label count mismatch");
  if (features_.rows() == 0) throw DimensionError("trainer: empty training set");
  if (!model_.head() || model_.head()->out_dim() != num_classes) {
    model_.head() = make_head<Real>(model_.embedding_dim(), num_classes, derive_seed(config_.seed, 0x4ead));
  }
  if (mode_ == AdaptMode::mask) {
    model_.freeze_backbone();
    bool any_mask = false;
    for (const auto& l : model_.layers()) any_mask = any_mask || l.masked();
    if (!any_mask) {
      model_.attach_masks(static_cast<Real>(config_.score_init), static_cast<Real>(config_.threshold));
      if (!config_.freeze.none()) apply_freeze(model_, select_trainable(model_, config_.freeze, config_.seed));
    }
    for (auto& l : model_.layers()) {
      if (!l.mask) continue;
      l.mask->rule = schedule_.rule;
      l.mask->active_fraction = schedule_.rule == MaskRule::topk && !schedule_.progressive
                                    ? schedule_.topk_fraction
                                    : 1.0;
    }
  } else {
    for (auto& l : model_.layers()) {
      l.weight_trainable = true;
      l.bias_trainable = true;
    }
  }
  model_.touch();
  steps_per_epoch_ = (features_.rows() + config_.batch_size - 1) / config_.batch_size;
  order_.resize(features_.rows());
}

template <class Real>
void SupervisedTrainer<Real>::begin_epoch() {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Rng rng(derive_seed(config_.seed, 0x5487, epoch_));
  rng.shuffle(std::span(order_));
  batch_in_epoch_ = 0;
  epoch_loss_sum_ = 0.0;
  epoch_rows_ = 0;
}

template <class Real>
StepResult SupervisedTrainer<Real>::step() {
  if (done()) throw std::logic_error("trainer already finished");
  if (batch_in_epoch_ == 0) begin_epoch();
  const std::size_t begin = batch_in_epoch_ * config_.batch_size;
  const std::size_t end = std::min(begin + config_.batch_size, order_.size());
  const std::span<const std::size_t> idx(order_.data() + begin, end - begin);
  const Tensor<Real> batch = features_.gather_rows(idx);
  std::vector<int> y(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) y[i] = labels_[idx[i]];

  if (mode_ == AdaptMode::mask && schedule_.rule == MaskRule::topk && schedule_.progressive) {
    // Step t trains at the fraction for t + 1, so the final update lands on the target.
    const double f = progressive_fraction(global_step_ + 1, total_steps(), schedule_.topk_fraction);
    for (auto& l : model_.layers()) {
      if (l.mask) l.mask->active_fraction = f;
    }
    model_.touch();
  }

  const std::size_t total = total_steps();
  const double lr = scheduled_lr(config_, config_.lr, global_step_, total, true);
  const double head_lr = scheduled_lr(config_, config_.head_lr, global_step_, total, false);
  const double loss = mask_train_step(model_, batch, y, config_, opt_, lr, head_lr);

  StepResult r{epoch_, global_step_, loss, lr};
  epoch_loss_sum_ += loss * static_cast<double>(idx.size());
  epoch_rows_ += idx.size();
  ++global_step_;
  if (++batch_in_epoch_ == steps_per_epoch_) {
    epochs_.push_back({epoch_, epoch_loss_sum_ / static_cast<double>(epoch_rows_), lr,
                       active_fraction(model_)});
    ++epoch_;
    batch_in_epoch_ = 0;
  }
  return r;
}

template <class Real>
void SupervisedTrainer<Real>::run() {
  while (!done()) step();
}

template <class Real>
std::vector<int> predict_classes(const SmallModel<Real>& model, const Tensor<Real>& features) {
  const auto rec = forward(model, features);
  const auto& out = rec.output();
  std::vector<int> pred(out.rows());
  for (std::size_t b = 0; b < out.rows(); ++b) {
    const auto r = out.row(b);
    pred[b] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return pred;
}

double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw DimensionError("accuracy: size mismatch");
  if (truth.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

#define SMN_INSTANTIATE(Real)                                                                        \
  template double softmax_cross_entropy<Real>(const Tensor<Real>&, std::span<const int>, Tensor<Real>&); \
  template double active_fraction<Real>(const SmallModel<Real>&);                                \
  template void apply_update<Real>(SmallModel<Real>&, const Gradients<Real>&, OptimizerState<Real>&, \
                                   const SgdParams&, const SgdParams&);                            \
  template double mask_train_step<Real>(SmallModel<Real>&, const Tensor<Real>&, std::span<const int>, \
                                        const TrainConfig&, OptimizerState<Real>&, double, double); \
  template DenseLayer<Real> make_head<Real>(std::size_t, std::size_t, std::uint64_t);             \
  template std::vector<FreezeMask> select_trainable<Real>(const SmallModel<Real>&, const FreezeConfig&,   \
                                                          std::uint64_t);                                 \
  template void apply_freeze<Real>(SmallModel<Real>&, const std::vector<FreezeMask>&);                  \
  template class SupervisedTrainer<Real>;                                                        \
  template std::vector<int> predict_classes<Real>(const SmallModel<Real>&, const Tensor<Real>&);

SMN_INSTANTIATE(float)
SMN_INSTANTIATE(double)
#undef SMN_INSTANTIATE

}  // namespace smn
