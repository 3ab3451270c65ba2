// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "smn/masking.hpp"
#include "smn/rng.hpp"
#include "smn/tensor.hpp"

namespace smn {

enum class Activation : std::uint8_t { identity, relu };

class StaleRecordError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <class Real>
struct DenseLayer {
  Tensor<Real> weight;  // out x in
  std::vector<Real> bias;
  Activation activation = Activation::relu;
  bool weight_trainable = false;
  bool bias_trainable = false;
  std::optional<MaskState<Real>> mask;

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }
  bool masked() const { return mask.has_value(); }

  /// He-normal weights, zero bias.
  static DenseLayer random(std::size_t in, std::size_t out, Activation act, Rng& rng);
};

/// A ReLU MLP backbone plus an optional linear head. The backbone output is
/// the embedding. Heads and biases are never masked.
template <class Real>
class SmallModel {
 public:
  SmallModel() = default;
  SmallModel(std::vector<DenseLayer<Real>> layers, std::optional<DenseLayer<Real>> head = {});

  /// Backbone dims {in, h1, ..., embedding}; ReLU between layers, identity on the last.
  static SmallModel mlp(const std::vector<std::size_t>& dims, std::uint64_t seed);

  std::vector<DenseLayer<Real>>& layers() { return layers_; }
  const std::vector<DenseLayer<Real>>& layers() const { return layers_; }
  std::optional<DenseLayer<Real>>& head() { return head_; }
  const std::optional<DenseLayer<Real>>& head() const { return head_; }

  std::size_t input_dim() const { return layers_.front().in_dim(); }
  std::size_t embedding_dim() const { return layers_.back().out_dim(); }

  /// Bumped by every mutation that invalidates outstanding forward records.
  std::uint64_t version() const { return version_; }
  void touch() { ++version_; }

  /// Rows pushed through the backbone since construction (forward-pass audit).
  std::uint64_t rows_forwarded() const { return rows_forwarded_; }
  void note_forward(std::size_t rows) const { rows_forwarded_ += rows; }

  std::size_t maskable_parameter_count() const;
  std::size_t backbone_weight_count() const;

  /// Adds threshold-rule score tensors at s0 to every backbone layer.
  void attach_masks(Real score_init, Real threshold);
  void detach_masks();

  /// Replaces every layer's mask state with fixed scores (+1 active, -1
  /// inactive, threshold 0) reproducing `masks` exactly.
  void apply_mask_set(const std::vector<BinaryMask>& masks);

  /// Current masks of all masked backbone layers, in layer order.
  std::vector<BinaryMask> masks() const;

  /// Freeze backbone weights and biases (mask-only adaptation).
  void freeze_backbone();

 private:
  std::vector<DenseLayer<Real>> layers_;
  std::optional<DenseLayer<Real>> head_;
  std::uint64_t version_ = 0;
  mutable std::uint64_t rows_forwarded_ = 0;
};

template <class Real>
struct LayerRecord {
  Tensor<Real> input;
  Tensor<Real> output;  // post-activation
  std::optional<EffectiveWeights<Real>> effective;
};

template <class Real>
struct ForwardRecord {
  std::vector<LayerRecord<Real>> layers;
  std::optional<LayerRecord<Real>> head;
  const void* model = nullptr;
  std::uint64_t model_version = 0;

  const Tensor<Real>& embedding() const { return layers.back().output; }
  const Tensor<Real>& output() const { return head ? head->output : layers.back().output; }
};

template <class Real>
struct LayerGrads {
  Tensor<Real> weight;          // dL/dW (dL/dW_eff for masked layers); empty if not needed
  std::vector<Real> bias;       // empty if not needed
  std::vector<Real> scores;     // masked layers only
};

template <class Real>
struct Gradients {
  std::vector<LayerGrads<Real>> layers;
  std::optional<LayerGrads<Real>> head;
  Tensor<Real> input;  // only when requested
};

struct ForwardOptions {
  bool head = true;
};

struct BackwardOptions {
  bool input_grad = false;
  bool all_weight_grads = false;  // compute dL/dW even for frozen layers (tests)
};

/// Pure function of (model, batch). Throws DimensionError on column mismatch.
template <class Real>
ForwardRecord<Real> forward(const SmallModel<Real>& model, const Tensor<Real>& batch,
                            ForwardOptions opts = {});

/// Embeddings only, no record kept beyond the call.
template <class Real>
Tensor<Real> embed(const SmallModel<Real>& model, const Tensor<Real>& batch);

/// grad_output is dL/d(head output) when the record has a head, otherwise
/// dL/d(embedding). Throws StaleRecordError if the model changed since forward.
template <class Real>
Gradients<Real> backward(const SmallModel<Real>& model, const ForwardRecord<Real>& record,
                         const Tensor<Real>& grad_output, BackwardOptions opts = {});

/// Backbone checkpoint: "SMNW", u16 version, u16 layer count, then weight and
/// bias tensor per layer (u8 rank, u32 dims, raw little-endian IEEE-754 values).
template <class Real>
std::vector<std::uint8_t> save_checkpoint(const SmallModel<Real>& model);

/// Element width is recovered from the payload length; layers get ReLU except the last.
template <class Real>
SmallModel<Real> load_checkpoint(std::span<const std::uint8_t> bytes);

Precision checkpoint_precision(std::span<const std::uint8_t> bytes);

template <class To, class From>
SmallModel<To> convert_model(const SmallModel<From>& model);

}  // namespace smn
