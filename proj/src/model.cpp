// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include "smn/model.hpp"

#include <cmath>

#include <spdlog/spdlog.h>

#include "smn/bytes.hpp"
#include "smn/linalg.hpp"

namespace smn {

template <class Real>
DenseLayer<Real> DenseLayer<Real>::random(std::size_t in, std::size_t out, Activation act, Rng& rng) {
  DenseLayer layer;
  layer.weight = Tensor<Real>(out, in);
  const double stddev = std::sqrt(2.0 / static_cast<double>(in));
  for (auto& w : layer.weight.values()) w = static_cast<Real>(rng.normal() * stddev);
  layer.bias.assign(out, Real(0));
  layer.activation = act;
  return layer;
}

template <class Real>
SmallModel<Real>::SmallModel(std::vector<DenseLayer<Real>> layers, std::optional<DenseLayer<Real>> head)
    : layers_(std::move(layers)), head_(std::move(head)) {
  if (layers_.empty()) throw DimensionError("model needs at least one layer");
  for (std::size_t i = 1; i < layers_.size(); ++i) {
    if (layers_[i].in_dim() != layers_[i - 1].out_dim()) {
      throw DimensionError("layer " + std::to_string(i) + " input dimension does not compose");
    }
  }
  if (head_ && head_->in_dim() != embedding_dim()) {
    throw DimensionError("head input dimension does not match embedding");
  }
}

template <class Real>
SmallModel<Real> SmallModel<Real>::mlp(const std::vector<std::size_t>& dims, std::uint64_t seed) {
  if (dims.size() < 2) throw DimensionError("mlp needs at least input and output dims");
  Rng rng(seed);
  std::vector<DenseLayer<Real>> layers;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const bool last = i + 2 == dims.size();
    layers.push_back(DenseLayer<Real>::random(dims[i], dims[i + 1],
                                              last ? Activation::identity : Activation::relu, rng));
    layers.back().weight_trainable = true;
    layers.back().bias_trainable = true;
  }
  return SmallModel(std::move(layers));
}

template <class Real>
std::size_t SmallModel<Real>::maskable_parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) {
    if (l.masked()) n += l.weight.size();
  }
  return n;
}

template <class Real>
std::size_t SmallModel<Real>::backbone_weight_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weight.size();
  return n;
}

template <class Real>
void SmallModel<Real>::attach_masks(Real score_init, Real threshold) {
  for (auto& l : layers_) l.mask = MaskState<Real>::initialized(l.weight.size(), score_init, threshold);
  touch();
}

template <class Real>
void SmallModel<Real>::detach_masks() {
  for (auto& l : layers_) l.mask.reset();
  touch();
}

template <class Real>
void SmallModel<Real>::apply_mask_set(const std::vector<BinaryMask>& masks) {
  if (masks.size() != layers_.size()) throw DimensionError("apply_mask_set: one mask per layer required");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (masks[i].size() != layers_[i].weight.size()) throw DimensionError("apply_mask_set: mask size mismatch");
    auto state = MaskState<Real>::initialized(masks[i].size(), Real(1), Real(0));
    for (std::size_t j = 0; j < masks[i].size(); ++j) state.scores[j] = masks[i].bits[j] ? Real(1) : Real(-1);
    layers_[i].mask = std::move(state);
  }
  touch();
}

template <class Real>
std::vector<BinaryMask> SmallModel<Real>::masks() const {
  std::vector<BinaryMask> out;
  for (const auto& l : layers_) {
    if (l.masked()) out.push_back(current_mask(*l.mask, l.weight.shape()));
  }
  return out;
}

template <class Real>
void SmallModel<Real>::freeze_backbone() {
  for (auto& l : layers_) {
    l.weight_trainable = false;
    l.bias_trainable = false;
  }
  touch();
}

namespace {

template <class Real>
void apply_activation(Activation act, Tensor<Real>& t) {
  if (act == Activation::relu) {
    for (auto& v : t.values()) v = v > Real(0) ? v : Real(0);
  }
}

template <class Real>
LayerRecord<Real> run_layer(const DenseLayer<Real>& layer, Tensor<Real> input) {
  LayerRecord<Real> rec;
  if (layer.masked()) {
    rec.effective = effective_weights(layer.weight, *layer.mask);
    if (rec.effective->alpha.degenerate) {
      spdlog::debug("degenerate masked layer ({} weights, none active); output is bias only",
                    layer.weight.size());
    }
    rec.output = masked_forward<Real>(layer.weight, layer.bias, *rec.effective, input);
  } else {
    rec.output = linear_forward<Real>(layer.weight, layer.bias, input);
  }
  apply_activation(layer.activation, rec.output);
  rec.input = std::move(input);
  return rec;
}

template <class Real>
void check_finite(const Tensor<Real>& t, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite values in ") + what);
}

}  // namespace

template <class Real>
ForwardRecord<Real> forward(const SmallModel<Real>& model, const Tensor<Real>& batch, ForwardOptions opts) {
  if (batch.cols() != model.input_dim()) {
    throw DimensionError("forward: batch has " + std::to_string(batch.cols()) +
                         " columns, model expects " + std::to_string(model.input_dim()));
  }
  ForwardRecord<Real> rec;
  rec.model = &model;
  rec.model_version = model.version();
  Tensor<Real> x = batch;
  for (const auto& layer : model.layers()) {
    rec.layers.push_back(run_layer(layer, std::move(x)));
    x = rec.layers.back().output;
  }
  model.note_forward(batch.rows());
  if (opts.head && model.head()) rec.head = run_layer(*model.head(), x);
  check_finite(rec.output(), "forward output");
  return rec;
}

template <class Real>
Tensor<Real> embed(const SmallModel<Real>& model, const Tensor<Real>& batch) {
  auto rec = forward(model, batch, ForwardOptions{.head = false});
  return rec.layers.back().output;
}

namespace {

template <class Real>
LayerGrads<Real> layer_backward(const DenseLayer<Real>& layer, const LayerRecord<Real>& rec,
                                Tensor<Real>& grad, bool want_input, bool all_weights,
                                Tensor<Real>* grad_input) {
  // grad arrives as dL/d(post-activation); turn it into dL/d(pre-activation).
  if (layer.activation == Activation::relu) {
    auto& g = grad.values();
    const auto& y = rec.output.values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!(y[i] > Real(0))) g[i] = Real(0);
    }
  }
  LayerGrads<Real> out;
  const bool need_w = layer.masked() || layer.weight_trainable || all_weights;
  if (need_w) {
    out.weight = Tensor<Real>(layer.weight.shape());
    accumulate_weight_grad(grad, rec.input, out.weight);
    if (layer.masked()) out.scores = straight_through_backward(layer.weight, *rec.effective, out.weight);
  }
  if (layer.bias_trainable || all_weights) {
    out.bias.assign(layer.out_dim(), Real(0));
    for (std::size_t b = 0; b < grad.rows(); ++b) {
      const auto g = grad.row(b);
      for (std::size_t o = 0; o < g.size(); ++o) out.bias[o] += g[o];
    }
  }
  if (want_input) {
    *grad_input = input_grad(grad, layer.masked() ? rec.effective->weights : layer.weight);
  }
  return out;
}

}  // namespace

template <class Real>
Gradients<Real> backward(const SmallModel<Real>& model, const ForwardRecord<Real>& record,
                         const Tensor<Real>& grad_output, BackwardOptions opts) {
  if (record.model != &model || record.model_version != model.version()) {
    throw StaleRecordError("backward: forward record does not belong to the current model state");
  }
  if (grad_output.shape() != record.output().shape()) {
    throw DimensionError("backward: loss gradient shape does not match output");
  }
  Gradients<Real> grads;
  Tensor<Real> g = grad_output;
  if (record.head) {
    Tensor<Real> down;
    grads.head = layer_backward(*model.head(), *record.head, g, true, opts.all_weight_grads, &down);
    g = std::move(down);
  }
  const auto& layers = model.layers();
  grads.layers.resize(layers.size());
  for (std::size_t i = layers.size(); i-- > 0;) {
    const bool want_input = i > 0 || opts.input_grad;
    Tensor<Real> down;
    grads.layers[i] = layer_backward(layers[i], record.layers[i], g, want_input,
                                     opts.all_weight_grads, &down);
    if (i > 0) {
      g = std::move(down);
    } else if (opts.input_grad) {
      grads.input = std::move(down);
    }
  }
  return grads;
}

namespace {

constexpr char kCheckpointMagic[4] = {'S', 'M', 'N', 'W'};
constexpr std::uint16_t kCheckpointVersion = 1;

template <class Real>
void put_tensor(ByteWriter& w, const std::vector<std::size_t>& shape, std::span<const Real> values) {
  w.put<std::uint8_t>(static_cast<std::uint8_t>(shape.size()));
  for (auto d : shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  for (Real v : values) w.put<Real>(v);
}

struct TensorHeader {
  std::vector<std::size_t> shape;
  std::size_t count = 1;
};

TensorHeader get_header(ByteReader& r) {
  TensorHeader h;
  const auto rank = r.get<std::uint8_t>();
  for (unsigned i = 0; i < rank; ++i) {
    h.shape.push_back(r.get<std::uint32_t>());
    h.count *= h.shape.back();
  }
  return h;
}

// Walks the file assuming element width `width`; true if it consumes exactly all bytes.
bool layout_fits(std::span<const std::uint8_t> bytes, std::size_t width) {
  try {
    ByteReader r(bytes);
    r.get_bytes(4);
    r.get<std::uint16_t>();
    const auto layers = r.get<std::uint16_t>();
    for (unsigned i = 0; i < 2u * layers; ++i) {
      const auto h = get_header(r);
      r.get_bytes(h.count * width);
    }
    return r.remaining() == 0;
  } catch (const TruncatedInput&) {
    return false;
  }
}

}  // namespace

Precision checkpoint_precision(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw std::runtime_error("not an SMNW checkpoint (bad magic)");
  }
  if (layout_fits(bytes, 4)) return Precision::f32;
  if (layout_fits(bytes, 8)) return Precision::f64;
  throw TruncatedInput("checkpoint length does not match its tensor headers");
}

template <class Real>
std::vector<std::uint8_t> save_checkpoint(const SmallModel<Real>& model) {
  ByteWriter w;
  w.put_bytes(std::span(reinterpret_cast<const std::uint8_t*>(kCheckpointMagic), 4));
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(model.layers().size()));
  for (const auto& l : model.layers()) {
    put_tensor<Real>(w, l.weight.shape(), l.weight.span());
    put_tensor<Real>(w, {l.bias.size()}, l.bias);
  }
  return w.take();
}

namespace {

template <class Stored, class Real>
SmallModel<Real> read_layers(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.get_bytes(4);
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  const auto n = r.get<std::uint16_t>();
  std::vector<DenseLayer<Real>> layers;
  for (unsigned i = 0; i < n; ++i) {
    DenseLayer<Real> layer;
    const auto wh = get_header(r);
    if (wh.shape.size() != 2) throw DimensionError("checkpoint weight tensor must be rank 2");
    std::vector<Real> w(wh.count);
    for (auto& v : w) v = static_cast<Real>(r.get<Stored>());
    layer.weight = Tensor<Real>(wh.shape, std::move(w));
    const auto bh = get_header(r);
    if (bh.count != layer.out_dim()) throw DimensionError("checkpoint bias length mismatch");
    layer.bias.resize(bh.count);
    for (auto& v : layer.bias) v = static_cast<Real>(r.get<Stored>());
    layer.activation = i + 1 == n ? Activation::identity : Activation::relu;
    layers.push_back(std::move(layer));
  }
  return SmallModel<Real>(std::move(layers));
}

}  // namespace

template <class Real>
SmallModel<Real> load_checkpoint(std::span<const std::uint8_t> bytes) {
  return checkpoint_precision(bytes) == Precision::f32 ? read_layers<float, Real>(bytes)
                                                       : read_layers<double, Real>(bytes);
}

template <class To, class From>
SmallModel<To> convert_model(const SmallModel<From>& model) {
  auto convert_layer = [](const DenseLayer<From>& l) {
    DenseLayer<To> out;
    out.weight = l.weight.template cast<To>();
    out.bias.assign(l.bias.begin(), l.bias.end());
    out.activation = l.activation;
    out.weight_trainable = l.weight_trainable;
    out.bias_trainable = l.bias_trainable;
    if (l.mask) {
      MaskState<To> m;
      m.scores.assign(l.mask->scores.begin(), l.mask->scores.end());
      m.threshold = static_cast<To>(l.mask->threshold);
      m.trainable = l.mask->trainable;
      m.rule = l.mask->rule;
      m.active_fraction = l.mask->active_fraction;
      out.mask = std::move(m);
    }
    return out;
  };
  std::vector<DenseLayer<To>> layers;
  for (const auto& l : model.layers()) layers.push_back(convert_layer(l));
  std::optional<DenseLayer<To>> head;
  if (model.head()) head = convert_layer(*model.head());
  return SmallModel<To>(std::move(layers), std::move(head));
}

#define SMN_INSTANTIATE(Real)                                                                    \
  template struct DenseLayer<Real>;                                                            \
  template class SmallModel<Real>;                                                             \
  template ForwardRecord<Real> forward<Real>(const SmallModel<Real>&, const Tensor<Real>&, ForwardOptions); \
  template Tensor<Real> embed<Real>(const SmallModel<Real>&, const Tensor<Real>&);              \
  template Gradients<Real> backward<Real>(const SmallModel<Real>&, const ForwardRecord<Real>&,  \
                                          const Tensor<Real>&, BackwardOptions);               \
  template std::vector<std::uint8_t> save_checkpoint<Real>(const SmallModel<Real>&);           \
  template SmallModel<Real> load_checkpoint<Real>(std::span<const std::uint8_t>);

SMN_INSTANTIATE(float)
SMN_INSTANTIATE(double)
#undef SMN_INSTANTIATE

template SmallModel<float> convert_model<float, double>(const SmallModel<double>&);
template SmallModel<double> convert_model<double, float>(const SmallModel<float>&);
template SmallModel<float> convert_model<float, float>(const SmallModel<float>&);
template SmallModel<double> convert_model<double, double>(const SmallModel<double>&);

}  // namespace smn
