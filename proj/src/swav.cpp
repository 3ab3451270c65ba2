// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include "smn/swav.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <spdlog/spdlog.h>

#include "json.hpp"
#include "smn/kernels.hpp"

namespace smn {

namespace {

template <class Real>
void augment_vector(std::span<const Real> in, std::span<Real> out, const AugConfig& aug, Rng& rng) {
  const double scale = aug.scale_jitter > 0.0 ? rng.uniform(1.0 - aug.scale_jitter, 1.0 + aug.scale_jitter) : 1.0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    double v = static_cast<double>(in[i]) * scale;
    if (aug.dropout_prob > 0.0 && rng.uniform() < aug.dropout_prob) v = 0.0;
    if (aug.noise_sigma > 0.0) v += aug.noise_sigma * rng.normal();
    out[i] = static_cast<Real>(v);
  }
}

// Random crop of side c*n at a random offset, resampled back to n x n by
// bilinear interpolation, then an optional horizontal flip.
template <class Real>
void crop_flip(std::span<const Real> in, std::span<Real> out, std::size_t n, const AugConfig& aug, Rng& rng) {
  const double frac = aug.crop_min < 1.0 ? rng.uniform(aug.crop_min, 1.0) : 1.0;
  const double side = frac * static_cast<double>(n);
  const double x0 = rng.uniform(0.0, static_cast<double>(n) - side);
  const double y0 = rng.uniform(0.0, static_cast<double>(n) - side);
  const bool flip = aug.hflip && rng.uniform() < 0.5;
  auto at = [&](std::size_t r, std::size_t c) { return static_cast<double>(in[r * n + c]); };
  const double step = n > 1 ? (side - 1.0) / static_cast<double>(n - 1) : 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double sy = std::clamp(y0 + step * static_cast<double>(r), 0.0, static_cast<double>(n - 1));
    const auto ry = static_cast<std::size_t>(sy);
    const std::size_t ry1 = std::min(ry + 1, n - 1);
    const double fy = sy - static_cast<double>(ry);
    for (std::size_t c = 0; c < n; ++c) {
      const double sx = std::clamp(x0 + step * static_cast<double>(c), 0.0, static_cast<double>(n - 1));
      const auto rx = static_cast<std::size_t>(sx);
      const std::size_t rx1 = std::min(rx + 1, n - 1);
      const double fx = sx - static_cast<double>(rx);
      const double v = (1 - fy) * ((1 - fx) * at(ry, rx) + fx * at(ry, rx1)) +
                       fy * ((1 - fx) * at(ry1, rx) + fx * at(ry1, rx1));
      out[r * n + (flip ? n - 1 - c : c)] = static_cast<Real>(v);
    }
  }
}

template <class Real>
void augment_row(std::span<const Real> in, std::span<Real> out, const AugConfig& aug, Rng& rng) {
  if (aug.image_side > 0) {
    if (aug.image_side * aug.image_side != in.size()) {
      throw DimensionError("augment: row length is not image_side^2");
    }
    std::vector<Real> tmp(in.size());
    crop_flip<Real>(in, tmp, aug.image_side, aug, rng);
    augment_vector<Real>(tmp, out, aug, rng);
  } else {
    augment_vector<Real>(in, out, aug, rng);
  }
}

}  // namespace

template <class Real>
Tensor<Real> augment(const Tensor<Real>& x, const AugConfig& aug, Rng& rng) {
  if (aug.identity()) return x;
  Tensor<Real> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) augment_row<Real>(x.row(r), out.row(r), aug, rng);
  return out;
}

template <class Real>
ViewPair<Real> make_views(const Tensor<Real>& x, const AugConfig& aug, Rng& rng) {
  ViewPair<Real> v;
  v.t = augment(x, aug, rng);
  v.s = augment(x, aug, rng);
  return v;
}

template <class Real>
ViewPair<Real> make_views_for(const Tensor<Real>& data, std::span<const std::size_t> idx,
                              const AugConfig& aug, std::uint64_t seed, std::size_t epoch) {
  ViewPair<Real> v{data.gather_rows(idx), data.gather_rows(idx)};
  if (aug.identity()) return v;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    Rng rng(derive_seed(seed, 0x71e3 + epoch, idx[i]));
    augment_row<Real>(data.row(idx[i]), v.t.row(i), aug, rng);
    augment_row<Real>(data.row(idx[i]), v.s.row(i), aug, rng);
  }
  return v;
}

template <class Real>
PrototypeBank<Real> PrototypeBank<Real>::random(std::size_t k, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  PrototypeBank bank;
  bank.vectors = Tensor<Real>(k, dim);
  for (auto& v : bank.vectors.values()) v = static_cast<Real>(rng.normal());
  bank.normalize();
  return bank;
}

template <class Real>
void PrototypeBank<Real>::normalize() {
  for (std::size_t k = 0; k < vectors.rows(); ++k) {
    auto row = vectors.row(k);
    double sq = 0.0;
    for (Real v : row) sq += static_cast<double>(v) * static_cast<double>(v);
    const double norm = std::sqrt(sq);
    if (norm > 0.0) {
      for (auto& v : row) v = static_cast<Real>(static_cast<double>(v) / norm);
    }
  }
}

Matrix sinkhorn_assign(const Matrix& scores, double eps, std::size_t iters) {
  if (!(eps > 0.0)) throw std::invalid_argument("sinkhorn_assign: eps must be > 0");
  if (iters < 1) throw std::invalid_argument("sinkhorn_assign: iters must be >= 1");
  const std::size_t k = scores.rows();
  const std::size_t b = scores.cols();
  Matrix q(k, b);
  const double smax = *std::max_element(scores.values().begin(), scores.values().end());
  double total = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    q[i] = std::exp((scores[i] - smax) / eps);
    total += q[i];
  }
  for (auto& v : q.values()) v /= total;
  const double row_target = 1.0 / static_cast<double>(k);
  const double col_target = 1.0 / static_cast<double>(b);
  std::vector<double> col(b);
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t r = 0; r < k; ++r) {
      auto row = q.row(r);
      const double s = std::accumulate(row.begin(), row.end(), 0.0);
      if (s > 0.0) {
        const double f = row_target / s;
        for (auto& v : row) v *= f;
      } else {
        for (auto& v : row) v = row_target * col_target;
      }
    }
    std::fill(col.begin(), col.end(), 0.0);
    for (std::size_t r = 0; r < k; ++r) {
      const auto row = q.row(r);
      for (std::size_t c = 0; c < b; ++c) col[c] += row[c];
    }
    for (std::size_t c = 0; c < b; ++c) col[c] = col[c] > 0.0 ? col_target / col[c] : 0.0;
    for (std::size_t r = 0; r < k; ++r) {
      auto row = q.row(r);
      for (std::size_t c = 0; c < b; ++c) row[c] *= col[c];
    }
  }
  return q;
}

namespace {

template <class Real>
Matrix prototype_scores(const Tensor<Real>& z, const PrototypeBank<Real>& bank) {
  if (z.cols() != bank.dim()) throw DimensionError("swav: embedding and prototype dims differ");
  Matrix s(z.rows(), bank.count());
  for (std::size_t b = 0; b < z.rows(); ++b) {
    for (std::size_t k = 0; k < bank.count(); ++k) {
      s(b, k) = static_cast<double>(kernels::dot<Real>(z.row(b), bank.vectors.row(k)));
    }
  }
  return s;
}

// B x K scores -> B x K codes with rows summing to 1.
Matrix codes_from_scores(const Matrix& scores_bk, double eps, std::size_t iters, std::size_t keep) {
  Matrix kb(scores_bk.cols(), scores_bk.rows());
  for (std::size_t b = 0; b < scores_bk.rows(); ++b) {
    for (std::size_t k = 0; k < scores_bk.cols(); ++k) kb(k, b) = scores_bk(b, k);
  }
  const Matrix q = sinkhorn_assign(kb, eps, iters);
  Matrix codes(keep, scores_bk.cols());
  for (std::size_t b = 0; b < keep; ++b) {
    double s = 0.0;
    for (std::size_t k = 0; k < q.rows(); ++k) s += q(k, b);
    for (std::size_t k = 0; k < q.rows(); ++k) codes(b, k) = s > 0.0 ? q(k, b) / s : 0.0;
  }
  return codes;
}

// Cross-entropy of softmax(scores / tau) against targets, per row, plus
// dL/dscores scaled by `weight`.
double predict_term(const Matrix& scores, const Matrix& targets, double tau, double weight,
                    std::vector<double>& per_sample, Matrix& grad_scores) {
  const std::size_t n = scores.rows();
  const std::size_t k = scores.cols();
  grad_scores = Matrix(n, k);
  std::vector<double> logp(k);
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    double m = -INFINITY;
    for (std::size_t c = 0; c < k; ++c) m = std::max(m, scores(b, c) / tau);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(scores(b, c) / tau - m);
    const double lz = m + std::log(z);
    double ce = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      logp[c] = scores(b, c) / tau - lz;
      ce -= targets(b, c) * logp[c];
    }
    per_sample[b] += 0.5 * ce;
    total += ce;
    for (std::size_t c = 0; c < k; ++c) {
      grad_scores(b, c) = weight * (std::exp(logp[c]) - targets(b, c)) / tau;
    }
  }
  return total;
}

}  // namespace

template <class Real>
SwavLoss<Real> swav_loss_with_targets(const Tensor<Real>& z_t, const Tensor<Real>& z_s,
                                      const PrototypeBank<Real>& bank, double tau,
                                      const Matrix& targets_t, const Matrix& targets_s) {
  if (z_t.shape() != z_s.shape()) throw DimensionError("swav: view shapes differ");
  if (!(tau > 0.0)) throw std::invalid_argument("swav: tau must be > 0");
  const std::size_t n = z_t.rows();
  const Matrix s_t = prototype_scores(z_t, bank);
  const Matrix s_s = prototype_scores(z_s, bank);
  SwavLoss<Real> out;
  out.per_sample.assign(n, 0.0);
  out.targets_t = targets_t;
  out.targets_s = targets_s;
  const double w = 0.5 / static_cast<double>(n);
  Matrix g_t, g_s;
  // t predicts the code of s, s predicts the code of t.
  double total = predict_term(s_t, targets_s, tau, w, out.per_sample, g_t);
  total += predict_term(s_s, targets_t, tau, w, out.per_sample, g_s);
  out.loss = 0.5 * total / static_cast<double>(n);

  const std::size_t k = bank.count();
  const std::size_t d = bank.dim();
  out.grad_z_t = Tensor<Real>(n, d);
  out.grad_z_s = Tensor<Real>(n, d);
  std::vector<double> acc_t(d), acc_s(d);
  Matrix gp(k, d);
  for (std::size_t b = 0; b < n; ++b) {
    std::fill(acc_t.begin(), acc_t.end(), 0.0);
    std::fill(acc_s.begin(), acc_s.end(), 0.0);
    for (std::size_t c = 0; c < k; ++c) {
      const auto proto = bank.vectors.row(c);
      const double a = g_t(b, c);
      const double e = g_s(b, c);
      auto gp_row = gp.row(c);
      for (std::size_t j = 0; j < d; ++j) {
        acc_t[j] += a * static_cast<double>(proto[j]);
        acc_s[j] += e * static_cast<double>(proto[j]);
        gp_row[j] += a * static_cast<double>(z_t(b, j)) + e * static_cast<double>(z_s(b, j));
      }
    }
    for (std::size_t j = 0; j < d; ++j) {
      out.grad_z_t(b, j) = static_cast<Real>(acc_t[j]);
      out.grad_z_s(b, j) = static_cast<Real>(acc_s[j]);
    }
  }
  out.grad_prototypes = gp.cast<Real>();
  return out;
}

template <class Real>
SwavLoss<Real> swav_loss(const Tensor<Real>& z_t, const Tensor<Real>& z_s, const PrototypeBank<Real>& bank,
                         double tau, double eps, std::size_t sinkhorn_iters) {
  const Matrix q_t = codes_from_scores(prototype_scores(z_t, bank), eps, sinkhorn_iters, z_t.rows());
  const Matrix q_s = codes_from_scores(prototype_scores(z_s, bank), eps, sinkhorn_iters, z_s.rows());
  return swav_loss_with_targets(z_t, z_s, bank, tau, q_t, q_s);
}

template <class Real>
Tensor<Real> l2_normalize_rows(const Tensor<Real>& h, std::vector<Real>* norms) {
  Tensor<Real> z(h.shape());
  if (norms) norms->resize(h.rows());
  for (std::size_t b = 0; b < h.rows(); ++b) {
    const auto r = h.row(b);
    double sq = 0.0;
    for (Real v : r) sq += static_cast<double>(v) * static_cast<double>(v);
    const double norm = std::max(std::sqrt(sq), 1e-12);
    auto zr = z.row(b);
    for (std::size_t j = 0; j < r.size(); ++j) zr[j] = static_cast<Real>(static_cast<double>(r[j]) / norm);
    if (norms) (*norms)[b] = static_cast<Real>(norm);
  }
  return z;
}

template <class Real>
Tensor<Real> l2_normalize_backward(const Tensor<Real>& z, std::span<const Real> norms, const Tensor<Real>& grad_z) {
  Tensor<Real> gh(z.shape());
  for (std::size_t b = 0; b < z.rows(); ++b) {
    const auto zr = z.row(b);
    const auto gr = grad_z.row(b);
    double dot = 0.0;
    for (std::size_t j = 0; j < zr.size(); ++j) dot += static_cast<double>(zr[j]) * static_cast<double>(gr[j]);
    auto out = gh.row(b);
    const double inv = 1.0 / static_cast<double>(norms[b]);
    for (std::size_t j = 0; j < zr.size(); ++j) {
      out[j] = static_cast<Real>((static_cast<double>(gr[j]) - static_cast<double>(zr[j]) * dot) * inv);
    }
  }
  return gh;
}

namespace {

template <class Real>
void add_into(LayerGrads<Real>& a, const LayerGrads<Real>& b) {
  for (std::size_t i = 0; i < a.weight.size(); ++i) a.weight[i] += b.weight[i];
  for (std::size_t i = 0; i < a.bias.size(); ++i) a.bias[i] += b.bias[i];
  for (std::size_t i = 0; i < a.scores.size(); ++i) a.scores[i] += b.scores[i];
}

template <class Real>
void add_into(Gradients<Real>& a, const Gradients<Real>& b) {
  for (std::size_t i = 0; i < a.layers.size(); ++i) add_into(a.layers[i], b.layers[i]);
  if (a.head && b.head) add_into(*a.head, *b.head);
}

}  // namespace

template <class Real>
SmnTrainer<Real>::SmnTrainer(SmallModel<Real>& model, Tensor<Real> data, TrainConfig config, AdaptMode mode)
    : model_(model), data_(std::move(data)), config_(std::move(config)), mode_(mode) {
  config_.validate();
  if (data_.rows() == 0) throw DimensionError("train_smn: empty dataset");
  const std::size_t proj = config_.projection_dim ? config_.projection_dim : model_.embedding_dim();
  if (!model_.head() || model_.head()->out_dim() != proj) {
    model_.head() = make_head<Real>(model_.embedding_dim(), proj, derive_seed(config_.seed, 0x9e0));
  }
  if (mode_ == AdaptMode::mask) {
    model_.freeze_backbone();
    bool any_mask = false;
    for (const auto& l : model_.layers()) any_mask = any_mask || l.masked();
    if (!any_mask) {
      model_.attach_masks(static_cast<Real>(config_.score_init), static_cast<Real>(config_.threshold));
      if (!config_.freeze.none()) apply_freeze(model_, select_trainable(model_, config_.freeze, config_.seed));
    }
  } else {
    for (auto& l : model_.layers()) {
      l.weight_trainable = true;
      l.bias_trainable = true;
    }
  }
  model_.touch();
  bank_ = PrototypeBank<Real>::random(config_.prototype_count, proj, derive_seed(config_.seed, 0x9207));
  proto_velocity_.assign(bank_.vectors.size(), Real(0));
  steps_per_epoch_ = (data_.rows() + config_.batch_size - 1) / config_.batch_size;
  order_.resize(data_.rows());
  last_good_ = snapshot();
}

template <class Real>
typename SmnTrainer<Real>::Snapshot SmnTrainer<Real>::snapshot() const {
  Snapshot s{{}, *model_.head(), bank_};
  for (const auto& l : model_.layers()) s.scores.push_back(l.mask ? l.mask->scores : std::vector<Real>{});
  return s;
}

template <class Real>
void SmnTrainer<Real>::restore(const Snapshot& s) {
  auto& layers = model_.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].mask) layers[i].mask->scores = s.scores[i];
  }
  model_.head() = s.head;
  bank_ = s.bank;
  model_.touch();
}

template <class Real>
void SmnTrainer<Real>::begin_epoch() {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Rng rng(derive_seed(config_.seed, 0x5487, epoch_));
  rng.shuffle(std::span(order_));
  batch_in_epoch_ = 0;
  epoch_loss_sum_ = 0.0;
  epoch_rows_ = 0;
  last_good_ = snapshot();
}

template <class Real>
Matrix SmnTrainer<Real>::codes_with_queue(const Tensor<Real>& z) const {
  Tensor<Real> all(z.rows() + queue_.size(), z.cols());
  for (std::size_t b = 0; b < z.rows(); ++b) std::copy(z.row(b).begin(), z.row(b).end(), all.row(b).begin());
  for (std::size_t q = 0; q < queue_.size(); ++q) {
    std::copy(queue_[q].begin(), queue_[q].end(), all.row(z.rows() + q).begin());
  }
  return codes_from_scores(prototype_scores(all, bank_), config_.sinkhorn_eps, config_.sinkhorn_iters, z.rows());
}

template <class Real>
StepResult SmnTrainer<Real>::step() {
  if (done()) throw std::logic_error("trainer already finished");
  if (batch_in_epoch_ == 0) begin_epoch();
  const std::size_t begin = batch_in_epoch_ * config_.batch_size;
  const std::size_t end = std::min(begin + config_.batch_size, order_.size());
  const std::span<const std::size_t> idx(order_.data() + begin, end - begin);
  const auto views = make_views_for(data_, idx, config_.aug, config_.seed, epoch_);

  const std::size_t total = total_steps();
  const double lr = scheduled_lr(config_, config_.lr, global_step_, total, true);
  const double head_lr = scheduled_lr(config_, config_.head_lr, global_step_, total, false);

  StepResult r{epoch_, global_step_, 0.0, lr};
  try {
    const auto rec_t = forward(model_, views.t);
    const auto rec_s = forward(model_, views.s);
    std::vector<Real> norm_t, norm_s;
    const auto z_t = l2_normalize_rows(rec_t.output(), &norm_t);
    const auto z_s = l2_normalize_rows(rec_s.output(), &norm_s);

    const bool use_queue = config_.queue_start_epoch >= 0 && config_.queue_length > 0 &&
                           epoch_ >= static_cast<std::size_t>(config_.queue_start_epoch) && !queue_.empty();
    const auto loss = use_queue ? swav_loss_with_targets(z_t, z_s, bank_, config_.temperature,
                                                         codes_with_queue(z_t), codes_with_queue(z_s))
                                : swav_loss(z_t, z_s, bank_, config_.temperature, config_.sinkhorn_eps,
                                            config_.sinkhorn_iters);
    if (!std::isfinite(loss.loss)) throw NumericError("non-finite self-supervised loss");
    r.loss = loss.loss;

    auto grads = backward(model_, rec_t, l2_normalize_backward<Real>(z_t, norm_t, loss.grad_z_t));
    add_into(grads, backward(model_, rec_s, l2_normalize_backward<Real>(z_s, norm_s, loss.grad_z_s)));
    apply_update(model_, grads, opt_, SgdParams{lr, config_.momentum, config_.weight_decay},
                 SgdParams{head_lr, config_.head_momentum, 0.0});
    sgd_step<Real>(bank_.vectors.span(), loss.grad_prototypes.span(), proto_velocity_,
                   SgdParams{head_lr, config_.head_momentum, 0.0});
    bank_.normalize();

    if (config_.queue_start_epoch >= 0 && config_.queue_length > 0) {
      for (const auto* z : {&z_t, &z_s}) {
        for (std::size_t b = 0; b < z->rows(); ++b) queue_.emplace_back(z->row(b).begin(), z->row(b).end());
      }
      while (queue_.size() > config_.queue_length) queue_.pop_front();
    }
  } catch (const NumericError& e) {
    spdlog::warn("train_smn: diverged at epoch {} step {} ({}); restoring epoch-start state", epoch_,
                 global_step_, e.what());
    restore(last_good_);
    diverged_ = true;
    return r;
  }

  epoch_loss_sum_ += r.loss * static_cast<double>(idx.size());
  epoch_rows_ += idx.size();
  ++global_step_;
  if (++batch_in_epoch_ == steps_per_epoch_) {
    epochs_.push_back({epoch_, epoch_loss_sum_ / static_cast<double>(epoch_rows_), lr, active_fraction(model_)});
    ++epoch_;
    batch_in_epoch_ = 0;
  }
  return r;
}

template <class Real>
SmnResult<Real> SmnTrainer<Real>::run() {
  while (!done()) step();
  return SmnResult<Real>{epochs_, bank_, diverged_};
}

template <class Real>
SmnResult<Real> train_smn(SmallModel<Real>& model, const Tensor<Real>& data, const TrainConfig& config) {
  SmnTrainer<Real> trainer(model, data, config);
  return trainer.run();
}

void write_training_log(std::ostream& os, const std::vector<EpochSummary>& log) {
  for (const auto& e : log) {
    nlohmann::json j = {{"epoch", e.epoch}, {"loss", e.loss}, {"lr", e.lr}, {"active_fraction", e.active_fraction}};
    os << j.dump() << '\n';
  }
}

#define SMN_INSTANTIATE(Real)                                                                       \
  template Tensor<Real> augment<Real>(const Tensor<Real>&, const AugConfig&, Rng&);                 \
  template ViewPair<Real> make_views<Real>(const Tensor<Real>&, const AugConfig&, Rng&);            \
  template ViewPair<Real> make_views_for<Real>(const Tensor<Real>&, std::span<const std::size_t>,   \
                                               const AugConfig&, std::uint64_t, std::size_t);       \
  template struct PrototypeBank<Real>;                                                              \
  template SwavLoss<Real> swav_loss<Real>(const Tensor<Real>&, const Tensor<Real>&,                 \
                                          const PrototypeBank<Real>&, double, double, std::size_t); \
  template SwavLoss<Real> swav_loss_with_targets<Real>(const Tensor<Real>&, const Tensor<Real>&,    \
                                                       const PrototypeBank<Real>&, double,          \
                                                       const Matrix&, const Matrix&);               \
  template Tensor<Real> l2_normalize_rows<Real>(const Tensor<Real>&, std::vector<Real>*);          \
  template Tensor<Real> l2_normalize_backward<Real>(const Tensor<Real>&, std::span<const Real>,    \
                                                    const Tensor<Real>&);                           \
  template class SmnTrainer<Real>;                                                                  \
  template SmnResult<Real> train_smn<Real>(SmallModel<Real>&, const Tensor<Real>&, const TrainConfig&);

SMN_INSTANTIATE(float)
SMN_INSTANTIATE(double)
#undef SMN_INSTANTIATE

}  // namespace smn
