// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Model cascade: a dispatcher mask, a mixture router over its embeddings,
// per-cluster expert masks, and whitened reduction of the concatenated
// embeddings back to the dispatcher's dimension.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "smn/config.hpp"
#include "smn/mask_io.hpp"
#include "smn/model.hpp"

namespace smn {

class RankError : public std::invalid_argument {
 public:
  RankError(const std::string& what, std::size_t achievable)
      : std::invalid_argument(what), achievable_(achievable) {}
  std::size_t achievable_rank() const { return achievable_; }

 private:
  std::size_t achievable_;
};

struct PCAModel {
  std::vector<double> mean;      // c, one per input feature
  Matrix components;             // V, input_dim x F, orthonormal columns
  std::vector<double> singular;  // S, descending

  std::size_t input_dim() const { return mean.size(); }
  std::size_t output_dim() const { return singular.size(); }

  /// Vᵀ(x - c) per row.
  Matrix project(const Matrix& x) const;
};

/// SVD of the centered data. Throws RankError if the centered data has rank
/// below n_components, std::invalid_argument if n_components exceeds
/// min(rows - 1, cols).
PCAModel pca_fit(const Matrix& x, std::size_t n_components);

/// diag(1/S) Vᵀ (x - c) per row. Components whose singular value is below
/// 1e-10 are dropped with a warning.
Matrix whiten_reduce(const PCAModel& pca, const Matrix& e_bar);

struct GaussianMixture {
  Matrix means;      // K x p
  Matrix variances;  // K x p, diagonal covariances
  std::vector<double> weights;

  std::size_t components() const { return weights.size(); }
  /// log(w_k) + log N(x | mu_k, diag var_k) for every k.
  std::vector<double> log_joint(std::span<const double> x) const;
};

enum class RouteRule { posterior, euclidean };

struct RouterModel {
  PCAModel pca;
  GaussianMixture gmm;
  RouteRule rule = RouteRule::posterior;
  std::size_t em_iterations = 0;
  double log_likelihood = 0.0;
};

struct RouterOptions {
  std::size_t max_iters = 500;
  double tol = 1e-6;  // on mean log-likelihood improvement
  double var_floor = 1e-6;
  std::size_t restarts = 4;  // independent k-means++ seedings; best final log-likelihood wins
  RouteRule rule = RouteRule::posterior;
};

/// EM fit of a diagonal mixture on the pca_dims leading components of the
/// embeddings, initialized by k-means++ from `seed`. An emptied component is
/// re-seeded at the point farthest from its mean, at most 3 times per restart.
RouterModel fit_router(const Matrix& embeddings, std::size_t k, std::size_t pca_dims, std::uint64_t seed,
                       const RouterOptions& options = {});

/// Argmax posterior (or nearest mean under RouteRule::euclidean) in the
/// router's PCA space; ties go to the lower index.
std::size_t route(const RouterModel& router, std::span<const double> embedding);
std::vector<std::size_t> route_all(const RouterModel& router, const Matrix& embeddings);

/// Posterior responsibilities, one row per embedding.
Matrix responsibilities(const RouterModel& router, const Matrix& embeddings);

/// round_half_up(ref_size / dataset_size * ref_epochs).
std::size_t expert_epochs(std::size_t dataset_size, std::size_t ref_size = 50000, std::size_t ref_epochs = 150);

/// [D, E_1, ..., E_K].
std::vector<double> concat_unconditional(std::span<const double> dispatcher,
                                         const std::vector<std::span<const double>>& experts);

/// [D, 0, ..., E at block i, ..., 0], same length as the unconditional form.
std::vector<double> concat_conditional(std::span<const double> dispatcher, std::span<const double> expert,
                                       std::size_t index, std::size_t k);

struct CascadeConfig {
  TrainConfig smn;                 // dispatcher training
  std::size_t k = 5;
  std::size_t pca_dims = 20;
  RouteRule route_rule = RouteRule::posterior;
  // Expert epochs follow expert_epochs(|D_k|, ref_size, ref_epochs). A zero
  // ref_size means "the full training set size".
  std::size_t ref_size = 0;
  std::size_t ref_epochs = 0;      // zero means smn.epochs
  std::size_t max_expert_epochs = 0;  // zero means no cap

  void validate() const;
};

void to_json(nlohmann::json& j, const CascadeConfig& c);
void from_json(const nlohmann::json& j, CascadeConfig& c);

struct CascadeBundle {
  MaskSet dispatcher;
  std::vector<MaskSet> experts;
  RouterModel router;
  PCAModel whitening;
  std::size_t embedding_dim = 0;  // F
  std::vector<std::size_t> cluster_sizes;
  std::vector<std::size_t> trained_from;  // expert k was trained on cluster trained_from[k]

  std::size_t k() const { return experts.size(); }
};

/// Adapts a dispatcher with the label-free objective, routes the training
/// data, trains one expert per cluster from the dispatcher's final scores,
/// and fits the whitening on unconditional concatenations. The backbone is
/// copied; its own state is untouched.
template <class Real>
CascadeBundle train_cascade(const SmallModel<Real>& backbone, const Tensor<Real>& data, const CascadeConfig& config);

enum class CascadeMode { conditional, unconditional };

struct CascadeEmbedding {
  Matrix e_bar;    // concatenations, N x (K+1)F
  Matrix e_star;   // whitened, N x F
  std::vector<std::size_t> routes;
  std::uint64_t backbone_rows_forwarded = 0;  // from the model's own counter
};

template <class Real>
CascadeEmbedding cascade_embed(const CascadeBundle& bundle, const SmallModel<Real>& backbone, const Tensor<Real>& x,
                               CascadeMode mode);

/// Embeddings of x under a fixed mask set on the backbone.
template <class Real>
Tensor<Real> masked_embed(const SmallModel<Real>& backbone, const MaskSet& masks, const Tensor<Real>& x);

struct ClusterCurve {
  std::size_t cluster = 0;
  std::size_t size = 0;
  std::vector<double> shares;      // descending
  std::vector<double> cumulative;  // nondecreasing, ends at 1
};

std::vector<ClusterCurve> cluster_homogeneity(std::span<const std::size_t> assignments,
                                              std::span<const int> labels);

/// Header `cluster,rank,share,cumulative`.
void write_homogeneity_csv(std::ostream& os, const std::vector<ClusterCurve>& curves);

/// dispatcher.mask, expert_<k>.mask, router.json, whitening.bin.
void save_bundle(const std::filesystem::path& dir, const CascadeBundle& bundle);
CascadeBundle load_bundle(const std::filesystem::path& dir);

std::vector<std::uint8_t> encode_whitening(const PCAModel& pca);
PCAModel decode_whitening(std::span<const std::uint8_t> bytes);

/// Raw bits of all mask sets in the bundle ((K+1) x maskable weights).
std::size_t bundle_mask_bits(const CascadeBundle& bundle);

}  // namespace smn
