// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Label-consuming evaluators over frozen embeddings. Everything here runs in
// double regardless of the precision the embeddings were produced in.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "smn/tensor.hpp"

namespace smn {

struct EmbeddingSet {
  Matrix embeddings;
  std::vector<int> labels;
  std::string split = "train";

  /// Throws DimensionError on a row/label count mismatch, NumericError on
  /// non-finite entries.
  void validate() const;
  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return embeddings.cols(); }
};

template <class Real>
EmbeddingSet make_embedding_set(const Tensor<Real>& emb, std::vector<int> labels, std::string split = "train") {
  EmbeddingSet s{emb.template cast<double>(), std::move(labels), std::move(split)};
  s.validate();
  return s;
}

/// min(200, n/5), never below 1.
std::size_t default_knn_k(std::size_t train_size);

/// Cosine-similarity k-NN. Neighbors are ranked by similarity, ties to the
/// lower training index; each votes exp(sim / tau) for its label; the class
/// with the largest total wins, ties to the lower class id. k is clamped to
/// the training size.
std::vector<int> knn_classify(const EmbeddingSet& train, const Matrix& queries, std::size_t k, double tau);

double knn_accuracy(const EmbeddingSet& train, const EmbeddingSet& test, std::size_t k, double tau);

struct ProbeConfig {
  std::size_t max_iters = 1000;
  double grad_tol = 1e-5;
  double l2 = 0.0;
  bool standardize = true;
};

struct ProbeModel {
  Matrix weight;  // C x d
  std::vector<double> bias;
  std::vector<double> feature_mean;   // empty when not standardized
  std::vector<double> feature_scale;  // multiply after centering
  std::size_t num_classes() const { return bias.size(); }

  Matrix logits(const Matrix& x) const;
  std::vector<int> predict(const Matrix& x) const;
};

struct ProbeResult {
  ProbeModel model;
  double train_accuracy = 0.0;
  std::optional<double> test_accuracy;
  std::size_t iterations = 0;
  double grad_norm = 0.0;
  double loss = 0.0;
};

/// Multinomial logistic regression from zero weights by full-batch gradient
/// descent with Armijo backtracking. Stops when the gradient norm drops below
/// grad_tol or after max_iters steps. Throws std::invalid_argument when fewer
/// than two classes are present.
ProbeResult linear_probe(const EmbeddingSet& train, const EmbeddingSet* test = nullptr,
                         const ProbeConfig& config = {});

/// Per-class sample of round_half_up(fraction * class_count) indices. Returns
/// nullopt if some present class would get zero samples.
std::optional<std::vector<std::size_t>> stratified_subsample(const std::vector<int>& labels, double fraction,
                                                             std::uint64_t seed);

struct AccuracyRow {
  std::string method;
  double fraction = 1.0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
};

struct LowshotVariant {
  std::string name;
  EmbeddingSet train;
  EmbeddingSet test;
};

/// For each fraction, draws one label subset (shared by all variants) and
/// trains a probe per variant on it. Fractions that cannot cover every class
/// are skipped with a warning.
std::vector<AccuracyRow> lowshot_eval(const std::vector<LowshotVariant>& variants,
                                      const std::vector<double>& fractions, std::uint64_t seed,
                                      const ProbeConfig& config = {});

/// Header `method,fraction,seed,accuracy`, one row per entry.
void write_accuracy_csv(std::ostream& os, const std::vector<AccuracyRow>& rows);

}  // namespace smn
