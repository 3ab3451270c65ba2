// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// End-to-end drivers: backbone pretraining on a labeled source domain and
// per-method adaptation + evaluation on a target domain.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "smn/cascade.hpp"
#include "smn/config.hpp"
#include "smn/data.hpp"
#include "smn/eval.hpp"
#include "smn/model.hpp"
#include "smn/training.hpp"

namespace smn {

struct BackboneSpec {
  std::vector<std::size_t> hidden = {128};
  std::size_t embedding_dim = 64;
  TrainConfig pretrain = default_pretrain_config();
  std::uint64_t seed = 0;

  static TrainConfig default_pretrain_config();
};

void to_json(nlohmann::json& j, const BackboneSpec& s);
void from_json(const nlohmann::json& j, BackboneSpec& s);

/// Supervised training of every backbone weight on the source training split,
/// then the head is dropped. Throws NumericError on divergence.
template <class Real>
SmallModel<Real> pretrain_backbone(const Dataset& source, const BackboneSpec& spec, double* train_accuracy = nullptr);

enum class Method { knn, fft, mask_supervised, smn, smn_cascade, topk, progressive_topk };

Method parse_method(const std::string& s);
std::string to_string(Method m);

struct EvalSpec {
  std::size_t knn_k = 0;  // 0 = default_knn_k(train size)
  double knn_tau = 0.1;
  ProbeConfig probe;
  std::vector<double> lowshot_fractions = {0.01, 0.02, 0.04, 0.10};
};

void to_json(nlohmann::json& j, const EvalSpec& s);
void from_json(const nlohmann::json& j, EvalSpec& s);

struct ExperimentConfig {
  DatasetSpec source;
  DatasetSpec target;
  BackboneSpec backbone;
  Method method = Method::knn;
  TrainConfig train;       // score optimizer (masking methods) or weight optimizer (fft)
  double topk_fraction = 0.5;
  CascadeConfig cascade;
  EvalSpec eval;
  std::filesystem::path out_dir;

  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Parses JSON text and applies `a.b.c=value` overrides (value parsed as JSON,
/// falling back to a string).
nlohmann::json apply_overrides(nlohmann::json j, const std::vector<std::string>& overrides);

struct ExperimentReport {
  std::string method;
  std::optional<double> knn_accuracy;      // target test, embeddings
  std::optional<double> probe_accuracy;    // target test, linear probe
  std::optional<double> classifier_accuracy;  // trained head (supervised methods)
  std::optional<double> found_sparsity;
  std::optional<double> conditional_knn_accuracy;  // cascade only
  std::optional<double> dispatcher_knn_accuracy;   // cascade only
  std::optional<std::uint64_t> conditional_rows_forwarded;
  std::vector<std::string> artifacts;
  std::vector<std::string> errors;  // "stage: message"

  nlohmann::json to_json() const;
};

/// Sparsity table: `layer,id,n_params,n_active,fraction` plus an `all` row.
void write_sparsity_csv(std::ostream& os, const std::vector<BinaryMask>& masks);

/// Embeddings of a dataset split under the model (double precision output).
template <class Real>
EmbeddingSet split_embeddings(const SmallModel<Real>& model, const Dataset& d, bool test);

/// Runs one method end to end. Writes into config.out_dir (if non-empty):
/// summary.json, accuracy.csv, and per method masks.mask / sparsity.csv /
/// storage.json / training_log.jsonl / bundle/.
template <class Real>
ExperimentReport run_experiment(const ExperimentConfig& config, const SmallModel<Real>* pretrained = nullptr);

struct LowshotReport {
  std::vector<AccuracyRow> rows;  // methods "probe" (frozen backbone) and "smn+probe"
  std::vector<std::string> errors;
};

/// Trains the SMN once on every unlabeled target training row, then fits a
/// linear probe per fraction on stratified labeled subsets of the frozen and
/// the masked embeddings. Writes accuracy.csv and training_log.jsonl into
/// config.out_dir if non-empty.
template <class Real>
LowshotReport run_lowshot(const ExperimentConfig& config, const SmallModel<Real>* pretrained = nullptr);

/// Default output root: $SMN_OUT_DIR or "smn_out".
std::filesystem::path default_out_root();

}  // namespace smn
