// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Hyperparameter transforms that leave the mask trajectory unchanged, and
// the machinery that checks them: an exact rational-arithmetic oracle and
// lockstep floating-point paired runs.
//
// translate(a): S0 += a, mu += a. Exact only without weight decay.
// scale(c):     S0, mu and lr all multiplied by c. Scores then stay exactly
//               c times the baseline scores.
// scale_with_decay(c): scale(c) and weight decay divided by c.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "smn/config.hpp"
#include "smn/tensor.hpp"

namespace smn {

enum class TransformKind { translate, scale, scale_with_decay };

struct ConfigTransform {
  TransformKind kind = TransformKind::translate;
  double value = 0.0;

  static ConfigTransform translate(double a) { return {TransformKind::translate, a}; }
  static ConfigTransform scale(double c) { return {TransformKind::scale, c}; }
  static ConfigTransform scale_with_decay(double c) { return {TransformKind::scale_with_decay, c}; }

  ConfigTransform inverse() const;
  std::string describe() const;
};

/// Scores under the transformed config equal mult * baseline + add.
struct AffineScoreMap {
  double mult = 1.0;
  double add = 0.0;
};

AffineScoreMap score_map(const std::vector<ConfigTransform>& chain);

/// Applies the chain left to right. Throws ConfigError for translate with
/// nonzero weight decay, or scale by a non-positive factor.
TrainConfig equivalent_config(const TrainConfig& config, const ConfigTransform& t);
TrainConfig equivalent_config(const TrainConfig& config, const std::vector<ConfigTransform>& chain);

/// Shifts S0 and mu without the weight-decay check (counterexample runs).
TrainConfig translated_unchecked(const TrainConfig& config, double a);

/// Quadratic regression on theta * M for a single masked vector, no alpha
/// rescaling, so every quantity stays rational. Data are small integers
/// divided by `denominator`.
struct ToyProblem {
  std::size_t params = 8;
  std::size_t samples = 16;
  std::size_t batch = 4;
  std::int64_t denominator = 10;
  std::uint64_t seed = 0;
};

struct OracleOptions {
  bool momentum = false;         // use config momentum instead of plain SGD
  std::size_t max_bits = 1 << 20;  // per numerator / denominator
};

struct OracleVerdict {
  std::size_t steps = 0;
  bool masks_identical = false;
  std::optional<std::size_t> first_mismatch;
  bool scores_exact = false;  // S_b == mult * S_a + add at every step
  AffineScoreMap map;
  std::size_t mask_changes = 0;  // flips along run a
  std::size_t max_bits_seen = 0;
  std::vector<std::vector<std::uint8_t>> masks_a;  // after each step, index 0 = initial
  std::vector<std::vector<std::uint8_t>> masks_b;

  nlohmann::json to_json() const;
};

class RationalOverflow : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Runs both configs in exact rational arithmetic. The score map is inferred
/// from the pair: mult = lr_b / lr_a, add = S0_b - mult * S0_a. Config values
/// are read as the decimal rationals of their shortest printed form.
OracleVerdict rational_oracle(const ToyProblem& toy, const TrainConfig& a, const TrainConfig& b, std::size_t steps,
                              const OracleOptions& options = {});

/// Desk problem for float paired runs: a masked MLP with a trainable head over
/// labeled features, trained in lockstep.
struct PairedProblem {
  Matrix features;
  std::vector<int> labels;
  std::size_t classes = 0;
  std::vector<std::size_t> dims;  // backbone layer widths, input first
  std::uint64_t model_seed = 0;
};

struct PairedRunResult {
  std::string transform;
  std::vector<double> agreement;  // per step, index 0 = before training
  std::vector<double> loss_a;     // per epoch
  std::vector<double> loss_b;
  double sparsity_a = 0.0;
  double sparsity_b = 0.0;
  double min_agreement = 1.0;
  std::optional<std::size_t> first_divergence_step;
  std::size_t steps = 0;
  std::size_t steps_per_epoch = 0;

  double final_loss_rel_diff() const;
  /// Agreement after the last step of epoch `epoch` (1-based).
  double agreement_at_epoch(std::size_t epoch) const;
  nlohmann::json to_json() const;
  void write_loss_csv(std::ostream& os) const;
};

/// Trains both configs from the same initial model, step by step, comparing
/// full-network masks after every update. Always runs in f64.
PairedRunResult run_paired(const TrainConfig& a, const TrainConfig& b, const PairedProblem& problem,
                           const std::string& label = "");

/// Pair (config with weight decay gamma) vs. (same, translated by a).
PairedRunResult weight_decay_counterexample(const TrainConfig& config, double gamma, double a,
                                            const PairedProblem& problem);

}  // namespace smn
