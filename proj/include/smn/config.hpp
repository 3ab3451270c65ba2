// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"

#include "smn/tensor.hpp"

namespace smn {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Reads `key` into `out` when present and non-null. Negative numbers for
/// unsigned fields raise ConfigError instead of wrapping.
template <class T>
void read_json_field(const nlohmann::json& j, const char* key, T& out) {
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) return;
  if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
    if (it->is_number_integer() && it->template get<std::int64_t>() < 0) {
      throw ConfigError(std::string(key) + " must be non-negative, got " + it->dump());
    }
    if (it->is_number_float()) throw ConfigError(std::string(key) + " must be an integer, got " + it->dump());
  }
  out = it->template get<T>();
}

enum class LrSchedule { constant, cosine };

struct AugConfig {
  double noise_sigma = 0.0;
  double dropout_prob = 0.0;   // each coordinate zeroed independently
  double scale_jitter = 0.0;   // global scale drawn from [1 - j, 1 + j]
  // Glyph images only (image_side > 0): square side of the flattened image.
  std::size_t image_side = 0;
  double crop_min = 1.0;       // random crop side fraction in [crop_min, 1], resized back
  bool hflip = false;

  bool identity() const {
    return noise_sigma == 0.0 && dropout_prob == 0.0 && scale_jitter == 0.0 &&
           (image_side == 0 || (crop_min >= 1.0 && !hflip));
  }
};

/// Which mask scores may train; the others keep their initial value.
struct FreezeConfig {
  std::string policy = "none";      // none | random | max_magnitude | layer_subset
  double p = 0.0;                   // random: per-score freeze probability
  double fraction = 1.0;            // max_magnitude: trainable share, largest |weight| first
  std::vector<std::size_t> layers;  // layer_subset: trainable layer indices

  bool none() const { return policy == "none"; }
};

/// Training hyperparameters. `lr`, `momentum`, `weight_decay`, `threshold`
/// and `score_init` drive the score (mask) optimizer in masking runs and the
/// weight optimizer in full fine-tuning runs.
struct TrainConfig {
  double lr = 50.0;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double threshold = 0.0;
  double score_init = 1.0;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  LrSchedule schedule = LrSchedule::cosine;
  double warmup_fraction = 0.0;

  // Heads, projections and prototypes (never masked).
  double head_lr = 0.15;
  double head_momentum = 0.9;

  // Self-supervised objective.
  double temperature = 0.1;
  double sinkhorn_eps = 0.05;
  std::size_t sinkhorn_iters = 3;
  std::size_t prototype_count = 500;
  std::size_t projection_dim = 0;  // 0 = embedding dim
  long queue_start_epoch = -1;     // < 0 disables the queue
  std::size_t queue_length = 0;
  AugConfig aug;
  FreezeConfig freeze;

  Precision precision = Precision::f32;

  void validate() const;
};

void to_json(nlohmann::json& j, const AugConfig& c);
void from_json(const nlohmann::json& j, AugConfig& c);
void to_json(nlohmann::json& j, const FreezeConfig& c);
void from_json(const nlohmann::json& j, FreezeConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

Precision parse_precision(const std::string& s);

}  // namespace smn
