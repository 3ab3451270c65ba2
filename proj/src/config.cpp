// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include "smn/config.hpp"

namespace smn {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (!(sinkhorn_eps > 0.0)) throw ConfigError("sinkhorn_eps must be > 0");
  if (sinkhorn_iters < 1) throw ConfigError("sinkhorn_iters must be >= 1");
  if (warmup_fraction < 0.0 || warmup_fraction > 1.0) {
    throw ConfigError("warmup_fraction must be in [0, 1]");
  }
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (prototype_count < 1) throw ConfigError("prototype_count must be >= 1");
  if (aug.dropout_prob < 0.0 || aug.dropout_prob >= 1.0) {
    throw ConfigError("aug.dropout_prob must be in [0, 1)");
  }
  const auto& f = freeze;
  if (f.policy != "none" && f.policy != "random" && f.policy != "max_magnitude" && f.policy != "layer_subset") {
    throw ConfigError("freeze.policy must be none, random, max_magnitude or layer_subset, got '" + f.policy + "'");
  }
  if (f.policy == "random" && !(f.p >= 0.0 && f.p < 1.0)) throw ConfigError("freeze.p must be in [0, 1)");
  if (f.policy == "max_magnitude" && !(f.fraction > 0.0 && f.fraction <= 1.0)) {
    throw ConfigError("freeze.fraction must be in (0, 1]");
  }
  if (f.policy == "layer_subset" && f.layers.empty()) throw ConfigError("freeze.layers must not be empty");
}

void to_json(nlohmann::json& j, const FreezeConfig& c) {
  j = {{"policy", c.policy}, {"p", c.p}, {"fraction", c.fraction}, {"layers", c.layers}};
}

void from_json(const nlohmann::json& j, FreezeConfig& c) {
  if (!j.is_object()) throw ConfigError("freeze config must be a JSON object");
  read_json_field(j, "policy", c.policy);
  read_json_field(j, "p", c.p);
  read_json_field(j, "fraction", c.fraction);
  read_json_field(j, "layers", c.layers);
}

Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ConfigError("precision must be f32 or f64, got '" + s + "'");
}

void to_json(nlohmann::json& j, const AugConfig& c) {
  j = {{"noise_sigma", c.noise_sigma}, {"dropout_prob", c.dropout_prob},
       {"scale_jitter", c.scale_jitter}, {"image_side", c.image_side},
       {"crop_min", c.crop_min},         {"hflip", c.hflip}};
}

void from_json(const nlohmann::json& j, AugConfig& c) {
  read_json_field(j, "noise_sigma", c.noise_sigma);
  read_json_field(j, "dropout_prob", c.dropout_prob);
  read_json_field(j, "scale_jitter", c.scale_jitter);
  read_json_field(j, "image_side", c.image_side);
  read_json_field(j, "crop_min", c.crop_min);
  read_json_field(j, "hflip", c.hflip);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"momentum", c.momentum},
       {"weight_decay", c.weight_decay},
       {"threshold", c.threshold},
       {"score_init", c.score_init},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"schedule", c.schedule == LrSchedule::cosine ? "cosine" : "constant"},
       {"warmup_fraction", c.warmup_fraction},
       {"head_lr", c.head_lr},
       {"head_momentum", c.head_momentum},
       {"temperature", c.temperature},
       {"sinkhorn_eps", c.sinkhorn_eps},
       {"sinkhorn_iters", c.sinkhorn_iters},
       {"prototype_count", c.prototype_count},
       {"projection_dim", c.projection_dim},
       {"queue_start_epoch", c.queue_start_epoch},
       {"queue_length", c.queue_length},
       {"aug", c.aug},
       {"freeze", c.freeze},
       {"precision", to_string(c.precision)}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  read_json_field(j, "lr", c.lr);
  read_json_field(j, "momentum", c.momentum);
  read_json_field(j, "weight_decay", c.weight_decay);
  read_json_field(j, "threshold", c.threshold);
  read_json_field(j, "score_init", c.score_init);
  read_json_field(j, "epochs", c.epochs);
  read_json_field(j, "batch_size", c.batch_size);
  read_json_field(j, "seed", c.seed);
  if (auto it = j.find("schedule"); it != j.end()) {
    const auto s = it->get<std::string>();
    if (s == "cosine") {
      c.schedule = LrSchedule::cosine;
    } else if (s == "constant") {
      c.schedule = LrSchedule::constant;
    } else {
      throw ConfigError("schedule must be cosine or constant, got '" + s + "'");
    }
  }
  read_json_field(j, "warmup_fraction", c.warmup_fraction);
  read_json_field(j, "head_lr", c.head_lr);
  read_json_field(j, "head_momentum", c.head_momentum);
  read_json_field(j, "temperature", c.temperature);
  read_json_field(j, "sinkhorn_eps", c.sinkhorn_eps);
  read_json_field(j, "sinkhorn_iters", c.sinkhorn_iters);
  read_json_field(j, "prototype_count", c.prototype_count);
  read_json_field(j, "projection_dim", c.projection_dim);
  read_json_field(j, "queue_start_epoch", c.queue_start_epoch);
  read_json_field(j, "queue_length", c.queue_length);
  read_json_field(j, "aug", c.aug);
  read_json_field(j, "freeze", c.freeze);
  if (auto it = j.find("precision"); it != j.end()) c.precision = parse_precision(it->get<std::string>());
}

}  // namespace smn
