// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Deterministic synthetic datasets standing in for real benchmarks.
//
// blobs:          isotropic Gaussian classes around random means.
// moons:          two interleaved half circles, embedded in `dim` dims.
// glyphs:         image_side^2 images of per-class stroke templates with
//                 random one-pixel translations and pixel noise.
// shifted-blobs:  features split into group A (the first `shift_dims`) and
//                 group B. Class means are drawn separately per group so
//                 either group alone separates the classes. The "target"
//                 domain replaces a `shift` share of the A signal with
//                 per-sample nuisance of scale `nuisance`:
//                   x_A = (1 - shift) m_A + noise + shift * nuisance * eta.
//                 With groups > 0, classes are nested in `groups` well
//                 separated super-clusters.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "smn/tensor.hpp"

namespace smn {

struct DatasetSpec {
  std::string kind = "blobs";
  std::size_t classes = 10;
  std::size_t per_class = 200;
  std::size_t dim = 32;
  double separation = 4.0;  // typical distance between class means, in units of noise
  double noise = 1.0;
  double test_fraction = 0.25;
  // shifted-blobs
  std::string domain = "target";  // "source" or "target"
  std::size_t shift_dims = 16;
  double shift = 0.0;
  double nuisance = 3.0;
  std::size_t groups = 0;
  double group_separation = 12.0;
  // glyphs
  std::size_t image_side = 8;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

struct Dataset {
  DatasetSpec spec;
  Matrix x;
  std::vector<int> y;
  std::vector<int> group;  // super-cluster per row (groups > 0), else empty
  std::size_t classes = 0;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;

  std::size_t dim() const { return x.cols(); }
  Matrix train_x() const { return x.gather_rows(train); }
  Matrix test_x() const { return x.gather_rows(test); }
  std::vector<int> train_y() const;
  std::vector<int> test_y() const;
};

/// Fully determined by the spec; class means depend only on (kind, seed and
/// the shape parameters), so source and target share them.
Dataset gen_dataset(const DatasetSpec& spec);

/// Header `split,label,group,f0..f{d-1}`.
void write_dataset_csv(std::ostream& os, const Dataset& d);

}  // namespace smn
