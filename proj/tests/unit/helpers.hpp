// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <vector>

#include "smn/rng.hpp"
#include "smn/tensor.hpp"

namespace smn::test {

template <class Real = double>
Tensor<Real> random_tensor(std::size_t rows, std::size_t cols, Rng& rng, double sd = 1.0) {
  Tensor<Real> t(rows, cols);
  for (auto& v : t.values()) v = static_cast<Real>(rng.normal(0.0, sd));
  return t;
}

inline double rel_err(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace smn::test
