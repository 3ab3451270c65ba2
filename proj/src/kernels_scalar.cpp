// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include "smn/kernels.hpp"

namespace smn::kernels {
namespace {

template <class Real>
Real dot_ref(const Real* a, const Real* b, std::size_t n) {
  Real acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <class Real>
void axpy_ref(Real alpha, const Real* x, Real* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class Real>
void masked_scale_ref(const Real* x, const std::uint8_t* mask, Real scale, Real* out,
                      std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = mask[i] ? x[i] * scale : Real(0);
}

template <class Real>
void mul_scale_ref(const Real* a, const Real* b, Real scale, Real* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i] * scale;
}

}  // namespace

const KernelTable& scalar_kernels() {
  static const KernelTable table{
      "scalar",
      &dot_ref<float>,
      &dot_ref<double>,
      &axpy_ref<float>,
      &axpy_ref<double>,
      &masked_scale_ref<float>,
      &masked_scale_ref<double>,
      &mul_scale_ref<float>,
      &mul_scale_ref<double>,
  };
  return table;
}

}  // namespace smn::kernels
