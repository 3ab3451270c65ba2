// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Inner-loop arithmetic kernels. A scalar reference implementation is always
// present; an AVX2+FMA variant is compiled in on x86-64 and selected at runtime
// when the CPU supports it. The selection is made once per process and can be
// forced with SMN_KERNEL=scalar|avx2.
//
// Every variant uses a fixed reduction order, so a given variant is
// bit-reproducible run to run. Variants are NOT bit-identical to each other
// (lane-parallel accumulation and FMA contraction round differently).

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace smn::kernels {

struct KernelTable {
  std::string_view name;

  float (*dot_f32)(const float* a, const float* b, std::size_t n);
  double (*dot_f64)(const double* a, const double* b, std::size_t n);

  // y += alpha * x
  void (*axpy_f32)(float alpha, const float* x, float* y, std::size_t n);
  void (*axpy_f64)(double alpha, const double* x, double* y, std::size_t n);

  // out[i] = mask[i] ? x[i] * scale : 0
  void (*masked_scale_f32)(const float* x, const std::uint8_t* mask, float scale, float* out,
                           std::size_t n);
  void (*masked_scale_f64)(const double* x, const std::uint8_t* mask, double scale,
                           double* out, std::size_t n);

  // out[i] = a[i] * b[i] * scale
  void (*mul_scale_f32)(const float* a, const float* b, float scale, float* out, std::size_t n);
  void (*mul_scale_f64)(const double* a, const double* b, double scale, double* out,
                        std::size_t n);
};

const KernelTable& scalar_kernels();

/// nullptr when the variant was not compiled in or the CPU lacks AVX2/FMA.
const KernelTable* avx2_kernels();

/// Process-wide selection (first call decides).
const KernelTable& active();

template <class Real>
inline Real dot(std::span<const Real> a, std::span<const Real> b) {
  if constexpr (sizeof(Real) == 4) {
    return active().dot_f32(a.data(), b.data(), a.size());
  } else {
    return active().dot_f64(a.data(), b.data(), a.size());
  }
}

template <class Real>
inline void axpy(Real alpha, std::span<const Real> x, std::span<Real> y) {
  if constexpr (sizeof(Real) == 4) {
    active().axpy_f32(alpha, x.data(), y.data(), x.size());
  } else {
    active().axpy_f64(alpha, x.data(), y.data(), x.size());
  }
}

template <class Real>
inline void masked_scale(std::span<const Real> x, std::span<const std::uint8_t> mask, Real scale,
                         std::span<Real> out) {
  if constexpr (sizeof(Real) == 4) {
    active().masked_scale_f32(x.data(), mask.data(), scale, out.data(), x.size());
  } else {
    active().masked_scale_f64(x.data(), mask.data(), scale, out.data(), x.size());
  }
}

template <class Real>
inline void mul_scale(std::span<const Real> a, std::span<const Real> b, Real scale,
                      std::span<Real> out) {
  if constexpr (sizeof(Real) == 4) {
    active().mul_scale_f32(a.data(), b.data(), scale, out.data(), a.size());
  } else {
    active().mul_scale_f64(a.data(), b.data(), scale, out.data(), a.size());
  }
}

}  // namespace smn::kernels
