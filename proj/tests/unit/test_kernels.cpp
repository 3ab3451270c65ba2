// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "smn/kernels.hpp"

using namespace smn;

namespace {

// Lengths straddling every vector-width and tail boundary.
const std::vector<std::size_t> kLengths = {0, 1, 3, 4, 7, 8, 9, 15, 16, 17, 31, 32, 33, 63, 64, 65, 255, 1000};

template <class Real>
std::vector<Real> rand_vec(std::size_t n, Rng& rng) {
  std::vector<Real> v(n);
  for (auto& x : v) x = static_cast<Real>(rng.normal());
  return v;
}

std::vector<std::uint8_t> rand_mask(std::size_t n, Rng& rng) {
  std::vector<std::uint8_t> m(n);
  for (auto& b : m) b = static_cast<std::uint8_t>(rng.below(2));
  return m;
}

// Bound on |dot| rounding: n * eps * sum |a_i b_i|.
template <class Real>
double dot_bound(const std::vector<Real>& a, const std::vector<Real>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(static_cast<double>(a[i]) * b[i]);
  return (static_cast<double>(a.size()) + 1.0) * std::numeric_limits<Real>::epsilon() * s + 1e-300;
}

// Fused and unfused multiply-add differ by at most the product's rounding.
template <class Real>
double axpy_bound(Real alpha, Real x, Real y) {
  return 2.0 * std::numeric_limits<Real>::epsilon() * (std::abs(alpha * x) + std::abs(y)) + 1e-300;
}

template <class Real>
void check_equivalence(const kernels::KernelTable& ref, const kernels::KernelTable& alt) {
  Rng rng(42);
  for (std::size_t n : kLengths) {
    CAPTURE(n);
    const auto a = rand_vec<Real>(n, rng);
    const auto b = rand_vec<Real>(n, rng);
    const auto m = rand_mask(n, rng);
    if constexpr (sizeof(Real) == 4) {
      CHECK(std::abs(ref.dot_f32(a.data(), b.data(), n) - alt.dot_f32(a.data(), b.data(), n)) <= dot_bound(a, b));
      std::vector<Real> y1 = b, y2 = b;
      ref.axpy_f32(0.37f, a.data(), y1.data(), n);
      alt.axpy_f32(0.37f, a.data(), y2.data(), n);
      for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(y1[i] - y2[i]) <= axpy_bound(0.37f, a[i], b[i]));
      std::vector<Real> o1(n), o2(n);
      ref.masked_scale_f32(a.data(), m.data(), 1.7f, o1.data(), n);
      alt.masked_scale_f32(a.data(), m.data(), 1.7f, o2.data(), n);
      CHECK(o1 == o2);
      ref.mul_scale_f32(a.data(), b.data(), 0.5f, o1.data(), n);
      alt.mul_scale_f32(a.data(), b.data(), 0.5f, o2.data(), n);
      CHECK(o1 == o2);
    } else {
      CHECK(std::abs(ref.dot_f64(a.data(), b.data(), n) - alt.dot_f64(a.data(), b.data(), n)) <= dot_bound(a, b));
      std::vector<Real> y1 = b, y2 = b;
      ref.axpy_f64(0.37, a.data(), y1.data(), n);
      alt.axpy_f64(0.37, a.data(), y2.data(), n);
      for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(y1[i] - y2[i]) <= axpy_bound(0.37, a[i], b[i]));
      std::vector<Real> o1(n), o2(n);
      ref.masked_scale_f64(a.data(), m.data(), 1.7, o1.data(), n);
      alt.masked_scale_f64(a.data(), m.data(), 1.7, o2.data(), n);
      CHECK(o1 == o2);
      ref.mul_scale_f64(a.data(), b.data(), 0.5, o1.data(), n);
      alt.mul_scale_f64(a.data(), b.data(), 0.5, o2.data(), n);
      CHECK(o1 == o2);
    }
  }
}

}  // namespace

TEST_CASE("scalar kernels match a naive loop exactly") {
  const auto& k = kernels::scalar_kernels();
  Rng rng(1);
  const auto a = rand_vec<double>(37, rng);
  const auto b = rand_vec<double>(37, rng);
  const auto m = rand_mask(37, rng);
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] * b[i];
  CHECK(k.dot_f64(a.data(), b.data(), a.size()) == d);
  std::vector<double> out(a.size());
  k.masked_scale_f64(a.data(), m.data(), 3.0, out.data(), a.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(out[i] == (m[i] ? a[i] * 3.0 : 0.0));
}

TEST_CASE("avx2 kernels agree with scalar reference") {
  const auto* avx = kernels::avx2_kernels();
  if (!avx) {
    MESSAGE("AVX2 variant unavailable on this CPU; skipped");
    return;
  }
  check_equivalence<float>(kernels::scalar_kernels(), *avx);
  check_equivalence<double>(kernels::scalar_kernels(), *avx);
}

TEST_CASE("each variant is bit-reproducible") {
  Rng rng(7);
  const auto a = rand_vec<float>(1000, rng);
  const auto b = rand_vec<float>(1000, rng);
  for (const auto* k : {&kernels::scalar_kernels(), kernels::avx2_kernels()}) {
    if (!k) continue;
    CHECK(k->dot_f32(a.data(), b.data(), a.size()) == k->dot_f32(a.data(), b.data(), a.size()));
  }
}

TEST_CASE("active table is one of the compiled variants") {
  const auto& act = kernels::active();
  CHECK((act.name == kernels::scalar_kernels().name ||
         (kernels::avx2_kernels() && act.name == kernels::avx2_kernels()->name)));
}
