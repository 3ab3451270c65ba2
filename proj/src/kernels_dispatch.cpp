// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <string_view>

#include <spdlog/spdlog.h>

#include "smn/kernels.hpp"

namespace smn::kernels {

#if defined(SMN_HAVE_AVX2)
const KernelTable& avx2_table();
#endif

const KernelTable* avx2_kernels() {
#if defined(SMN_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
  static const bool supported = [] {
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  }();
  return supported ? &avx2_table() : nullptr;
#else
  return nullptr;
#endif
}

namespace {

const KernelTable& select() {
  const char* forced = std::getenv("SMN_KERNEL");
  const std::string_view want = forced ? forced : "";
  if (want == "scalar") return scalar_kernels();
  const KernelTable* simd = avx2_kernels();
  if (want == "avx2" && simd == nullptr) {
    spdlog::warn("SMN_KERNEL=avx2 requested but unsupported here; using scalar kernels");
  }
  return simd ? *simd : scalar_kernels();
}

}  // namespace

const KernelTable& active() {
  static const KernelTable& table = select();
  return table;
}

}  // namespace smn::kernels
