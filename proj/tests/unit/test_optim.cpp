// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numbers>
#include <vector>

#include "doctest.h"
#include "smn/optim.hpp"
#include "smn/tensor.hpp"

using namespace smn;

TEST_CASE("sgd step with momentum and decay by hand") {
  std::vector<double> p{1.0, -2.0};
  const std::vector<double> g{0.5, 0.25};
  std::vector<double> v{0.1, 0.0};
  sgd_step<double>(p, g, v, {0.1, 0.9, 0.01});
  // v = 0.9 v + g + 0.01 p
  CHECK(v[0] == doctest::Approx(0.09 + 0.5 + 0.01));
  CHECK(v[1] == doctest::Approx(0.25 - 0.02));
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 0.6));
  CHECK(p[1] == doctest::Approx(-2.0 - 0.1 * 0.23));
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  std::vector<float> p{3.0f, 4.0f};
  const std::vector<float> g{1.0f, -1.0f};
  std::vector<float> v(2, 0.0f);
  sgd_step<float>(p, g, v, {0.0, 0.9, 0.0});
  CHECK(p == std::vector<float>{3.0f, 4.0f});
}

TEST_CASE("frozen entries are untouched, velocity included") {
  std::vector<double> p{1.0, 1.0, 1.0};
  const std::vector<double> g{1.0, 1.0, 1.0};
  std::vector<double> v{0.5, 0.5, 0.5};
  const std::vector<std::uint8_t> trainable{1, 0, 1};
  for (int i = 0; i < 10; ++i) sgd_step<double>(p, g, v, {0.1, 0.9, 0.0}, trainable);
  CHECK(p[1] == 1.0);
  CHECK(v[1] == 0.5);
  CHECK(p[0] != 1.0);
}

TEST_CASE("non-finite gradient is reported") {
  std::vector<double> p{1.0, 1.0};
  const std::vector<double> g{0.0, std::nan("")};
  std::vector<double> v(2, 0.0);
  CHECK_THROWS_AS(sgd_step<double>(p, g, v, {0.1, 0.0, 0.0}), NumericError);
}

TEST_CASE("cosine schedule with warmup") {
  CHECK(cosine_warmup_lr(0, 100, 2.0, 0.0) == doctest::Approx(2.0));
  CHECK(cosine_warmup_lr(100, 100, 2.0, 0.0) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(cosine_warmup_lr(50, 100, 2.0, 0.0) == doctest::Approx(1.0));
  // 10 warmup steps: linear ramp, then half cosine over the remaining 90.
  CHECK(cosine_warmup_lr(5, 100, 2.0, 0.1) == doctest::Approx(1.0));
  CHECK(cosine_warmup_lr(10, 100, 2.0, 0.1) == doctest::Approx(2.0));
  CHECK(cosine_warmup_lr(55, 100, 2.0, 0.1) == doctest::Approx(1.0));
  CHECK_THROWS_AS(cosine_warmup_lr(0, 0, 1.0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(cosine_warmup_lr(101, 100, 1.0, 0.0), std::invalid_argument);
  double prev = 1e9;
  for (std::size_t s = 10; s <= 100; ++s) {
    const double lr = cosine_warmup_lr(s, 100, 2.0, 0.1);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("optimizer state buffers are lazily zero-filled") {
  OptimizerState<float> st;
  auto b = st.buffer(2, 4);
  CHECK(b.size() == 4);
  for (float x : b) CHECK(x == 0.0f);
  CHECK(st.slot_count() == 3);
  b[1] = 5.0f;
  CHECK(st.buffer(2, 4)[1] == 5.0f);
}
