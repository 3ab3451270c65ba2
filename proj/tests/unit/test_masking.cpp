// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "smn/linalg.hpp"
#include "smn/masking.hpp"
#include "smn/model.hpp"
#include "smn/training.hpp"

using namespace smn;

TEST_CASE("threshold mask is strict") {
  const std::vector<double> s{0.5, -0.1, 0.0};
  CHECK(threshold_mask<double>(s, 0.0).bits == std::vector<std::uint8_t>{1, 0, 0});
  const std::vector<double> ones(5, 1.0);
  CHECK(threshold_mask<double>(ones, 0.0).active_count() == 5);
  CHECK(threshold_mask<double>(std::vector<double>{2.5}, 0.5).bits == threshold_mask<double>(std::vector<double>{2.0}, 0.0).bits);
}

TEST_CASE("threshold mask is a pure function of scores and threshold") {
  Rng rng(3);
  std::vector<float> s(1000);
  for (auto& v : s) v = static_cast<float>(rng.normal());
  CHECK(threshold_mask<float>(s, 0.1f) == threshold_mask<float>(s, 0.1f));
}

TEST_CASE("layer alpha") {
  CHECK(layer_alpha({{4}, {1, 1, 1, 1}}).alpha == 1.0);
  CHECK(layer_alpha({{4}, {1, 0, 0, 1}}).alpha == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
  const auto d = layer_alpha({{2}, {0, 0}});
  CHECK(d.degenerate);
  CHECK(d.alpha == 1.0);
  CHECK_THROWS_AS(layer_alpha(BinaryMask{}), std::invalid_argument);
}

TEST_CASE("alpha squared times N equals the active count") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(5000);
    BinaryMask m{{n}, std::vector<std::uint8_t>(n)};
    for (auto& b : m.bits) b = rng.uniform() < 0.3;
    const auto a = layer_alpha(m);
    if (a.degenerate) continue;
    CHECK(a.active == m.active_count());
    CHECK(a.total == n);
    // alpha = sqrt(active / N) rounds once; squaring recovers the ratio to one ulp.
    CHECK(std::abs(a.alpha * a.alpha * static_cast<double>(n) - static_cast<double>(a.active)) <=
          4.0 * std::numeric_limits<double>::epsilon() * static_cast<double>(a.active));
  }
}

TEST_CASE("effective weights are theta over alpha on active entries") {
  Tensor<double> w({1, 1}, std::vector<double>{2.0});
  auto st = MaskState<double>::initialized(1, 1.0, 0.0);
  CHECK(effective_weights(w, st).weights[0] == 2.0);

  Rng rng(5);
  auto big = test::random_tensor<double>(8, 16, rng);
  auto s2 = MaskState<double>::initialized(big.size(), 0.0, 0.0);
  for (auto& v : s2.scores) v = rng.normal();
  const auto eff = effective_weights(big, s2);
  const double alpha = std::sqrt(static_cast<double>(eff.mask.active_count()) / static_cast<double>(big.size()));
  for (std::size_t i = 0; i < big.size(); ++i) {
    const double expect = s2.scores[i] > 0.0 ? big[i] / alpha : 0.0;
    CHECK(eff.weights[i] == doctest::Approx(expect).epsilon(1e-14));
  }
}

TEST_CASE("all-active masked forward is bit-identical to the plain layer") {
  Rng rng(8);
  const auto w = test::random_tensor<float>(12, 20, rng);
  const auto x = test::random_tensor<float>(5, 20, rng);
  std::vector<float> b(12);
  for (auto& v : b) v = static_cast<float>(rng.normal());
  const auto st = MaskState<float>::initialized(w.size(), 1.0f, 0.0f);
  const auto masked = masked_forward(w, std::span<const float>(b), effective_weights(w, st), x);
  const auto plain = linear_forward(w, std::span<const float>(b), x);
  CHECK(masked.values() == plain.values());
}

TEST_CASE("degenerate layer outputs bias only") {
  Rng rng(9);
  const auto w = test::random_tensor<double>(3, 4, rng);
  const auto x = test::random_tensor<double>(2, 4, rng);
  const std::vector<double> b{1.0, -2.0, 0.5};
  const auto st = MaskState<double>::initialized(w.size(), -1.0, 0.0);
  const auto eff = effective_weights(w, st);
  CHECK(eff.alpha.degenerate);
  const auto y = masked_forward(w, std::span<const double>(b), eff, x);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 3; ++c) CHECK(y(r, c) == b[c]);
  }
}

TEST_CASE("straight-through gradient examples") {
  Tensor<double> w({1, 2}, std::vector<double>{1.0, -1.0});
  const auto st = MaskState<double>::initialized(2, 1.0, 0.0);
  const auto eff = effective_weights(w, st);
  const Tensor<double> g({1, 2}, std::vector<double>{0.2, 0.3});
  const auto sg = straight_through_backward(w, eff, g);
  CHECK(sg[0] == doctest::Approx(0.2));
  CHECK(sg[1] == doctest::Approx(-0.3));

  const Tensor<double> zero({1, 2}, 0.0);
  for (double v : straight_through_backward(w, eff, zero)) CHECK(v == 0.0);

  // An inactive weight still receives a score gradient.
  auto half = st;
  half.scores[1] = -1.0;
  const auto eh = effective_weights(w, half);
  CHECK(eh.weights[1] == 0.0);
  CHECK(straight_through_backward(w, eh, g)[1] != 0.0);
}

TEST_CASE("topk mask cardinality and ties") {
  CHECK(topk_mask<double>(std::vector<double>{3, 1, 2, 0}, 0.5).bits == std::vector<std::uint8_t>{1, 0, 1, 0});
  CHECK(topk_mask<double>(std::vector<double>{1, 1}, 0.5).bits == std::vector<std::uint8_t>{1, 0});
  CHECK(topk_mask<double>(std::vector<double>{5, -1, 2}, 1.0).active_count() == 3);
  CHECK_THROWS_AS(topk_count(10, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(topk_count(10, 1.5), std::invalid_argument);
}

TEST_CASE("topk count equals ceil(fraction * N) over a grid") {
  // Grid fractions q/100 in exact integer arithmetic.
  for (std::size_t q = 1; q <= 100; q += 3) {
    const double f = static_cast<double>(q) / 100.0;
    for (std::size_t n : {std::size_t{1}, std::size_t{2}, std::size_t{7}, std::size_t{30}, std::size_t{99},
                          std::size_t{1000}, std::size_t{4096}, std::size_t{12345}, std::size_t{100000}}) {
      const std::size_t expect = std::max<std::size_t>(1, (q * n + 99) / 100);
      CAPTURE(q);
      CAPTURE(n);
      CHECK(topk_count(n, f) == expect);
    }
  }
  Rng rng(4);
  std::vector<float> s(4099);
  for (auto& v : s) v = static_cast<float>(rng.below(7));  // many ties
  const auto m = topk_mask<float>(s, 0.37);
  CHECK(m.active_count() == topk_count(s.size(), 0.37));
  // Every active score is >= every inactive score; among equals, lower indices win.
  float min_on = 1e9f, max_off = -1e9f;
  std::size_t last_on_at_min = 0, first_off_at_min = s.size();
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (m.bits[i]) min_on = std::min(min_on, s[i]);
    else max_off = std::max(max_off, s[i]);
  }
  CHECK(min_on >= max_off);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != min_on) continue;
    if (m.bits[i]) last_on_at_min = i;
    else first_off_at_min = std::min(first_off_at_min, i);
  }
  if (min_on == max_off) CHECK(last_on_at_min < first_off_at_min);
}

TEST_CASE("progressive fraction is linear from one to the target") {
  CHECK(progressive_fraction(0, 100, 0.3) == 1.0);
  CHECK(progressive_fraction(100, 100, 0.3) == 0.3);
  CHECK(progressive_fraction(150, 100, 0.3) == 0.3);
  CHECK(progressive_fraction(50, 100, 0.914) == doctest::Approx(0.957).epsilon(1e-12));
}

TEST_CASE("select_trainable policies") {
  auto m = SmallModel<double>::mlp({4, 1}, 0);
  m.layers()[0].weight = Tensor<double>({1, 4}, std::vector<double>{4, -1, 3, -2});
  FreezeConfig f;
  f.policy = "max_magnitude";
  f.fraction = 0.5;
  CHECK(select_trainable(m, f, 0)[0] == FreezeMask{1, 0, 1, 0});

  f = {};
  f.policy = "random";
  f.p = 0.0;
  CHECK(select_trainable(m, f, 0)[0] == FreezeMask{1, 1, 1, 1});

  auto deep = SmallModel<double>::mlp({3, 4, 4, 4, 2}, 1);
  f = {};
  f.policy = "layer_subset";
  f.layers = {0};
  const auto fm = select_trainable(deep, f, 0);
  CHECK(std::count(fm[0].begin(), fm[0].end(), 1) == 12);
  for (std::size_t i = 1; i < 4; ++i) CHECK(std::count(fm[i].begin(), fm[i].end(), 1) == 0);
  f.layers = {9};
  CHECK_THROWS_AS(select_trainable(deep, f, 0), std::invalid_argument);
}

TEST_CASE("frozen scores never change during mask training") {
  Rng rng(21);
  const auto x = test::random_tensor<double>(64, 6, rng);
  std::vector<int> y(64);
  for (std::size_t i = 0; i < 64; ++i) y[i] = x(i, 0) > 0 ? 1 : 0;
  auto m = SmallModel<double>::mlp({6, 16, 8}, 2);
  TrainConfig cfg;
  cfg.lr = 5.0;
  cfg.epochs = 5;
  cfg.batch_size = 16;
  cfg.freeze.policy = "random";
  cfg.freeze.p = 0.5;
  SupervisedTrainer<double> t(m, x, y, 2, cfg, AdaptMode::mask);
  std::vector<std::vector<double>> before;
  for (const auto& l : m.layers()) before.push_back(l.mask->scores);
  t.run();
  std::size_t frozen = 0, moved = 0;
  for (std::size_t li = 0; li < m.layers().size(); ++li) {
    const auto& st = *m.layers()[li].mask;
    for (std::size_t j = 0; j < st.scores.size(); ++j) {
      if (!st.trainable[j]) {
        ++frozen;
        CHECK(st.scores[j] == before[li][j]);
      } else {
        moved += st.scores[j] != before[li][j];
      }
    }
  }
  CHECK(frozen > 0);
  CHECK(moved > 0);
}
