// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "smn/bytes.hpp"
#include "smn/model.hpp"

using namespace smn;

namespace {

double half_sq(const Tensor<double>& y) {
  double s = 0.0;
  for (double v : y.values()) s += 0.5 * v * v;
  return s;
}

}  // namespace

TEST_CASE("forward shapes and dimension errors") {
  auto m = SmallModel<float>::mlp({5, 7, 3}, 1);
  Rng rng(1);
  const auto x = test::random_tensor<float>(4, 5, rng);
  const auto rec = forward(m, x);
  CHECK(rec.embedding().rows() == 4);
  CHECK(rec.embedding().cols() == 3);
  CHECK(m.rows_forwarded() == 4);
  CHECK_THROWS_AS(forward(m, test::random_tensor<float>(2, 6, rng)), DimensionError);
  CHECK(embed(m, x).values() == rec.embedding().values());
  CHECK(m.rows_forwarded() == 8);
}

TEST_CASE("weight, bias and input gradients match central differences") {
  Rng rng(2);
  auto m = SmallModel<double>::mlp({4, 6, 3}, 3);
  for (auto& l : m.layers()) {
    for (auto& b : l.bias) b = rng.normal(0.0, 0.1);
  }
  const auto x = test::random_tensor<double>(5, 4, rng);
  const auto rec = forward(m, x, {false});
  const auto g = backward(m, rec, rec.output(), {true, true});
  const double h = 1e-6;
  for (std::size_t li = 0; li < m.layers().size(); ++li) {
    auto& w = m.layers()[li].weight;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double keep = w[i];
      w[i] = keep + h;
      m.touch();
      const double lp = half_sq(forward(m, x, {false}).output());
      w[i] = keep - h;
      m.touch();
      const double lm = half_sq(forward(m, x, {false}).output());
      w[i] = keep;
      CHECK(g.layers[li].weight[i] == doctest::Approx((lp - lm) / (2 * h)).epsilon(1e-6));
    }
    auto& b = m.layers()[li].bias;
    for (std::size_t i = 0; i < b.size(); ++i) {
      const double keep = b[i];
      b[i] = keep + h;
      m.touch();
      const double lp = half_sq(forward(m, x, {false}).output());
      b[i] = keep - h;
      m.touch();
      const double lm = half_sq(forward(m, x, {false}).output());
      b[i] = keep;
      CHECK(g.layers[li].bias[i] == doctest::Approx((lp - lm) / (2 * h)).epsilon(1e-6));
    }
  }
  m.touch();
  auto xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + h;
    const double lp = half_sq(forward(m, xp, {false}).output());
    xp[i] = x[i] - h;
    const double lm = half_sq(forward(m, xp, {false}).output());
    xp[i] = x[i];
    CHECK(g.input[i] == doctest::Approx((lp - lm) / (2 * h)).epsilon(1e-6));
  }
}

TEST_CASE("score gradients equal relaxed-mask central differences with alpha frozen") {
  Rng rng(4);
  auto m = SmallModel<double>::mlp({6, 5}, 5);
  m.attach_masks(0.0, 0.0);
  auto& st = *m.layers()[0].mask;
  for (auto& s : st.scores) s = rng.normal();
  m.touch();
  const auto x = test::random_tensor<double>(7, 6, rng);
  const auto target = test::random_tensor<double>(7, 5, rng);
  const auto rec = forward(m, x, {false});
  auto resid = rec.output();
  for (std::size_t i = 0; i < resid.size(); ++i) resid[i] -= target[i];
  const auto g = backward(m, rec, resid);

  // Oracle: L(m) = 0.5 |X (theta / alpha * m)^T + b - T|^2 with m continuous.
  const auto& layer = m.layers()[0];
  const auto mask = threshold_mask<double>(st.scores, st.threshold);
  const double alpha = std::sqrt(static_cast<double>(mask.active_count()) / static_cast<double>(mask.size()));
  std::vector<double> relaxed(mask.bits.begin(), mask.bits.end());
  auto loss = [&](const std::vector<double>& mk) {
    double l = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t o = 0; o < 5; ++o) {
        double y = layer.bias[o];
        for (std::size_t c = 0; c < 6; ++c) y += x(r, c) * layer.weight(o, c) / alpha * mk[o * 6 + c];
        l += 0.5 * (y - target(r, o)) * (y - target(r, o));
      }
    }
    return l;
  };
  const double h = 1e-5;
  for (std::size_t i = 0; i < relaxed.size(); ++i) {
    auto p = relaxed, q = relaxed;
    p[i] += h;
    q[i] -= h;
    CHECK(test::rel_err(g.layers[0].scores[i], (loss(p) - loss(q)) / (2 * h), 1e-9) < 1e-6);
  }
}

TEST_CASE("backward rejects a stale record") {
  auto m = SmallModel<double>::mlp({3, 2}, 0);
  Rng rng(0);
  const auto x = test::random_tensor<double>(2, 3, rng);
  const auto rec = forward(m, x, {false});
  m.touch();
  CHECK_THROWS_AS(backward(m, rec, rec.output()), StaleRecordError);
}

TEST_CASE("checkpoint round trip in both precisions") {
  const auto m64 = SmallModel<double>::mlp({4, 8, 3}, 9);
  const auto bytes = save_checkpoint(m64);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "SMNW");
  CHECK(checkpoint_precision(bytes) == Precision::f64);
  const auto back = load_checkpoint<double>(bytes);
  REQUIRE(back.layers().size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back.layers()[i].weight.values() == m64.layers()[i].weight.values());
    CHECK(back.layers()[i].bias == m64.layers()[i].bias);
  }
  CHECK(save_checkpoint(back) == bytes);

  const auto m32 = convert_model<float>(m64);
  const auto b32 = save_checkpoint(m32);
  CHECK(checkpoint_precision(b32) == Precision::f32);
  CHECK(b32.size() < bytes.size());
  CHECK(save_checkpoint(load_checkpoint<float>(b32)) == b32);

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS(load_checkpoint<double>(bad));
  CHECK_THROWS(load_checkpoint<double>(std::span<const std::uint8_t>(bytes.data(), bytes.size() - 3)));
}

TEST_CASE("apply_mask_set reproduces the masks and alpha") {
  Rng rng(6);
  auto m = SmallModel<float>::mlp({5, 6, 4}, 2);
  std::vector<BinaryMask> masks;
  for (const auto& l : m.layers()) {
    BinaryMask b{{l.out_dim(), l.in_dim()}, std::vector<std::uint8_t>(l.weight.size())};
    for (auto& bit : b.bits) bit = static_cast<std::uint8_t>(rng.below(2));
    masks.push_back(b);
  }
  m.apply_mask_set(masks);
  CHECK(m.masks() == masks);
  masks.pop_back();
  CHECK_THROWS_AS(m.apply_mask_set(masks), DimensionError);
}

TEST_CASE("parameter counts") {
  const auto m = SmallModel<float>::mlp({10, 20, 5}, 0);
  CHECK(m.backbone_weight_count() == 10 * 20 + 20 * 5);
}
