// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <sstream>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "smn/kernels.hpp"
#include "smn/swav.hpp"

using namespace smn;

namespace {

Matrix random_scores(std::size_t k, std::size_t b, Rng& rng) {
  Matrix s(k, b);
  for (auto& v : s.values()) v = rng.uniform(-1.0, 1.0);
  return s;
}

double max_marginal_error(const Matrix& q) {
  const double rt = 1.0 / static_cast<double>(q.rows());
  const double ct = 1.0 / static_cast<double>(q.cols());
  double err = 0.0;
  for (std::size_t r = 0; r < q.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < q.cols(); ++c) s += q(r, c);
    err = std::max(err, std::abs(s - rt) / rt);
  }
  for (std::size_t c = 0; c < q.cols(); ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < q.rows(); ++r) s += q(r, c);
    err = std::max(err, std::abs(s - ct) / ct);
  }
  return err;
}

Tensor<double> unit_rows(std::size_t n, std::size_t d, Rng& rng) {
  return l2_normalize_rows(test::random_tensor<double>(n, d, rng));
}

}  // namespace

TEST_CASE("sinkhorn converges to the uniform marginals") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    // Prototype scores of unit embeddings, as in training.
    const auto z = unit_rows(64, 32, rng);
    const auto c = unit_rows(16, 32, rng);
    Matrix s(16, 64);
    for (std::size_t k = 0; k < 16; ++k) {
      for (std::size_t b = 0; b < 64; ++b) s(k, b) = kernels::dot<double>(c.row(k), z.row(b));
    }
    const Matrix q = sinkhorn_assign(s, 0.05, 100);
    CHECK(max_marginal_error(q) <= 1e-6);
    double total = 0.0;
    for (double v : q.values()) {
      CHECK(v >= 0.0);
      total += v;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("sinkhorn on full-range scores keeps converging past 100 iterations") {
  // Uniform [-1, 1] scores at eps 0.05 span e^40 and converge slowly.
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix s = random_scores(16, 64, rng);
    const double e100 = max_marginal_error(sinkhorn_assign(s, 0.05, 100));
    const double e2000 = max_marginal_error(sinkhorn_assign(s, 0.05, 2000));
    CHECK(e2000 <= std::max(e100, 1e-12));
    CHECK(e2000 <= 1e-6);
  }
}

TEST_CASE("sinkhorn 2x2 example") {
  const Matrix s({2, 2}, std::vector<double>{1, 0, 0, 1});
  CHECK(max_marginal_error(sinkhorn_assign(s, 0.5, 100)) <= 1e-6);
}

TEST_CASE("sinkhorn of uniform scores is uniform") {
  const Matrix q = sinkhorn_assign(Matrix(8, 32, 0.3), 0.05, 3);
  for (double v : q.values()) CHECK(std::abs(v - 1.0 / (8 * 32)) <= 1e-12);
}

TEST_CASE("sinkhorn rejects bad parameters") {
  CHECK_THROWS_AS(sinkhorn_assign(Matrix(2, 2), 0.0, 3), std::invalid_argument);
  CHECK_THROWS_AS(sinkhorn_assign(Matrix(2, 2), 0.05, 0), std::invalid_argument);
}

TEST_CASE("swapped-prediction gradients match central differences") {
  Rng rng(2);
  const std::size_t n = 5, d = 4, k = 6;
  const auto z_t = unit_rows(n, d, rng);
  const auto z_s = unit_rows(n, d, rng);
  auto bank = PrototypeBank<double>::random(k, d, 3);
  const double tau = 0.3;
  const auto ref = swav_loss(z_t, z_s, bank, tau, 0.05, 3);
  const Matrix qt = ref.targets_t, qs = ref.targets_s;
  for (std::size_t b = 0; b < n; ++b) {
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) sum += qt(b, c);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
  auto loss_at = [&](const Tensor<double>& a, const Tensor<double>& b, const PrototypeBank<double>& pb) {
    return swav_loss_with_targets(a, b, pb, tau, qt, qs).loss;
  };
  const double h = 1e-6;
  for (std::size_t i = 0; i < z_t.size(); ++i) {
    auto p = z_t, m = z_t;
    p[i] += h;
    m[i] -= h;
    CHECK(ref.grad_z_t[i] == doctest::Approx((loss_at(p, z_s, bank) - loss_at(m, z_s, bank)) / (2 * h)).epsilon(1e-6));
    p = z_s;
    m = z_s;
    p[i] += h;
    m[i] -= h;
    CHECK(ref.grad_z_s[i] == doctest::Approx((loss_at(z_t, p, bank) - loss_at(z_t, m, bank)) / (2 * h)).epsilon(1e-6));
  }
  for (std::size_t i = 0; i < bank.vectors.size(); ++i) {
    auto p = bank, m = bank;
    p.vectors[i] += h;
    m.vectors[i] -= h;
    CHECK(ref.grad_prototypes[i] == doctest::Approx((loss_at(z_t, z_s, p) - loss_at(z_t, z_s, m)) / (2 * h)).epsilon(1e-6));
  }
}

TEST_CASE("l2 normalization backward matches central differences") {
  Rng rng(4);
  const auto h0 = test::random_tensor<double>(3, 5, rng);
  const auto g = test::random_tensor<double>(3, 5, rng);
  std::vector<double> norms;
  const auto z = l2_normalize_rows(h0, &norms);
  const auto gh = l2_normalize_backward(z, std::span<const double>(norms), g);
  auto f = [&](const Tensor<double>& h) {
    const auto zz = l2_normalize_rows(h);
    double s = 0.0;
    for (std::size_t i = 0; i < zz.size(); ++i) s += zz[i] * g[i];
    return s;
  };
  for (std::size_t i = 0; i < h0.size(); ++i) {
    auto p = h0, m = h0;
    p[i] += 1e-6;
    m[i] -= 1e-6;
    CHECK(gh[i] == doctest::Approx((f(p) - f(m)) / 2e-6).epsilon(1e-6));
  }
}

TEST_CASE("prototype bank rows have unit norm") {
  auto bank = PrototypeBank<float>::random(10, 7, 1);
  for (std::size_t r = 0; r < 10; ++r) {
    double s = 0.0;
    for (float v : bank.vectors.row(r)) s += double(v) * v;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("augmentation") {
  Rng rng(5);
  const auto x = test::random_tensor<float>(6, 8, rng);
  AugConfig none;
  CHECK(augment(x, none, rng).values() == x.values());
  AugConfig aug;
  aug.noise_sigma = 0.1;
  aug.dropout_prob = 0.2;
  const auto v = make_views(x, aug, rng);
  CHECK(v.t.values() != v.s.values());
  // Per-sample streams: a row's views do not depend on what else is in the batch.
  const std::vector<std::size_t> one{3}, two{1, 3};
  const auto a = make_views_for(x, one, aug, 9, 2);
  const auto b = make_views_for(x, two, aug, 9, 2);
  CHECK(std::vector<float>(a.t.row(0).begin(), a.t.row(0).end()) ==
        std::vector<float>(b.t.row(1).begin(), b.t.row(1).end()));
  const auto c = make_views_for(x, one, aug, 9, 3);
  CHECK(c.t.values() != a.t.values());
}

TEST_CASE("image augmentation keeps the shape") {
  Rng rng(6);
  const auto x = test::random_tensor<float>(4, 36, rng);
  AugConfig aug;
  aug.image_side = 6;
  aug.crop_min = 0.5;
  aug.hflip = true;
  const auto y = augment(x, aug, rng);
  CHECK(y.shape() == x.shape());
  CHECK(y.all_finite());
}

TEST_CASE("self-supervised mask training is deterministic and label free") {
  Rng rng(7);
  const auto data = test::random_tensor<float>(96, 10, rng);
  TrainConfig cfg;
  cfg.lr = 5.0;
  cfg.epochs = 3;
  cfg.batch_size = 32;
  cfg.prototype_count = 12;
  cfg.aug.noise_sigma = 0.2;
  cfg.queue_start_epoch = 1;
  cfg.queue_length = 64;
  const auto base = SmallModel<float>::mlp({10, 16, 8}, 3);
  auto m1 = base, m2 = base;
  const auto r1 = train_smn(m1, data, cfg);
  const auto r2 = train_smn(m2, data, cfg);
  CHECK_FALSE(r1.diverged);
  REQUIRE(r1.log.size() == 3);
  CHECK(m1.masks() == m2.masks());
  CHECK(r1.log.back().loss == r2.log.back().loss);
  // Backbone weights stay frozen; only scores, head and prototypes move.
  for (std::size_t i = 0; i < base.layers().size(); ++i) {
    CHECK(m1.layers()[i].weight.values() == base.layers()[i].weight.values());
  }
  std::ostringstream os;
  write_training_log(os, r1.log);
  const std::string log = os.str();
  CHECK(std::count(log.begin(), log.end(), '\n') == 3);
}

TEST_CASE("non-finite loss restores the epoch snapshot") {
  Rng rng(8);
  auto data = test::random_tensor<double>(40, 6, rng);
  data(5, 2) = std::nan("");
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 40;
  cfg.prototype_count = 4;
  auto m = SmallModel<double>::mlp({6, 5}, 1);
  const auto r = train_smn(m, data, cfg);
  CHECK(r.diverged);
  for (double s : m.layers()[0].mask->scores) CHECK(s == cfg.score_init);
}
