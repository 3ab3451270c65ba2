// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include <vector>

#include "doctest.h"
#include "smn/invariance.hpp"
#include "smn/rng.hpp"

using namespace smn;

namespace {

TrainConfig base_config() {
  TrainConfig c;
  c.lr = 50.0;
  c.score_init = 1.0;
  c.threshold = 0.0;
  c.momentum = 0.9;
  c.weight_decay = 0.0;
  return c;
}

PairedProblem small_problem() {
  PairedProblem p;
  Rng rng(9);
  const std::size_t n = 96, d = 6;
  p.features = Matrix(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 3);
    p.labels.push_back(y);
    for (std::size_t j = 0; j < d; ++j) p.features(i, j) = rng.normal() + (j % 3 == static_cast<std::size_t>(y) ? 3.0 : 0.0);
  }
  p.classes = 3;
  p.dims = {d, 16, 8};
  p.model_seed = 2;
  return p;
}

}  // namespace

TEST_CASE("score maps") {
  const auto t = score_map({ConfigTransform::translate(0.5)});
  CHECK(t.mult == 1.0);
  CHECK(t.add == 0.5);
  const auto s = score_map({ConfigTransform::scale(2.0)});
  CHECK(s.mult == 2.0);
  CHECK(s.add == 0.0);
  const auto c = score_map({ConfigTransform::translate(0.25), ConfigTransform::scale(2.0)});
  CHECK(c.mult == 2.0);
  CHECK(c.add == 0.5);
  CHECK(score_map({}).mult == 1.0);
}

TEST_CASE("equivalent configs") {
  TrainConfig a = base_config();
  const auto b = equivalent_config(a, {ConfigTransform::translate(0.25), ConfigTransform::scale(2.0)});
  CHECK(b.lr == 100.0);
  CHECK(b.score_init == 2.5);
  CHECK(b.threshold == 0.5);
  CHECK(b.momentum == a.momentum);

  a.weight_decay = 5e-4;
  CHECK_THROWS_AS(equivalent_config(a, ConfigTransform::translate(1.0)), ConfigError);
  const auto d = equivalent_config(a, ConfigTransform::scale_with_decay(2.0));
  CHECK(d.weight_decay == doctest::Approx(2.5e-4));
  CHECK_THROWS_AS(equivalent_config(a, ConfigTransform::scale(-1.0)), ConfigError);
  const auto u = translated_unchecked(a, 1.0);
  CHECK(u.score_init == 2.0);
  CHECK(u.threshold == 1.0);
  CHECK(u.weight_decay == a.weight_decay);

  for (const auto& t : {ConfigTransform::translate(0.5), ConfigTransform::scale(4.0)}) {
    const auto back = equivalent_config(equivalent_config(base_config(), t), t.inverse());
    CHECK(back.lr == base_config().lr);
    CHECK(back.score_init == base_config().score_init);
    CHECK(back.threshold == base_config().threshold);
  }
}

TEST_CASE("rational oracle confirms exact invariance") {
  const ToyProblem toy;
  const auto a = base_config();
  OracleOptions opts;
  opts.momentum = true;
  for (const auto& chain : std::vector<std::vector<ConfigTransform>>{
           {ConfigTransform::translate(0.5)},
           {ConfigTransform::scale(2.0)},
           {ConfigTransform::translate(0.25), ConfigTransform::scale(2.0)}}) {
    const auto v = rational_oracle(toy, a, equivalent_config(a, chain), 60, opts);
    CHECK(v.masks_identical);
    CHECK(v.scores_exact);
    CHECK_FALSE(v.first_mismatch);
    CHECK(v.steps == 60);
    CHECK(v.masks_a.size() == 61);
    CHECK(v.map.mult == score_map(chain).mult);
    CHECK(v.map.add == score_map(chain).add);
    CHECK(v.mask_changes > 0);
  }
}

TEST_CASE("rational oracle detects the weight decay counterexample") {
  const ToyProblem toy;
  auto a = base_config();
  a.weight_decay = 0.01;
  const auto v = rational_oracle(toy, a, translated_unchecked(a, 1.0), 60);
  CHECK_FALSE(v.scores_exact);
}

TEST_CASE("rational oracle overflow guard") {
  OracleOptions opts;
  opts.momentum = true;
  opts.max_bits = 16;
  CHECK_THROWS_AS(rational_oracle({}, base_config(), base_config(), 50, opts), RationalOverflow);
}

TEST_CASE("paired float runs") {
  const auto p = small_problem();
  auto a = base_config();
  a.epochs = 3;
  a.batch_size = 32;
  a.seed = 1;
  const auto same = run_paired(a, a, p, "identity");
  CHECK(same.min_agreement == 1.0);
  CHECK(same.final_loss_rel_diff() == 0.0);
  CHECK(same.steps == 9);
  CHECK(same.agreement.size() == 10);
  CHECK(same.loss_a.size() == 3);

  const auto eq = run_paired(a, equivalent_config(a, {ConfigTransform::translate(0.25), ConfigTransform::scale(2.0)}), p);
  CHECK(eq.min_agreement >= 0.999);
  CHECK(eq.final_loss_rel_diff() <= 1e-3);

  const auto wd = weight_decay_counterexample(a, 0.0, 1.0, p);
  CHECK(wd.min_agreement == 1.0);
}
