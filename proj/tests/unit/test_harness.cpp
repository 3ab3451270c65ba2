// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <filesystem>
#include <set>
#include <sstream>

#include "doctest.h"
#include "smn/harness.hpp"

using namespace smn;

namespace {

DatasetSpec small_blobs(std::uint64_t seed = 0) {
  DatasetSpec s;
  s.kind = "blobs";
  s.classes = 3;
  s.per_class = 40;
  s.dim = 8;
  s.seed = seed;
  return s;
}

ExperimentConfig small_experiment() {
  ExperimentConfig c;
  c.source = small_blobs();
  c.target = small_blobs();
  c.backbone.hidden = {16};
  c.backbone.embedding_dim = 8;
  c.backbone.pretrain.epochs = 5;
  c.train.epochs = 2;
  c.train.batch_size = 32;
  c.train.prototype_count = 6;
  c.train.lr = 5.0;
  return c;
}

}  // namespace

TEST_CASE("datasets are deterministic with disjoint splits") {
  for (const char* kind : {"blobs", "moons", "glyphs", "shifted-blobs"}) {
    auto s = small_blobs(3);
    s.kind = kind;
    if (s.kind == "glyphs") s.image_side = 6;
    if (s.kind == "moons") s.classes = 2;
    if (s.kind == "shifted-blobs") s.shift_dims = 4;
    const auto a = gen_dataset(s);
    const auto b = gen_dataset(s);
    CHECK(a.x.values() == b.x.values());
    CHECK(a.y == b.y);
    CHECK(a.train.size() + a.test.size() == a.x.rows());
    std::set<std::size_t> tr(a.train.begin(), a.train.end());
    for (auto i : a.test) CHECK(tr.count(i) == 0);
    std::set<int> cls(a.y.begin(), a.y.end());
    CHECK(cls.size() == a.classes);
  }
  auto s = small_blobs(3);
  s.seed = 4;
  CHECK(gen_dataset(s).x.values() != gen_dataset(small_blobs(3)).x.values());
}

TEST_CASE("shifted blobs domains share class means") {
  DatasetSpec s = small_blobs(5);
  s.kind = "shifted-blobs";
  s.per_class = 400;
  s.shift_dims = 4;
  s.shift = 0.0;
  s.domain = "source";
  const auto src = gen_dataset(s);
  s.domain = "target";
  const auto tgt = gen_dataset(s);
  CHECK(src.x.values() != tgt.x.values());
  for (int c = 0; c < 3; ++c) {
    for (std::size_t j = 0; j < s.dim; ++j) {
      double ms = 0, mt = 0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < src.x.rows(); ++i) {
        if (src.y[i] != c) continue;
        ms += src.x(i, j);
        ++n;
      }
      for (std::size_t i = 0; i < tgt.x.rows(); ++i) {
        if (tgt.y[i] == c) mt += tgt.x(i, j);
      }
      CHECK(std::abs(ms - mt) / static_cast<double>(n) < 0.3);
    }
  }
}

TEST_CASE("dataset validation") {
  auto s = small_blobs();
  s.kind = "nope";
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_blobs();
  s.test_fraction = 1.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_blobs();
  s.per_class = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_blobs();
  s.kind = "shifted-blobs";
  s.shift_dims = 4;
  s.domain = "middle";
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("experiment config json round trip and overrides") {
  auto c = small_experiment();
  c.method = Method::smn_cascade;
  nlohmann::json j = c;
  const auto back = j.get<ExperimentConfig>();
  CHECK(nlohmann::json(back) == j);
  const auto o = apply_overrides(j, {"train.lr=7.5", "method=\"fft\"", "target.kind=moons", "cascade.k=3"});
  const auto oc = o.get<ExperimentConfig>();
  CHECK(oc.train.lr == 7.5);
  CHECK(oc.method == Method::fft);
  CHECK(oc.target.kind == "moons");
  CHECK(oc.cascade.k == 3);
  CHECK_THROWS(apply_overrides(j, {"no_equals_sign"}));
  CHECK_THROWS(parse_method("bogus"));
  for (auto m : {Method::knn, Method::fft, Method::mask_supervised, Method::smn, Method::smn_cascade, Method::topk,
                 Method::progressive_topk}) {
    CHECK(parse_method(to_string(m)) == m);
  }
}

TEST_CASE("experiment config validation") {
  auto c = small_experiment();
  c.target.dim = 9;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_experiment();
  c.method = Method::topk;
  c.topk_fraction = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_experiment();
  c.eval.lowshot_fractions = {0.5, 1.5};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_experiment();
  c.train.lr = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("well separated blobs are linearly probed perfectly") {
  DatasetSpec s = small_blobs(1);
  s.classes = 2;
  s.separation = 10.0;
  s.per_class = 100;
  const auto d = gen_dataset(s);
  EmbeddingSet tr{d.train_x(), d.train_y(), "train"}, te{d.test_x(), d.test_y(), "test"};
  CHECK(*linear_probe(tr, &te, ProbeConfig{}).test_accuracy == 1.0);
}

TEST_CASE("methods run end to end and write artifacts") {
  const auto base = small_experiment();
  const auto backbone = pretrain_backbone<float>(gen_dataset(base.source), base.backbone);
  const auto root = std::filesystem::temp_directory_path() / "smn_test_harness";
  std::filesystem::remove_all(root);

  auto c = base;
  c.method = Method::knn;
  c.out_dir = root / "knn";
  const auto knn = run_experiment<float>(c, &backbone);
  CHECK(knn.errors.empty());
  REQUIRE(knn.knn_accuracy);
  CHECK(std::filesystem::exists(c.out_dir / "summary.json"));
  CHECK_FALSE(std::filesystem::exists(c.out_dir / "training_log.jsonl"));
  CHECK_FALSE(std::filesystem::exists(c.out_dir / "masks.mask"));

  c.method = Method::smn;
  c.out_dir = root / "smn";
  const auto smn = run_experiment<float>(c, &backbone);
  CHECK(smn.errors.empty());
  CHECK(smn.found_sparsity);
  for (const char* f : {"masks.mask", "sparsity.csv", "storage.json", "training_log.jsonl", "accuracy.csv"}) {
    CHECK(std::filesystem::exists(c.out_dir / f));
  }
  c.out_dir = root / "smn2";
  const auto again = run_experiment<float>(c, &backbone);
  CHECK(again.knn_accuracy == smn.knn_accuracy);
  CHECK(read_file_bytes(c.out_dir / "masks.mask") == read_file_bytes(root / "smn" / "masks.mask"));

  c.method = Method::mask_supervised;
  c.out_dir = root / "sup";
  const auto sup = run_experiment<float>(c, &backbone);
  CHECK(sup.errors.empty());
  CHECK(sup.classifier_accuracy);
  std::filesystem::remove_all(root);
}

TEST_CASE("stage failures are recorded, not thrown") {
  const auto c = small_experiment();
  const auto wrong = SmallModel<float>::mlp({5, 4}, 0);
  ExperimentReport r;
  CHECK_NOTHROW(r = run_experiment<float>(c, &wrong));
  REQUIRE(r.errors.size() == 1);
  CHECK(r.errors[0].rfind("eval: ", 0) == 0);
  CHECK_FALSE(r.knn_accuracy);
}

TEST_CASE("sparsity csv") {
  MaskSet masks{BinaryMask{{2, 2}, {1, 0, 1, 1}}, BinaryMask{{2}, {0, 0}}};
  std::ostringstream os;
  write_sparsity_csv(os, masks);
  const auto s = os.str();
  CHECK(s.rfind("layer,id,n_params,n_active,fraction\n", 0) == 0);
  CHECK(s.find("all,-1,6,3,0.5") != std::string::npos);
}
