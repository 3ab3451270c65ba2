// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "json.hpp"
#include "smn/mask_io.hpp"

using namespace smn;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::cli_main(args, out, err);
  return {code, out.str(), err.str()};
}

std::filesystem::path scratch() {
  auto p = std::filesystem::temp_directory_path() / "smn_test_cli";
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("argument errors exit with the validation code") {
  CHECK(run({}).code == cli::kValidationError);
  const auto r = run({"smn", "--bogus"});
  CHECK(r.code == cli::kValidationError);
  CHECK(r.err.find("--config") != std::string::npos);
  CHECK(run({"mask", "--rule", "median"}).code == cli::kValidationError);
  CHECK(run({"report-sparsity"}).code == cli::kValidationError);
  CHECK(run({"help-me"}).code == cli::kValidationError);
}

TEST_CASE("missing config file names the path") {
  const auto r = run({"smn", "--config", "/nonexistent/cfg.json"});
  CHECK(r.code == cli::kValidationError);
  CHECK(r.err.find("/nonexistent/cfg.json") != std::string::npos);
}

TEST_CASE("invalid overrides are validation errors") {
  CHECK(run({"gen-data", "--set", "per_class=-3"}).code == cli::kValidationError);
  CHECK(run({"verify-theorems", "--set", "train.lr=0"}).code == cli::kValidationError);
}

TEST_CASE("gen-data writes csv") {
  const auto r = run({"gen-data", "--set", "per_class=3", "--set", "classes=2", "--set", "dim=4"});
  REQUIRE(r.code == cli::kOk);
  CHECK(r.out.rfind("split,label,group,f0,f1,f2,f3\n", 0) == 0);
  std::size_t lines = 0;
  for (char ch : r.out) lines += ch == '\n';
  CHECK(lines == 7);
}

TEST_CASE("verify-theorems rational oracle") {
  const auto r = run({"verify-theorems", "--transform", "composed", "--rational", "--steps", "30"});
  REQUIRE(r.code == cli::kOk);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j.at("masks_identical").get<bool>());
  CHECK(j.at("config_b").at("lr").get<double>() == 100.0);
  CHECK(run({"verify-theorems", "--transform", "scale", "--unchecked", "--rational"}).code == cli::kValidationError);
  CHECK(run({"verify-theorems", "--transform", "translate", "--set", "train.weight_decay=0.001", "--rational"}).code ==
        cli::kValidationError);
}

TEST_CASE("compress and report-sparsity on a mask file") {
  const auto path = scratch() / "m.mask";
  write_mask_file(path, {BinaryMask{{4, 8}, std::vector<std::uint8_t>(32, 1)}});
  const auto r = run({"compress", "--masks", path.string()});
  REQUIRE(r.code == cli::kOk);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j.at("raw_bits").get<std::size_t>() == 32);
  const auto s = run({"report-sparsity", "--masks", path.string()});
  CHECK(s.code == cli::kOk);
  CHECK(s.out.find("all,-1,32,32,1") != std::string::npos);
  CHECK(run({"compress"}).code == cli::kValidationError);
  CHECK(run({"compress", "--masks", path.string(), "--codec", "lzma9000"}).code == cli::kValidationError);
  CHECK(run({"compress", "--masks", (scratch() / "absent.mask").string()}).code == cli::kRuntimeError);
  CHECK(run({"eval", "--masks", path.string()}).code == cli::kValidationError);
  std::filesystem::remove_all(scratch());
}
