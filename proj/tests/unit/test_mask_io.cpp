// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <vector>

#include "doctest.h"
#include "smn/mask_io.hpp"
#include "smn/rng.hpp"

using namespace smn;

namespace {

MaskSet random_set(Rng& rng) {
  MaskSet set;
  const std::size_t layers = 1 + rng.below(4);
  for (std::size_t l = 0; l < layers; ++l) {
    BinaryMask m;
    if (rng.below(2)) {
      m.shape = {1 + rng.below(9), 1 + rng.below(13)};
    } else {
      m.shape = {1 + rng.below(40)};
    }
    std::size_t n = 1;
    for (auto d : m.shape) n *= d;
    const double p = rng.uniform();
    for (std::size_t i = 0; i < n; ++i) m.bits.push_back(rng.uniform() < p);
    set.push_back(m);
  }
  return set;
}

MaskFileErrc error_of(const std::vector<std::uint8_t>& bytes) {
  try {
    unpack_masks(bytes);
  } catch (const MaskFileError& e) {
    return e.code();
  }
  FAIL("expected MaskFileError");
  return MaskFileErrc::malformed;
}

}  // namespace

TEST_CASE("pack and unpack round trip") {
  Rng rng(1);
  for (int t = 0; t < 1000; ++t) {
    const auto set = random_set(rng);
    const auto bytes = pack_masks(set);
    CHECK(bytes.size() == packed_size(set));
    CHECK(unpack_masks(bytes) == set);
  }
}

TEST_CASE("bit order is LSB first with zero padding") {
  BinaryMask m{{10}, {1, 0, 0, 0, 0, 0, 0, 0, 0, 1}};
  const auto payload = mask_payload({m});
  REQUIRE(payload.size() == 2);
  CHECK(payload[0] == 0x01);
  CHECK(payload[1] == 0x02);
  const auto bytes = pack_masks({m});
  CHECK(bytes[0] == 'S');
  CHECK(bytes[3] == 'M');
  CHECK(bytes[4] == 1);
  CHECK(bytes[6] == 1);
  // header 8, rank 1, one u32 dim, 2 payload bytes, crc 4
  CHECK(bytes.size() == kMaskHeaderBytes + 1 + 4 + 2 + kMaskTrailerBytes);
}

TEST_CASE("corrupted files are rejected with specific codes") {
  Rng rng(2);
  const auto good = pack_masks(random_set(rng));
  auto magic = good;
  magic[0] = 'X';
  CHECK(error_of(magic) == MaskFileErrc::bad_magic);
  auto version = good;
  version[4] = 9;
  CHECK(error_of(version) == MaskFileErrc::bad_version);
  // Payload and trailer flips fail the CRC. Shape flips may fail parsing first.
  BinaryMask m{{37}, std::vector<std::uint8_t>(37, 1)};
  const auto one = pack_masks({m});
  for (std::size_t byte = kMaskHeaderBytes + 5; byte < one.size(); ++byte) {
    auto flipped = one;
    flipped[byte] ^= 0x10;
    CHECK(error_of(flipped) == MaskFileErrc::checksum);
  }
  for (std::size_t byte = kMaskHeaderBytes; byte < good.size(); ++byte) {
    auto flipped = good;
    flipped[byte] ^= 0x01;
    CHECK_THROWS_AS(unpack_masks(flipped), MaskFileError);
  }
  for (std::size_t len : {std::size_t{0}, std::size_t{3}, good.size() - 1}) {
    std::vector<std::uint8_t> cut(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(len));
    CHECK(error_of(cut) == MaskFileErrc::truncated);
  }
}

TEST_CASE("mask files on disk") {
  Rng rng(3);
  const auto set = random_set(rng);
  const auto path = std::filesystem::temp_directory_path() / "smn_test.mask";
  write_mask_file(path, set);
  CHECK(std::filesystem::file_size(path) == packed_size(set));
  CHECK(read_mask_file(path) == set);
  std::filesystem::remove(path);
  CHECK_THROWS(read_mask_file(path));
}

TEST_CASE("deflate codec") {
  const auto codec = make_codec("deflate");
  REQUIRE(codec);
  CHECK(make_codec("gzip")->name() == codec->name());
  CHECK_THROWS(make_codec("nope"));
  Rng rng(4);
  std::vector<std::uint8_t> data(5000);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = i % 3 ? 0 : static_cast<std::uint8_t>(rng.below(256));
  const auto z = codec->compress(data);
  CHECK(z.size() < data.size());
  CHECK(z[0] == 0x1f);
  CHECK(z[1] == 0x8b);
  CHECK(codec->decompress(z) == data);
  CHECK(codec->compress(data) == z);
  const std::vector<std::uint8_t> empty;
  CHECK(codec->decompress(codec->compress(empty)).empty());
  auto bad = z;
  bad[bad.size() / 2] ^= 0xff;
  CHECK_THROWS(codec->decompress(bad));
}

TEST_CASE("compression benchmark records every codec") {
  const auto codec = make_deflate_codec();
  const std::vector<std::uint8_t> zeros(4096, 0);
  const auto r = compression_benchmark("mask", zeros, {codec.get()});
  REQUIRE(r.codecs.size() == 1);
  CHECK(r.raw_bits == 4096 * 8);
  CHECK(r.codecs[0].reduction > 0.9);
  CHECK_FALSE(r.codecs[0].error);
}

TEST_CASE("storage accounting") {
  StorageCounts c;
  c.maskable_weights = 1000;
  c.finetuned_params = 1100;
  c.router_params = 30;
  c.whitening_params = 50;
  const auto mask = storage_report(c, StorageMethod::mask);
  CHECK(mask.raw_bits == 1000);
  CHECK(mask.float_reference_bits == 32000);
  CHECK(mask.ratio_vs_float == 32.0);
  const auto fft = storage_report(c, StorageMethod::fft);
  CHECK(fft.raw_bits == 32 * 1100);
  const auto cascade = storage_report(c, StorageMethod::cascade, 5);
  CHECK(cascade.raw_bits == 6 * 1000 + 64 * 80);
  std::size_t items = 0;
  for (const auto& it : cascade.items) items += it.bits;
  CHECK(items == cascade.raw_bits);
}
