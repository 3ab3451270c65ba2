// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Bit-packed mask files, pluggable compression codecs and storage accounting.
//
// Mask file layout (all integers little-endian):
//   "SMNM" | u16 version=1 | u16 layer count
//   per layer: u8 rank | u32 dim * rank | ceil(N/8) payload bytes, bit i of
//              the flat mask at byte i/8, bit position i%8, pad bits zero
//   u32 CRC32 (poly 0xEDB88320) over every preceding byte

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "smn/masking.hpp"

namespace smn {

using MaskSet = std::vector<BinaryMask>;

inline constexpr std::uint16_t kMaskFileVersion = 1;
inline constexpr std::size_t kMaskHeaderBytes = 8;
inline constexpr std::size_t kMaskTrailerBytes = 4;

enum class MaskFileErrc { bad_magic = 1, bad_version = 2, checksum = 3, truncated = 4, malformed = 5 };

class MaskFileError : public std::runtime_error {
 public:
  MaskFileError(MaskFileErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  MaskFileErrc code() const { return code_; }

 private:
  MaskFileErrc code_;
};

std::vector<std::uint8_t> pack_masks(const MaskSet& masks);
MaskSet unpack_masks(std::span<const std::uint8_t> bytes);

/// Exact byte length pack_masks produces.
std::size_t packed_size(const MaskSet& masks);

/// Bit payload only (no header, shapes or CRC), layers concatenated.
std::vector<std::uint8_t> mask_payload(const MaskSet& masks);

void write_mask_file(const std::filesystem::path& path, const MaskSet& masks);
MaskSet read_mask_file(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

class Codec {
 public:
  virtual ~Codec() = default;
  virtual std::string name() const = 0;
  virtual std::vector<std::uint8_t> compress(std::span<const std::uint8_t> in) const = 0;
  virtual std::vector<std::uint8_t> decompress(std::span<const std::uint8_t> in) const = 0;
};

/// RFC 1951 DEFLATE in an RFC 1952 gzip container, level 9, fixed mtime 0.
std::unique_ptr<Codec> make_deflate_codec(int level = 9);

/// Codecs by name. "deflate" (alias "gzip") is always available.
std::unique_ptr<Codec> make_codec(const std::string& name);
std::vector<std::string> available_codecs();

struct CodecResult {
  std::string codec;
  std::size_t compressed_bits = 0;
  double reduction = 0.0;  // 1 - compressed / raw
  std::optional<std::string> error;
};

struct StorageItem {
  std::string name;
  std::size_t bits = 0;
};

struct StorageReport {
  std::string method;
  std::size_t raw_bits = 0;
  std::optional<std::size_t> payload_bits;  // mask payload without headers
  std::vector<CodecResult> codecs;
  std::vector<StorageItem> items;  // itemized raw storage
  std::size_t float_reference_bits = 0;   // 32 bits per maskable weight
  double ratio_vs_float = 0.0;            // float_reference_bits / raw_bits

  nlohmann::json to_json() const;
};

/// Compresses `artifact` with every codec; a failing codec is recorded with
/// its error and the rest still run.
StorageReport compression_benchmark(const std::string& method, std::span<const std::uint8_t> artifact,
                                    const std::vector<const Codec*>& codecs);

enum class StorageMethod { fft, mask, cascade };

struct StorageCounts {
  std::size_t maskable_weights = 0;    // weights a mask covers
  std::size_t finetuned_params = 0;    // weights + biases a fine-tune stores
  std::size_t router_params = 0;       // cascade only, stored as f64
  std::size_t whitening_params = 0;    // cascade only, stored as f64
};

/// fft: 32 bits per fine-tuned parameter. mask: 1 bit per maskable weight.
/// cascade: (K+1) mask sets plus router and whitening parameters at 64 bits.
StorageReport storage_report(const StorageCounts& counts, StorageMethod method, std::size_t k = 0);

}  // namespace smn
