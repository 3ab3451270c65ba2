// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include "smn/mask_io.hpp"

#include <cstring>
#include <fstream>

#include <zlib.h>

#include "smn/bytes.hpp"

namespace smn {

namespace {

constexpr char kMagic[4] = {'S', 'M', 'N', 'M'};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

std::size_t element_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void pack_bits(const BinaryMask& m, std::vector<std::uint8_t>& out) {
  const std::size_t start = out.size();
  out.resize(start + (m.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m.bits[i]) out[start + i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  }
}

}  // namespace

std::size_t packed_size(const MaskSet& masks) {
  std::size_t n = kMaskHeaderBytes + kMaskTrailerBytes;
  for (const auto& m : masks) n += 1 + 4 * m.shape.size() + (m.size() + 7) / 8;
  return n;
}

std::vector<std::uint8_t> pack_masks(const MaskSet& masks) {
  if (masks.size() > 0xffff) throw std::invalid_argument("pack_masks: too many layers");
  ByteWriter w;
  w.put_bytes({reinterpret_cast<const std::uint8_t*>(kMagic), 4});
  w.put<std::uint16_t>(kMaskFileVersion);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(masks.size()));
  for (const auto& m : masks) {
    if (m.shape.size() > 0xff) throw std::invalid_argument("pack_masks: rank too large");
    if (element_count(m.shape) != m.size()) throw DimensionError("pack_masks: shape does not match bit count");
    w.put<std::uint8_t>(static_cast<std::uint8_t>(m.shape.size()));
    for (auto d : m.shape) {
      if (d > 0xffffffffu) throw std::invalid_argument("pack_masks: dimension exceeds u32");
      w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    }
    pack_bits(m, w.buffer());
  }
  const std::uint32_t crc = crc32_of(w.buffer());
  w.put<std::uint32_t>(crc);
  return w.take();
}

MaskSet unpack_masks(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 && std::memcmp(bytes.data(), kMagic, bytes.size()) == 0) {
    throw MaskFileError(MaskFileErrc::truncated, "mask file: truncated header");
  }
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw MaskFileError(MaskFileErrc::bad_magic, "mask file: bad magic (expected SMNM)");
  }
  if (bytes.size() < kMaskHeaderBytes + kMaskTrailerBytes) {
    throw MaskFileError(MaskFileErrc::truncated, "mask file: truncated header");
  }
  ByteReader r(bytes.first(bytes.size() - kMaskTrailerBytes));
  r.get_bytes(4);
  const auto version = r.get<std::uint16_t>();
  if (version != kMaskFileVersion) {
    throw MaskFileError(MaskFileErrc::bad_version, "mask file: unsupported version " + std::to_string(version));
  }
  const auto layers = r.get<std::uint16_t>();
  MaskSet out;
  out.reserve(layers);
  try {
    for (std::uint16_t l = 0; l < layers; ++l) {
      BinaryMask m;
      const auto rank = r.get<std::uint8_t>();
      for (std::uint8_t d = 0; d < rank; ++d) m.shape.push_back(r.get<std::uint32_t>());
      const std::size_t n = element_count(m.shape);
      const auto payload = r.get_bytes((n + 7) / 8);
      m.bits.resize(n);
      for (std::size_t i = 0; i < n; ++i) m.bits[i] = (payload[i / 8] >> (i % 8)) & 1u;
      out.push_back(std::move(m));
    }
  } catch (const TruncatedInput& e) {
    throw MaskFileError(MaskFileErrc::truncated, std::string("mask file: truncated payload: ") + e.what());
  }
  if (r.remaining() != 0) {
    throw MaskFileError(MaskFileErrc::malformed, "mask file: trailing bytes after last layer");
  }
  ByteReader tail(bytes.last(kMaskTrailerBytes));
  const auto stored = tail.get<std::uint32_t>();
  if (stored != crc32_of(bytes.first(bytes.size() - kMaskTrailerBytes))) {
    throw MaskFileError(MaskFileErrc::checksum, "mask file: CRC32 mismatch");
  }
  return out;
}

std::vector<std::uint8_t> mask_payload(const MaskSet& masks) {
  std::vector<std::uint8_t> out;
  for (const auto& m : masks) pack_bits(m, out);
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_mask_file(const std::filesystem::path& path, const MaskSet& masks) {
  write_file_bytes(path, pack_masks(masks));
}

MaskSet read_mask_file(const std::filesystem::path& path) { return unpack_masks(read_file_bytes(path)); }

namespace {

class DeflateCodec final : public Codec {
 public:
  explicit DeflateCodec(int level) : level_(level) {}
  std::string name() const override { return "deflate"; }

  std::vector<std::uint8_t> compress(std::span<const std::uint8_t> in) const override {
    z_stream zs{};
    // windowBits 15 + 16 selects the gzip wrapper; zlib writes mtime 0.
    if (deflateInit2(&zs, level_, Z_DEFLATED, 15 + 16, 9, Z_DEFAULT_STRATEGY) != Z_OK) {
      throw std::runtime_error("deflate: init failed");
    }
    std::vector<std::uint8_t> out(deflateBound(&zs, static_cast<uLong>(in.size())) + 32);
    zs.next_in = const_cast<Bytef*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    zs.next_out = out.data();
    zs.avail_out = static_cast<uInt>(out.size());
    const int rc = deflate(&zs, Z_FINISH);
    const auto produced = zs.total_out;
    deflateEnd(&zs);
    if (rc != Z_STREAM_END) throw std::runtime_error("deflate: stream did not finish");
    out.resize(produced);
    return out;
  }

  std::vector<std::uint8_t> decompress(std::span<const std::uint8_t> in) const override {
    z_stream zs{};
    if (inflateInit2(&zs, 15 + 16) != Z_OK) throw std::runtime_error("inflate: init failed");
    zs.next_in = const_cast<Bytef*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    std::vector<std::uint8_t> out;
    std::uint8_t chunk[1 << 14];
    int rc = Z_OK;
    while (rc != Z_STREAM_END) {
      zs.next_out = chunk;
      zs.avail_out = sizeof(chunk);
      rc = inflate(&zs, Z_NO_FLUSH);
      if (rc != Z_OK && rc != Z_STREAM_END) {
        inflateEnd(&zs);
        throw std::runtime_error("inflate: corrupt stream");
      }
      out.insert(out.end(), chunk, chunk + (sizeof(chunk) - zs.avail_out));
      if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
        inflateEnd(&zs);
        throw std::runtime_error("inflate: truncated stream");
      }
    }
    inflateEnd(&zs);
    return out;
  }

 private:
  int level_;
};

}  // namespace

std::unique_ptr<Codec> make_deflate_codec(int level) { return std::make_unique<DeflateCodec>(level); }

std::unique_ptr<Codec> make_codec(const std::string& name) {
  if (name == "deflate" || name == "gzip") return make_deflate_codec();
  throw std::invalid_argument("unknown codec '" + name + "' (available: deflate)");
}

std::vector<std::string> available_codecs() { return {"deflate"}; }

StorageReport compression_benchmark(const std::string& method, std::span<const std::uint8_t> artifact,
                                    const std::vector<const Codec*>& codecs) {
  StorageReport rep;
  rep.method = method;
  rep.raw_bits = artifact.size() * 8;
  for (const Codec* c : codecs) {
    CodecResult r;
    r.codec = c->name();
    try {
      const auto z = c->compress(artifact);
      r.compressed_bits = z.size() * 8;
      r.reduction = rep.raw_bits ? 1.0 - static_cast<double>(r.compressed_bits) / static_cast<double>(rep.raw_bits)
                                 : 0.0;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    rep.codecs.push_back(std::move(r));
  }
  return rep;
}

StorageReport storage_report(const StorageCounts& counts, StorageMethod method, std::size_t k) {
  StorageReport rep;
  rep.float_reference_bits = 32 * counts.maskable_weights;
  switch (method) {
    case StorageMethod::fft:
      rep.method = "fft";
      rep.items.push_back({"float32 parameters", 32 * counts.finetuned_params});
      break;
    case StorageMethod::mask:
      rep.method = "mask";
      rep.items.push_back({"mask bits", counts.maskable_weights});
      break;
    case StorageMethod::cascade:
      rep.method = "cascade(" + std::to_string(k) + ")";
      rep.items.push_back({"dispatcher mask bits", counts.maskable_weights});
      rep.items.push_back({"expert mask bits", k * counts.maskable_weights});
      rep.items.push_back({"router f64 parameters", 64 * counts.router_params});
      rep.items.push_back({"whitening f64 parameters", 64 * counts.whitening_params});
      break;
  }
  for (const auto& it : rep.items) rep.raw_bits += it.bits;
  rep.ratio_vs_float = rep.raw_bits ? static_cast<double>(rep.float_reference_bits) / static_cast<double>(rep.raw_bits)
                                    : 0.0;
  return rep;
}

nlohmann::json StorageReport::to_json() const {
  nlohmann::json j;
  j["method"] = method;
  j["raw_bits"] = raw_bits;
  j["payload_bits"] = payload_bits ? nlohmann::json(*payload_bits) : nlohmann::json(nullptr);
  j["float_reference_bits"] = float_reference_bits;
  j["ratio_vs_float"] = ratio_vs_float;
  j["items"] = nlohmann::json::array();
  for (const auto& it : items) j["items"].push_back({{"name", it.name}, {"bits", it.bits}});
  j["codecs"] = nlohmann::json::array();
  for (const auto& c : codecs) {
    nlohmann::json cj = {{"codec", c.codec}, {"compressed_bits", c.compressed_bits}, {"reduction", c.reduction}};
    if (c.error) cj["error"] = *c.error;
    j["codecs"].push_back(cj);
  }
  return j;
}

}  // namespace smn
