#pragma once

#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "lwd/tensor.hpp"

namespace lwd {

/// Versioned binary container: a JSON header (kind, free-form metadata, tensor
/// table) followed by little-endian float64 payloads.
///
///   bytes 0..7    magic "LWDARCH1"
///   bytes 8..11   uint32 format version
///   bytes 12..15  uint32 reserved (0)
///   bytes 16..23  uint64 header length H
///   next H bytes  UTF-8 JSON header
///   remainder     tensor payloads in header order
///
/// Serialization is deterministic: tensors are ordered by name and the JSON
/// header has sorted keys, so equal contents hash equally.
class Archive {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  Archive() = default;
  explicit Archive(std::string kind) : kind_(std::move(kind)) {}

  const std::string& kind() const { return kind_; }
  nlohmann::json& meta() { return meta_; }
  const nlohmann::json& meta() const { return meta_; }

  void put(const std::string& name, Tensor t);
  bool has(const std::string& name) const { return tensors_.count(name) > 0; }
  const Tensor& get(const std::string& name) const;
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }

  std::vector<unsigned char> serialize() const;
  static Archive deserialize(const std::vector<unsigned char>& bytes, const std::string& origin);

  /// Writes atomically (temp file + rename).
  void save(const std::filesystem::path& path) const;
  /// Throws LoadError naming `path` on I/O or format problems, and when
  /// `expected_kind` is non-empty and does not match.
  static Archive load(const std::filesystem::path& path, const std::string& expected_kind = "");

  std::string sha256() const;

 private:
  std::string kind_;
  nlohmann::json meta_ = nlohmann::json::object();
  std::map<std::string, Tensor> tensors_;
};

std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_hex(const std::string& s);
std::string file_sha256(const std::filesystem::path& path);

void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_text_file(const std::filesystem::path& path);

/// Stable fingerprint of a set of named tensors (first 16 hex chars of SHA-256).
std::string tensor_fingerprint(const std::map<std::string, Tensor>& tensors);

}  // namespace lwd
