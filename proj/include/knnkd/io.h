// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace knnkd::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

/// Failure while decoding one of the binary artifact formats. The kind lets
/// callers (and tests) tell truncation apart from corruption.
class FormatError : public std::runtime_error {
 public:
  enum class Kind { bad_magic, version_mismatch, truncated, checksum_mismatch, inconsistent };

  FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Two artifacts that must agree (checkpoint, datastore, neighbor file,
/// corpus) do not.
class IncompatibleArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Read-only memory mapping of a whole file. Move-only.
class MappedFile {
 public:
  MappedFile() = default;
  explicit MappedFile(const std::filesystem::path& path);
  MappedFile(MappedFile&& other) noexcept;
  MappedFile& operator=(MappedFile&& other) noexcept;
  MappedFile(const MappedFile&) = delete;
  MappedFile& operator=(const MappedFile&) = delete;
  ~MappedFile();

  std::span<const std::byte> bytes() const { return {data_, size_}; }
  std::size_t size() const { return size_; }

 private:
  void reset();

  const std::byte* data_ = nullptr;
  std::size_t size_ = 0;
};

class BinaryWriter {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const std::byte*>(&value);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  template <typename T>
  void put_array(std::span<const T> values) {
    const auto* p = reinterpret_cast<const std::byte*>(values.data());
    buf_.insert(buf_.end(), p, p + values.size_bytes());
  }
  void put_bytes(std::string_view s) {
    const auto* p = reinterpret_cast<const std::byte*>(s.data());
    buf_.insert(buf_.end(), p, p + s.size());
  }
  void pad_to(std::size_t alignment) {
    while (buf_.size() % alignment != 0) buf_.push_back(std::byte{0});
  }
  // Overwrites a previously reserved slot (used for checksums).
  template <typename T>
  void patch(std::size_t offset, T value) {
    std::memcpy(buf_.data() + offset, &value, sizeof(T));
  }
  std::size_t size() const { return buf_.size(); }
  std::span<const std::byte> bytes() const { return buf_; }
  std::vector<std::byte> release() { return std::move(buf_); }

 private:
  std::vector<std::byte> buf_;
};

/// Bounds-checked cursor over a byte buffer; running off the end is reported
/// as a truncated file.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::byte> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    require(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  void skip(std::size_t n) {
    require(n);
    pos_ += n;
  }
  std::size_t position() const { return pos_; }

 private:
  void require(std::size_t n) const {
    if (pos_ + n > bytes_.size()) {
      throw FormatError(FormatError::Kind::truncated, "truncated file");
    }
  }

  std::span<const std::byte> bytes_;
  std::size_t pos_ = 0;
};

constexpr std::size_t align_up(std::size_t n, std::size_t alignment) {
  return (n + alignment - 1) / alignment * alignment;
}

std::uint32_t crc32(std::span<const std::byte> bytes);

/// 64-bit FNV-1a; used for artifact fingerprints.
std::uint64_t fnv1a64(std::span<const std::byte> bytes);

/// Git blob object id (SHA-1 over "blob <len>\0" + content), lowercase hex.
std::string git_blob_hash(std::span<const std::byte> bytes);
std::string git_blob_hash_file(const std::filesystem::path& path);

std::vector<std::byte> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::byte> bytes);

std::vector<std::string> read_lines(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);
void write_lines(const std::filesystem::path& path, std::span<const std::string> lines);

}  // namespace knnkd::io
