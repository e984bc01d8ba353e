#pragma once

// Little-endian binary encoding, CRC32 framing, atomic file writes and
// JSONL helpers shared by every on-disk format.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaper/error.hpp"
#include "metaper/numerics.hpp"

namespace metaper {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

inline std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()),
                static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

class ByteWriter {
 public:
  void raw(std::string_view bytes) { buf_.append(bytes); }

  template <typename T>
  void put(T value) {
    char tmp[sizeof(T)];
    std::memcpy(tmp, &value, sizeof(T));
    buf_.append(tmp, sizeof(T));
  }

  void u16(std::uint16_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f32(double v) { put(static_cast<float>(v)); }

  void short_string(std::string_view s) {
    if (s.size() > UINT16_MAX) throw Error(ErrorCode::kInvalidArgument, "string too long");
    u16(static_cast<std::uint16_t>(s.size()));
    raw(s);
  }

  void long_string(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }

  void f32_values(std::span<const double> v) {
    for (double x : v) f32(x);
  }

  /// Appends the CRC32 of everything written so far.
  void seal() { u32(crc32_of(buf_)); }

  const std::string& bytes() const noexcept { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f32() { return static_cast<double>(get<float>()); }

  std::string_view raw(std::size_t n) {
    need(n);
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::string short_string() { return std::string(raw(u16())); }
  std::string long_string() { return std::string(raw(u32())); }

  void f32_values(std::span<double> out) {
    for (double& x : out) x = f32();
  }

  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw Error(ErrorCode::kTruncated, "unexpected end of data at offset " + std::to_string(pos_));
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

/// Checks the 4-byte magic and the trailing CRC32; returns the payload
/// (everything before the CRC).
inline std::string_view check_framing(std::string_view bytes, std::string_view magic,
                                      const std::string& what) {
  if (bytes.size() < magic.size() || bytes.substr(0, magic.size()) != magic) {
    throw Error(ErrorCode::kBadMagic, what + ": expected magic " + std::string(magic));
  }
  if (bytes.size() < magic.size() + 4) throw Error(ErrorCode::kTruncated, what);
  const auto payload = bytes.substr(0, bytes.size() - 4);
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  if (crc32_of(payload) != stored) {
    throw Error(ErrorCode::kCrcMismatch, what + ": checksum does not match");
  }
  return payload;
}

inline std::string read_file(const std::filesystem::path& path,
                             ErrorCode missing = ErrorCode::kFileNotFound) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(missing, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Writes to a sibling temp file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::kIo, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string file_hash(const std::filesystem::path& path) {
  return hex64(fnv1a64(read_file(path)));
}

inline std::vector<json> parse_jsonl(std::string_view text, const std::string& what) {
  std::vector<json> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::kSchema, what + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::string to_jsonl(const std::vector<json>& rows) {
  std::string out;
  for (const auto& r : rows) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

/// Fetches a required key, turning nlohmann type errors into schema errors.
template <typename T>
T require(const json& obj, const char* key, const std::string& what) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw Error(ErrorCode::kSchema, what + ": missing field '" + key + "'");
  }
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kSchema, what + ": field '" + key + "': " + e.what());
  }
}

}  // namespace metaper
