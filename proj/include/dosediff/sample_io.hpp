#pragma once

// Binary sample files.
//
//   "SPDP" | u16 version | u16 H | u16 W | u16 O | channels | u32 n | n bytes
//
// Channels are little-endian f32, row-major, in the order CT, PTV,
// OAR_1..OAR_O, dose. The trailing block is UTF-8 "key=value\n" lines.
// A dose-only file (model predictions) sets O = 0xFFFF and carries a single
// dose channel.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dosediff/phantom.hpp"

namespace dosediff::data {

inline constexpr std::uint16_t kSampleVersion = 1;
inline constexpr std::uint16_t kDoseOnly = 0xFFFF;

class SampleFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public SampleFormatError {
 public:
  using SampleFormatError::SampleFormatError;
};
class VersionMismatchError : public SampleFormatError {
 public:
  using SampleFormatError::SampleFormatError;
};
class TruncatedError : public SampleFormatError {
 public:
  using SampleFormatError::SampleFormatError;
};

struct SampleHeader {
  std::uint16_t version = kSampleVersion, height = 0, width = 0, oar_count = 0;

  bool dose_only() const { return oar_count == kDoseOnly; }
  /// CT + PTV + OARs + dose, or just dose.
  std::size_t channel_count() const { return dose_only() ? 1 : 2u + oar_count + 1u; }
};

struct DoseMap {
  std::size_t size = 0;
  std::vector<float> dose;
  std::map<std::string, std::string> meta;
  bool operator==(const DoseMap&) const = default;
};

namespace detail {

class Writer {
 public:
  void u16(std::uint16_t v) {
    out_.push_back(static_cast<char>(v & 0xFF));
    out_.push_back(static_cast<char>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int k = 0; k < 4; ++k) out_.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
  }
  void f32(const std::vector<float>& xs) {
    for (float x : xs) u32(std::bit_cast<std::uint32_t>(x));
  }
  void raw(const std::string& s) { out_ += s; }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) throw TruncatedError(std::string("sample file truncated in ") + what);
  }
  std::uint8_t byte() { return static_cast<std::uint8_t>(b_[pos_++]); }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const std::uint16_t lo = byte();
    return static_cast<std::uint16_t>(lo | (byte() << 8));
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(byte()) << (8 * k);
    return v;
  }
  std::vector<float> f32(std::size_t n, const char* what) {
    need(4 * n, what);
    std::vector<float> v(n);
    for (auto& x : v) x = std::bit_cast<float>(u32(what));
    return v;
  }
  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

inline std::string encode_meta(const std::map<std::string, std::string>& meta) {
  std::string s;
  for (const auto& [k, v] : meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw std::invalid_argument("metadata key/value contains a reserved character: " + k);
    s += k + "=" + v + "\n";
  }
  return s;
}

inline std::map<std::string, std::string> decode_meta(const std::string& text) {
  std::map<std::string, std::string> meta;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw SampleFormatError("metadata line without '=': " + line);
    meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return meta;
}

inline std::uint16_t checked_u16(std::size_t v, const char* what) {
  if (v >= 0xFFFF) throw std::invalid_argument(std::string("sample ") + what + " too large for the file format");
  return static_cast<std::uint16_t>(v);
}

inline void write_header(Writer& w, const SampleHeader& h) {
  w.raw("SPDP");
  w.u16(h.version);
  w.u16(h.height);
  w.u16(h.width);
  w.u16(h.oar_count);
}

inline void write_meta(Writer& w, const std::map<std::string, std::string>& meta) {
  const std::string m = encode_meta(meta);
  w.u32(static_cast<std::uint32_t>(m.size()));
  w.raw(m);
}

}  // namespace detail

inline SampleHeader decode_header(detail::Reader& r) {
  r.need(4, "magic");
  const std::string magic = r.raw(4, "magic");
  if (magic != "SPDP") throw BadMagicError("not a sample file (bad magic)");
  SampleHeader h;
  h.version = r.u16("header");
  if (h.version != kSampleVersion) {
    throw VersionMismatchError("sample file version " + std::to_string(h.version) + ", expected " +
                               std::to_string(kSampleVersion));
  }
  h.height = r.u16("header");
  h.width = r.u16("header");
  h.oar_count = r.u16("header");
  if (h.height != h.width) throw SampleFormatError("non-square sample files are not supported");
  return h;
}

inline std::string encode_sample(const PhantomSample& s) {
  detail::Writer w;
  const auto H = detail::checked_u16(s.size, "size");
  detail::write_header(w, {kSampleVersion, H, H, detail::checked_u16(s.oar_count, "OAR count")});
  w.f32(s.ct);
  w.f32(s.ptv);
  for (const auto& m : s.oars) w.f32(m);
  w.f32(s.dose);
  detail::write_meta(w, s.meta);
  return w.take();
}

inline PhantomSample decode_sample(const std::string& bytes) {
  detail::Reader r(bytes);
  const SampleHeader h = decode_header(r);
  if (h.dose_only()) throw SampleFormatError("dose-only file where a full sample was expected");
  PhantomSample s;
  s.size = h.height;
  s.oar_count = h.oar_count;
  const std::size_t P = s.pixels();
  s.ct = r.f32(P, "CT channel");
  s.ptv = r.f32(P, "PTV channel");
  for (std::size_t k = 0; k < s.oar_count; ++k) s.oars.push_back(r.f32(P, "OAR channel"));
  s.dose = r.f32(P, "dose channel");
  const std::uint32_t n = r.u32("metadata length");
  s.meta = detail::decode_meta(r.raw(n, "metadata"));
  if (!r.done()) throw SampleFormatError("trailing bytes after metadata");
  return s;
}

inline std::string encode_dose_map(const DoseMap& d) {
  detail::Writer w;
  const auto H = detail::checked_u16(d.size, "size");
  detail::write_header(w, {kSampleVersion, H, H, kDoseOnly});
  w.f32(d.dose);
  detail::write_meta(w, d.meta);
  return w.take();
}

inline DoseMap decode_dose_map(const std::string& bytes) {
  detail::Reader r(bytes);
  const SampleHeader h = decode_header(r);
  if (!h.dose_only()) throw SampleFormatError("full sample file where a dose-only file was expected");
  DoseMap d;
  d.size = h.height;
  d.dose = r.f32(d.size * d.size, "dose channel");
  const std::uint32_t n = r.u32("metadata length");
  d.meta = detail::decode_meta(r.raw(n, "metadata"));
  if (!r.done()) throw SampleFormatError("trailing bytes after metadata");
  return d;
}

inline SampleHeader peek_header(const std::string& bytes) {
  detail::Reader r(bytes);
  return decode_header(r);
}

// ---------------------------------------------------------------------------
// Files.

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline void write_sample(const std::filesystem::path& path, const PhantomSample& s) {
  write_file(path, encode_sample(s));
}
inline PhantomSample read_sample(const std::filesystem::path& path) { return decode_sample(read_file(path)); }

inline void write_dose_map(const std::filesystem::path& path, const DoseMap& d) {
  write_file(path, encode_dose_map(d));
}
inline DoseMap read_dose_map(const std::filesystem::path& path) { return decode_dose_map(read_file(path)); }

}  // namespace dosediff::data
