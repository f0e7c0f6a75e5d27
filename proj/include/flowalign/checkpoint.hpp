#pragma once

// Binary checkpoint container.
//
//   "FALN"                      4 bytes magic
//   version                     u16
//   meta_len, meta              u32 + UTF-8 "key=value\n" lines, keys sorted
//   net_count                   u32
//   per net:
//     n_widths, widths...       u32, u32 x n_widths
//     activation id             u8
//     seed                      u64
//     n_params, params...       u64, f64 x n_params
//
// All integers and floats are little-endian.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "flowalign/error.hpp"
#include "flowalign/netcore.hpp"

namespace flowalign {

inline constexpr std::array<char, 4> kCheckpointMagic{'F', 'A', 'L', 'N'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<Net> nets;

  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.append(bytes.data(), bytes.size());
}

class ByteReader {
 public:
  ByteReader(const std::string& data, std::string path) : data_(data), path_(std::move(path)) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > data_.size()) throw IoError(path_, "truncated checkpoint");
    std::array<char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), data_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, bytes.data(), sizeof(T));
    return value;
  }

  std::string get_bytes(std::size_t n) {
    if (pos_ + n > data_.size()) throw IoError(path_, "truncated checkpoint");
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == data_.size(); }

 private:
  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le<std::uint16_t>(out, kCheckpointVersion);
  std::string meta;
  for (const auto& [k, v] : ckpt.meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw InputError("checkpoint meta entries may not contain '=' in keys or newlines: " + k);
    }
    meta += k + "=" + v + "\n";
  }
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.nets.size()));
  for (const auto& net : ckpt.nets) {
    const auto& spec = net.spec();
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(spec.layer_widths.size()));
    for (auto w : spec.layer_widths) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(w));
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(spec.activation));
    detail::put_le<std::uint64_t>(out, spec.seed);
    detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(net.param_count()));
    for (double p : net.params()) detail::put_le<double>(out, p);
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& path = "<memory>") {
  detail::ByteReader r(bytes, path);
  const auto magic = r.get_bytes(4);
  if (std::memcmp(magic.data(), kCheckpointMagic.data(), 4) != 0) throw IoError(path, "bad checkpoint magic");
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) throw IoError(path, "unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const auto meta_len = r.get<std::uint32_t>();
  std::istringstream meta(r.get_bytes(meta_len));
  for (std::string line; std::getline(meta, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError(path, "malformed checkpoint meta line");
    ckpt.meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t n = 0; n < count; ++n) {
    NetSpec spec;
    const auto n_widths = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n_widths; ++i) spec.layer_widths.push_back(r.get<std::uint32_t>());
    const auto act = r.get<std::uint8_t>();
    if (act > 2) throw IoError(path, "unknown activation id " + std::to_string(act));
    spec.activation = static_cast<Activation>(act);
    spec.seed = r.get<std::uint64_t>();
    const auto n_params = r.get<std::uint64_t>();
    std::vector<double> params(n_params);
    for (auto& p : params) p = r.get<double>();
    try {
      ckpt.nets.emplace_back(std::move(spec), std::move(params));
    } catch (const Error& e) {
      throw IoError(path, e.what());
    }
  }
  if (!r.at_end()) throw IoError(path, "trailing bytes after checkpoint");
  return ckpt;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(path, "write failed");
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) { write_file(path, encode_checkpoint(ckpt)); }

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path), path); }

}  // namespace flowalign
