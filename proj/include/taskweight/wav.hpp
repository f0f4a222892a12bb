// Mono 16-bit PCM WAV reading and writing.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "taskweight/common.hpp"

namespace taskweight {

namespace detail {
inline void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}
inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}
}  // namespace detail

inline void write_wav(const std::string& path, const std::vector<double>& samples,
                      std::uint32_t sample_rate) {
  std::string bytes;
  bytes.reserve(44 + samples.size() * 2);
  std::uint32_t data_size = static_cast<std::uint32_t>(samples.size() * 2);
  bytes += "RIFF";
  detail::put_u32(bytes, 36 + data_size);
  bytes += "WAVEfmt ";
  detail::put_u32(bytes, 16);
  detail::put_u16(bytes, 1);  // PCM
  detail::put_u16(bytes, 1);  // mono
  detail::put_u32(bytes, sample_rate);
  detail::put_u32(bytes, sample_rate * 2);
  detail::put_u16(bytes, 2);
  detail::put_u16(bytes, 16);
  bytes += "data";
  detail::put_u32(bytes, data_size);
  for (double s : samples) {
    double clamped = std::clamp(s, -1.0, 1.0);
    auto q = static_cast<std::int16_t>(std::lrint(clamped * 32767.0));
    detail::put_u16(bytes, static_cast<std::uint16_t>(q));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_wav: cannot open " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write_wav: write failed for " + path);
}

struct WavData {
  std::vector<double> samples;
  std::uint32_t sample_rate = 0;
};

inline WavData read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_wav: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  auto u32 = [&](std::size_t off) -> std::uint32_t {
    if (off + 4 > bytes.size()) throw ParseError("read_wav: truncated file " + path);
    return static_cast<std::uint8_t>(bytes[off]) |
           (static_cast<std::uint8_t>(bytes[off + 1]) << 8) |
           (static_cast<std::uint8_t>(bytes[off + 2]) << 16) |
           (static_cast<std::uint8_t>(bytes[off + 3]) << 24);
  };
  auto u16 = [&](std::size_t off) -> std::uint16_t {
    if (off + 2 > bytes.size()) throw ParseError("read_wav: truncated file " + path);
    return static_cast<std::uint16_t>(static_cast<std::uint8_t>(bytes[off]) |
                                      (static_cast<std::uint8_t>(bytes[off + 1]) << 8));
  };
  if (bytes.size() < 12 || bytes.compare(0, 4, "RIFF") != 0 || bytes.compare(8, 4, "WAVE") != 0)
    throw ParseError("read_wav: not a RIFF/WAVE file: " + path);

  WavData out;
  std::uint16_t channels = 0, bits = 0, format = 0;
  bool got_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    std::string id = bytes.substr(pos, 4);
    std::uint32_t size = u32(pos + 4);
    std::size_t body = pos + 8;
    if (id == "fmt ") {
      format = u16(body);
      channels = u16(body + 2);
      out.sample_rate = u32(body + 4);
      bits = u16(body + 14);
      got_fmt = true;
    } else if (id == "data") {
      if (!got_fmt) throw ParseError("read_wav: data chunk before fmt in " + path);
      if (format != 1 || bits != 16)
        throw ParseError("read_wav: only 16-bit PCM is supported: " + path);
      if (channels != 1) throw ParseError("read_wav: only mono audio is supported: " + path);
      if (body + size > bytes.size()) throw ParseError("read_wav: truncated data in " + path);
      std::size_t n = size / 2;
      out.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        auto v = static_cast<std::int16_t>(u16(body + 2 * i));
        out.samples[i] = static_cast<double>(v) / 32767.0;
      }
      return out;
    }
    pos = body + size + (size % 2);  // chunks are word-aligned
  }
  throw ParseError("read_wav: no data chunk in " + path);
}

}  // namespace taskweight
