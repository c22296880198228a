#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "convattn/errors.hpp"

namespace convattn::io {

template <class T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

template <class T>
void write_le(std::ostream& os, T v) {
  v = byteswap_if_big(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_le(std::istream& is, const std::string& what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("truncated " + what);
  return byteswap_if_big(v);
}

inline void write_doubles(std::ostream& os, const double* p, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
  } else {
    for (std::size_t i = 0; i < n; ++i) write_le(os, p[i]);
  }
}

inline void read_doubles(std::istream& is, double* p, std::size_t n, const std::string& what) {
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) throw FormatError("truncated " + what);
  } else {
    for (std::size_t i = 0; i < n; ++i) p[i] = read_le<double>(is, what);
  }
}

}  // namespace convattn::io
