#pragma once

// Little-endian binary helpers shared by the checkpoint and dataset formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "dynainfer/errors.hpp"

namespace dynainfer::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

template <class T>
void write_pod(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const char* field) {
  static_assert(std::is_trivially_copyable_v<T>);
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is || is.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw FormatError(std::string("truncated file while reading ") + field);
  }
  return value;
}

inline void write_doubles(std::ostream& os, const double* data,
                          std::size_t n) {
  os.write(reinterpret_cast<const char*>(data),
           static_cast<std::streamsize>(n * sizeof(double)));
}

inline void read_doubles(std::istream& is, double* data, std::size_t n,
                         const char* field) {
  const auto bytes = static_cast<std::streamsize>(n * sizeof(double));
  is.read(reinterpret_cast<char*>(data), bytes);
  if (!is || is.gcount() != bytes) {
    throw FormatError(std::string("truncated file while reading ") + field);
  }
}

}  // namespace dynainfer::io
