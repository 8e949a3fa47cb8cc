#pragma once

// Little-endian binary helpers shared by the checkpoint and volume formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "fnoseg/common.hpp"

namespace fnoseg::binio {

template <class U>
U byteswap(U v) {
  static_assert(std::is_unsigned_v<U>);
  U out = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out = static_cast<U>((out << 8) | (v & 0xff));
    v = static_cast<U>(v >> 8);
  }
  return out;
}

template <class T>
using uint_of = std::conditional_t<sizeof(T) == 1, std::uint8_t,
                std::conditional_t<sizeof(T) == 2, std::uint16_t,
                std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;

/// Appends the little-endian bytes of each value.
template <class T>
void put(std::string& out, const T* values, std::size_t count) {
  const std::size_t at = out.size();
  out.resize(at + count * sizeof(T));
  char* dst = out.data() + at;
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    std::memcpy(dst, values, count * sizeof(T));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      auto u = byteswap(std::bit_cast<uint_of<T>>(values[i]));
      std::memcpy(dst + i * sizeof(T), &u, sizeof(T));
    }
  }
}

template <class T>
void put(std::string& out, T value) {
  put(out, &value, 1);
}

/// Cursor over an in-memory byte buffer; reading past the end is a truncation error.
class Reader {
 public:
  Reader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  template <class T>
  void get(T* values, std::size_t count) {
    need(count * sizeof(T));
    const char* src = bytes_.data() + pos_;
    if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
      std::memcpy(values, src, count * sizeof(T));
    } else {
      for (std::size_t i = 0; i < count; ++i) {
        uint_of<T> u;
        std::memcpy(&u, src + i * sizeof(T), sizeof(T));
        values[i] = std::bit_cast<T>(byteswap(u));
      }
    }
    pos_ += count * sizeof(T);
  }

  template <class T>
  T get() {
    T v{};
    get(&v, 1);
    return v;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(FormatError::Reason::kTruncated,
                        what_ + ": file ends early (need " + std::to_string(n) + " more bytes at offset " +
                            std::to_string(pos_) + ")");
    }
  }

  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace fnoseg::binio
