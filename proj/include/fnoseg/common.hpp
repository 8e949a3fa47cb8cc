#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <new>
#include <stdexcept>
#include <string>

namespace fnoseg {

/// Broad failure classes. The CLI maps each one to a distinct exit code.
enum class ErrorKind {
  kInvalidArgument,
  kShape,
  kConfig,
  kData,
  kFormat,
  kNumerical,
  kState,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& what) : Error(ErrorKind::kShape, what) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::kConfig, what) {}
};
struct DataError : Error {
  explicit DataError(const std::string& what) : Error(ErrorKind::kData, what) {}
};
struct NumericalError : Error {
  explicit NumericalError(const std::string& what) : Error(ErrorKind::kNumerical, what) {}
};
struct StateError : Error {
  explicit StateError(const std::string& what) : Error(ErrorKind::kState, what) {}
};

/// File-format failures carry a sub-reason so callers can tell a bad magic
/// from a short payload without string matching.
class FormatError : public Error {
 public:
  enum class Reason { kCorruptHeader, kTruncated, kVersionMismatch, kIo };
  FormatError(Reason reason, const std::string& what)
      : Error(ErrorKind::kFormat, what), reason_(reason) {}
  Reason reason() const noexcept { return reason_; }

 private:
  Reason reason_;
};

template <class T, std::size_t Alignment = 64>
struct AlignedAllocator {
  using value_type = T;
  template <class U>
  struct rebind {
    using other = AlignedAllocator<U, Alignment>;
  };

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U, Alignment>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{Alignment}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{Alignment}); }

  template <class U>
  bool operator==(const AlignedAllocator<U, Alignment>&) const noexcept {
    return true;
  }
};

// Worker count used by parallel_for. Work is split into contiguous blocks of
// independent items, so results never depend on the thread count.
void set_num_threads(int n);
int num_threads();
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

}  // namespace fnoseg
