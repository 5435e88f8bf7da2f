#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace physio {

/// 64-bit FNV-1a. Used for change detection of settings, parameters and
/// cached files, not for security.
class Fnv1a {
 public:
  void update(std::span<const std::byte> bytes);
  void update(std::string_view text);
  void update(double value);
  std::uint64_t digest() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ull;
};

std::string hash_hex(std::string_view text);

/// Exact text form of a double (hexadecimal floating point), so that every
/// bit of the value reaches the hash.
std::string exact_repr(double value);

}  // namespace physio
