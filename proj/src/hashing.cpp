#include "physio/hashing.hpp"

#include <cstdio>
#include <cstring>

namespace physio {

void Fnv1a::update(std::span<const std::byte> bytes) {
  for (std::byte b : bytes) {
    state_ ^= static_cast<std::uint64_t>(b);
    state_ *= 0x100000001b3ull;
  }
}

void Fnv1a::update(std::string_view text) { update(std::as_bytes(std::span(text.data(), text.size()))); }

void Fnv1a::update(double value) {
  std::byte raw[sizeof(double)];
  std::memcpy(raw, &value, sizeof(double));
  update(std::span<const std::byte>(raw));
}

std::string Fnv1a::hex() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(state_));
  return buf;
}

std::string hash_hex(std::string_view text) {
  Fnv1a h;
  h.update(text);
  return h.hex();
}

std::string exact_repr(double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", value);
  return buf;
}

}  // namespace physio
