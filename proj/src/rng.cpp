#include "stcnet/rng.hpp"

#include <cmath>

namespace stcnet {

namespace {

constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ull;

uint64_t mix64(uint64_t x) {
  x += kGolden;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

uint64_t hash_label(std::string_view label) {
  uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace

RngStream::RngStream(uint64_t seed, std::string_view label, uint64_t instance) {
  key_ = mix64(mix64(seed) ^ hash_label(label));
  key_ = mix64(key_ ^ mix64(instance ^ 0xA5A5A5A5A5A5A5A5ull));
}

RngStream RngStream::fork(uint64_t instance) const {
  return RngStream(mix64(key_ ^ mix64(instance ^ 0x5851F42D4C957F2Dull)));
}

uint64_t RngStream::u64_at(uint64_t counter) const {
  return mix64(key_ + counter * kGolden);
}

double RngStream::u01_at(uint64_t counter) const {
  return (static_cast<double>(u64_at(counter) >> 11) + 0.5) * 0x1.0p-53;
}

double RngStream::next_gauss() {
  double u1 = next_u01();
  double u2 = next_u01();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace stcnet
