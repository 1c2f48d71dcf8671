#pragma once

#include <cstdint>
#include <string_view>

namespace stcnet {

// Counter-based random stream. The value at counter i is a pure function of
// (seed, label, forks, i), so sequences replay bit-identically and can be
// indexed out of order. Forking derives an independent substream.
class RngStream {
 public:
  RngStream() = default;
  RngStream(uint64_t seed, std::string_view label, uint64_t instance = 0);

  RngStream fork(uint64_t instance) const;

  uint64_t u64_at(uint64_t counter) const;
  double u01_at(uint64_t counter) const;  // uniform, strictly inside (0, 1)

  uint64_t next_u64() { return u64_at(counter_++); }
  double next_u01() { return u01_at(counter_++); }
  double next_gauss();                    // Box-Muller; consumes two counters

 private:
  explicit RngStream(uint64_t key) : key_(key) {}
  uint64_t key_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace stcnet
