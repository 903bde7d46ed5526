#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>

namespace mulm {

/// Monotonic microsecond timestamps. Integer ticks keep span arithmetic exact.
using Micros = std::int64_t;

inline double to_ms(Micros us) noexcept { return static_cast<double>(us) / 1000.0; }

class Clock {
 public:
  virtual ~Clock() = default;
  virtual Micros now() const = 0;
};

class SteadyClock final : public Clock {
 public:
  Micros now() const override {
    return std::chrono::duration_cast<std::chrono::microseconds>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
  }
};

/// Test clock. Each now() call returns the current value and then advances
/// it by `tick`, so event stamps are deterministic and strictly ordered.
class ManualClock final : public Clock {
 public:
  explicit ManualClock(Micros start = 0, Micros tick = 0) : value_(start), tick_(tick) {}
  Micros now() const override { return value_.fetch_add(tick_); }
  void advance(Micros by) { value_.fetch_add(by); }
  void set(Micros to) { value_.store(to); }

 private:
  mutable std::atomic<Micros> value_;
  Micros tick_;
};

}  // namespace mulm
