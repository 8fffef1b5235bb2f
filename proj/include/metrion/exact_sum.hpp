#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace metrion {

/// Correctly rounded floating-point summation.
///
/// Keeps a list of non-overlapping partial sums (Shewchuk's algorithm, as
/// used by Python's math.fsum), so the result is the exact sum of all added
/// terms rounded once to the nearest double. The result does not depend on
/// the order in which terms are added. Inputs must be finite.
class ExactSum {
 public:
  ExactSum() = default;

  void add(double x) {
    std::size_t i = 0;
    for (double y : partials_) {
      if (std::fabs(x) < std::fabs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials_[i++] = lo;
      x = hi;
    }
    partials_.resize(i);
    if (x != 0.0) partials_.push_back(x);
  }

  ExactSum& operator+=(double x) {
    add(x);
    return *this;
  }

  double value() const {
    if (partials_.empty()) return 0.0;
    std::size_t n = partials_.size();
    double hi = partials_[--n];
    double lo = 0.0;
    while (n > 0) {
      const double x = hi;
      const double y = partials_[--n];
      hi = x + y;
      const double yr = hi - x;
      lo = y - yr;
      if (lo != 0.0) break;
    }
    // Round-half-even correction when the remaining partials push the
    // discarded tail exactly onto a tie.
    if (n > 0 && ((lo < 0.0 && partials_[n - 1] < 0.0) ||
                  (lo > 0.0 && partials_[n - 1] > 0.0))) {
      const double y = lo * 2.0;
      const double x = hi + y;
      const double yr = x - hi;
      if (y == yr) hi = x;
    }
    return hi;
  }

 private:
  std::vector<double> partials_;
};

inline double exact_sum(std::span<const double> values) {
  ExactSum acc;
  for (double v : values) acc.add(v);
  return acc.value();
}

}  // namespace metrion
