#pragma once

#include <cmath>

#include "ibcr/common.hpp"

namespace ibcr {

// Decomposition of total overhead into a fixed startup cost plus a runtime
// fraction: o = s + r*t, fitted from two (runtime, overhead) observations.
struct OverheadFit {
  double startup_seconds = 0.0;  // s
  double runtime_ratio = 0.0;    // r (fraction, not percent)

  double overhead_at(double t) const { return startup_seconds + runtime_ratio * t; }
};

inline OverheadFit derive_overhead(double t1, double o1, double t2, double o2) {
  if (t1 == t2) fail(Errc::DegenerateInputs, "equal native runtimes");
  OverheadFit fit;
  fit.runtime_ratio = (o2 - o1) / (t2 - t1);
  fit.startup_seconds = o1 - fit.runtime_ratio * t1;
  return fit;
}

}  // namespace ibcr
