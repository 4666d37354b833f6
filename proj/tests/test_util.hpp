#pragma once

#include "ibcr/common.hpp"

namespace ibcr::test {

// Runs f and reports the Errc it threw (Errc::Ok when nothing was thrown).
template <class F>
Errc thrown_code(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::Ok;
}

}  // namespace ibcr::test
