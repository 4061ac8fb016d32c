// Test-only helpers shared by the GoogleTest binaries.
#pragma once

#include <functional>

#include <gtest/gtest.h>

#include "broadcam/errors.hpp"
#include "oracles.hpp"

namespace broadcam::testing {

// Error code raised by fn; records a failure if nothing is thrown.
inline ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no broadcam::Error thrown";
  return ErrorCode::kIo;
}

}  // namespace broadcam::testing
