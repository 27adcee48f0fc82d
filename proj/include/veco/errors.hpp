#pragma once

#include <stdexcept>
#include <string>

namespace veco {

/// Bad or inconsistent input data: corrupt files, unknown tokens,
/// malformed corpora, config mismatches.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite values where finite ones are required (loss, gradients).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace veco
