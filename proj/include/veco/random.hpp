#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace veco {

using Rng = std::mt19937_64;

inline double uniform_real(Rng& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    return dist(rng);
}

inline std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
    std::uniform_int_distribution<std::int64_t> dist(lo, hi);
    return dist(rng);
}

/// Box-Muller without hidden distribution state, so the draw count per call
/// is fixed and engine serialization captures everything.
inline double normal_real(Rng& rng) {
    double u1 = uniform_real(rng, 1e-12, 1.0);
    double u2 = uniform_real(rng, 0.0, 1.0);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

inline std::string serialize_rng(const Rng& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

inline void deserialize_rng(Rng& rng, const std::string& text) {
    std::istringstream is(text);
    is >> rng;
}

}  // namespace veco
