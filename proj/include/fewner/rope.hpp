#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "fewner/errors.hpp"

namespace fewner {

/// Standard rotary transform: coordinate pairs (v_{2t}, v_{2t+1}) rotated by
/// angle pos * θ_t with θ_t = base^(-2t/h). Norm-preserving, and the rotation
/// family satisfies R_i^T R_j = R_{j-i}.
inline void rope_rotate_into(const double* v, std::size_t h, long pos, double base,
                             double* out) {
  if (h % 2 != 0) throw ConfigError("rotary transform requires an even width");
  for (std::size_t t = 0; 2 * t < h; ++t) {
    const double theta =
        std::pow(base, -2.0 * static_cast<double>(t) / static_cast<double>(h));
    const double angle = static_cast<double>(pos) * theta;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double a = v[2 * t];
    const double b = v[2 * t + 1];
    out[2 * t] = a * c - b * s;
    out[2 * t + 1] = a * s + b * c;
  }
}

inline std::vector<double> rope_rotate(const std::vector<double>& v, long pos,
                                       double base = 10000.0) {
  std::vector<double> out(v.size());
  rope_rotate_into(v.data(), v.size(), pos, base, out.data());
  return out;
}

}  // namespace fewner
