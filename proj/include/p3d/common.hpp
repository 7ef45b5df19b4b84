#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace p3d {

// Error taxonomy maps onto the CLI exit-code contract:
//   ConfigError / IoError -> exit 2, NumericError -> exit 3,
//   anything else (failed check, threshold miss) -> exit 1.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Canonical axis labels for the 5-D activation layout [N,C,T,H,W]. Shape
// diagnostics use these so an error can say "axis T" instead of "axis 2".
inline std::string axis_name(int rank, int axis) {
  static const char* names5[] = {"N", "C", "T", "H", "W"};
  if (rank == 5 && axis >= 0 && axis < 5) return names5[axis];
  return "axis " + std::to_string(axis);
}

// Optional multiply-add meter. When armed, every op adds its actual inner-loop
// trip count under the documented convention (convolution taps and matmul
// products without bias adds, one per element for normalization, activations,
// elementwise arithmetic and pooling, zero for concat and reshape). The
// analytic cost model is validated against this meter on live forwards.
namespace madd_meter {
namespace detail {
inline thread_local bool armed = false;
inline thread_local std::uint64_t count = 0;
}  // namespace detail

inline void arm() {
  detail::armed = true;
  detail::count = 0;
}
inline void disarm() { detail::armed = false; }
inline std::uint64_t value() { return detail::count; }
inline void add(std::uint64_t n) {
  if (detail::armed) detail::count += n;
}
}  // namespace madd_meter

}  // namespace p3d
