#pragma once

namespace kinefit {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace kinefit
