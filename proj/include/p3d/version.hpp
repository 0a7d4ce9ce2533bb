#pragma once

namespace p3d {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace p3d
