#pragma once

namespace htmle {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace htmle
