#pragma once

namespace duda {
inline constexpr const char* kVersion = "0.1.0";
}
