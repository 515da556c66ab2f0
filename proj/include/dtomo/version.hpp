#pragma once

namespace dtomo {

inline constexpr const char* kToolName = "deformatomo";
inline constexpr const char* kVersion = "0.1.0";

}  // namespace dtomo
