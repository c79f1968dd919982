#pragma once

namespace pother {

inline constexpr const char* kCodeVersion = "0.4.0";

}  // namespace pother
