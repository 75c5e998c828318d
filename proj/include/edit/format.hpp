#pragma once

#include <cstdio>
#include <string>

namespace edit {

/// Decimal rendering with `digits` significant digits; the only float
/// formatting used in reports so reruns stay byte-identical.
inline std::string format_real(double v, int digits = 12) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
    return buf;
}

}  // namespace edit
