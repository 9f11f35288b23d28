#pragma once

#include <string>

namespace confmoe {

// Shortest round-trip-safe text for a double, at most 17 significant digits,
// '.' decimal point regardless of locale.
std::string format_real(double value);

}  // namespace confmoe
