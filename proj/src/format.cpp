#include "confmoe/format.hpp"

#include <array>
#include <charconv>

namespace confmoe {

std::string format_real(double value) {
    std::array<char, 64> buf{};
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), value, std::chars_format::general, 17);
    return std::string(buf.data(), res.ptr);
}

}  // namespace confmoe
