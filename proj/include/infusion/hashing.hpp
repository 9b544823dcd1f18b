#pragma once

#include <string>
#include <string_view>

namespace infusion {

std::string sha256_hex(std::string_view bytes);

// Bit pattern of a double as 16 lowercase hex digits, and back.
std::string double_to_hex(double v);
double hex_to_double(std::string_view hex);

}  // namespace infusion
