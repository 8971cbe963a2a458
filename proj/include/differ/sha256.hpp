#pragma once

#include <string>
#include <string_view>

namespace differ {

// Hex-encoded SHA-256 digest. Used for cache keys and artifact ids.
std::string sha256_hex(std::string_view data);

}  // namespace differ
