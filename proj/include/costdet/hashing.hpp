#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>

namespace costdet {

/// Lower-case hex SHA-256 digest.
std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_hex(std::string_view text);

std::string sha256_file(const std::string& path);

} // namespace costdet
