#pragma once

#include <string>

namespace sepsisrl {

/// Lowercase hex SHA-256 of a byte string.
std::string sha256_hex(const std::string& bytes);

/// SHA-256 of a file's contents. Throws DataError if the file cannot be read.
std::string sha256_file(const std::string& path);

} // namespace sepsisrl
