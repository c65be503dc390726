#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace nudgecast {

/// Lowercase hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

/// SHA-256 of a file's contents. Throws BackendError if unreadable.
std::string sha256_file(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);

/// Writes through a sibling temp file and renames, so readers never see a
/// half-written file and concurrent writers resolve last-write-wins.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace nudgecast
