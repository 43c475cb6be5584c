#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace upass {

/// Splits one CSV line on commas. No quoting: identifiers must not contain commas.
std::vector<std::string> split_csv(std::string_view line);

/// Shortest decimal form that round-trips to the same double.
std::string format_double(double value);

/// Parses a full double / integer field, throwing ValidationError naming the field.
double parse_double(std::string_view field, std::string_view what);
long long parse_int(std::string_view field, std::string_view what);

std::string read_file(const std::filesystem::path& path);

/// Writes via a temporary sibling and rename, creating parent directories.
void write_file(const std::filesystem::path& path, std::string_view contents);

/// Number of items a percentage of n selects: ceil(n * pct / 100).
/// A relative slack of 1e-9 absorbs representation error (1% of 44000 is 440, not 441).
std::size_t percent_count(std::size_t n, double pct);

/// Hex-encoded SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

}  // namespace upass
