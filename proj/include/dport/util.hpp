#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace dport {

/// Lower-case hex SHA-256 digest.
std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

/// Current UTC time as ISO-8601 (manifests only; never written into artifacts).
std::string utc_timestamp();

/// Shortest decimal form that round-trips a double.
std::string format_double(double v);

}  // namespace dport
