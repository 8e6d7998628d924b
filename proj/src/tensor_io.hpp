#pragma once

// Binary tensor archive: 8-byte magic, length-prefixed JSON metadata, tensor
// count, then per tensor a length-prefixed name, element count and raw
// little-endian doubles.

#include <filesystem>
#include <istream>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dport/lm.hpp"

namespace dport::detail {

void write_tensor_file(const std::filesystem::path& path, std::string_view magic,
                       const nlohmann::json& meta, const std::vector<ConstParamRef>& tensors);

/// Opens `path`, checks the magic and returns the metadata; `in` is left
/// positioned at the tensor block.
nlohmann::json read_tensor_header(std::ifstream& in, const std::filesystem::path& path,
                                  std::string_view magic);

/// Reads tensors in order; names and sizes must match `tensors`.
void read_tensors(std::istream& in, const std::vector<ParamRef>& tensors);

}  // namespace dport::detail
