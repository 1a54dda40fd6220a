#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stp/tensor.hpp"

namespace stp {

/// MOBT tensor file: "MOBT", u32 LE rank, rank x u64 LE dims, f64 LE payload.
std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes);

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

/// Writes to a sibling temp file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace stp
