#pragma once

// Named tensor files in the safetensors layout:
//   u64 little-endian header length N | N bytes of JSON header | raw data
// Header maps each name to {"dtype": "F64"|"F32", "shape": [...],
// "data_offsets": [begin, end]} relative to the data section; an optional
// "__metadata__" entry holds string -> string pairs. Files written here are
// F64. Files converted from PyTorch state dicts (F32) load as well.

#include <filesystem>
#include <map>
#include <string>

#include "seqcls/nn/tensor.hpp"

namespace seqcls {

struct TensorFile {
    std::map<std::string, nn::Tensor> tensors;
    std::map<std::string, std::string> metadata;
};

void write_tensor_file(const TensorFile& file, const std::filesystem::path& path);
TensorFile read_tensor_file(const std::filesystem::path& path);

// Writes to a sibling temp file, then renames over the target.
void write_tensor_file_atomic(const TensorFile& file, const std::filesystem::path& path);

}  // namespace seqcls
