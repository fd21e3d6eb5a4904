#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dbench/tensor.h"

namespace dbench {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// CDL1 tensor block: "CDL1", u32 version, u32 count, then per tensor
// u16 name length, name bytes, u8 rank, u64 dims[rank], f32 payload (all LE).
std::string encode_cdl1(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_cdl1(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

// Looks up a tensor by name; throws MissingArtifactError if absent.
const Tensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name);

// Whole-file helpers. write_file_atomic writes to a sibling temp file and renames.
std::string read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

}  // namespace dbench
