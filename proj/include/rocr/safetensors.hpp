#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace rocr {

enum class DType { kF32, kF64 };

// A named dense tensor held in 64-bit regardless of its on-disk dtype. Data is
// row-major, matching the container layout.
struct Tensor {
  std::vector<std::int64_t> shape;
  DType dtype = DType::kF32;
  std::vector<double> data;

  std::int64_t numel() const;
};

using TensorMap = std::map<std::string, Tensor>;

// Parses a safetensors buffer: 8-byte little-endian header length, JSON
// header, then the packed data region. Only F32 and F64 are accepted. Any
// truncated, overlapping or out-of-range entry is rejected.
TensorMap parse_safetensors(std::span<const std::uint8_t> bytes,
                            std::map<std::string, std::string>* metadata = nullptr);
std::vector<std::uint8_t> serialize_safetensors(const TensorMap& tensors,
                                                const std::map<std::string, std::string>& metadata = {});

TensorMap read_safetensors(const std::filesystem::path& path,
                           std::map<std::string, std::string>* metadata = nullptr);
void write_safetensors(const std::filesystem::path& path, const TensorMap& tensors,
                       const std::map<std::string, std::string>& metadata = {});

}  // namespace rocr
