#include "rocr/safetensors.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <json.hpp>

#include "rocr/error.hpp"
#include "rocr/io.hpp"

namespace rocr {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

namespace {

std::size_t dtype_size(DType dtype) { return dtype == DType::kF32 ? 4 : 8; }

const char* dtype_name(DType dtype) { return dtype == DType::kF32 ? "F32" : "F64"; }

}  // namespace

std::int64_t Tensor::numel() const {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

TensorMap parse_safetensors(std::span<const std::uint8_t> bytes,
                            std::map<std::string, std::string>* metadata) {
  if (bytes.size() < 8) fail(ErrorKind::kCorruption, "safetensors: file shorter than header prefix");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data(), 8);
  if (header_len > bytes.size() - 8) {
    fail(ErrorKind::kCorruption, "safetensors: header length exceeds file size (truncated?)");
  }
  const std::string header_text(reinterpret_cast<const char*>(bytes.data() + 8), header_len);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kCorruption, std::string("safetensors: malformed header: ") + e.what());
  }
  if (!header.is_object()) fail(ErrorKind::kCorruption, "safetensors: header is not an object");

  const std::uint8_t* data = bytes.data() + 8 + header_len;
  const std::uint64_t data_len = bytes.size() - 8 - header_len;

  TensorMap out;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> extents;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      if (metadata && entry.is_object()) {
        for (const auto& [k, v] : entry.items()) {
          if (v.is_string()) (*metadata)[k] = v.get<std::string>();
        }
      }
      continue;
    }
    try {
      Tensor t;
      const auto dtype = entry.at("dtype").get<std::string>();
      if (dtype == "F32") {
        t.dtype = DType::kF32;
      } else if (dtype == "F64") {
        t.dtype = DType::kF64;
      } else {
        fail(ErrorKind::kCorruption, "safetensors: unsupported dtype " + dtype + " for '" + name + "'");
      }
      t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      for (auto d : t.shape) {
        if (d < 0) fail(ErrorKind::kCorruption, "safetensors: negative dimension in '" + name + "'");
      }
      const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (offsets.size() != 2 || offsets[0] > offsets[1] || offsets[1] > data_len) {
        fail(ErrorKind::kCorruption, "safetensors: data offsets out of range for '" + name + "'");
      }
      const std::uint64_t expected = static_cast<std::uint64_t>(t.numel()) * dtype_size(t.dtype);
      if (offsets[1] - offsets[0] != expected) {
        fail(ErrorKind::kCorruption, "safetensors: byte length does not match shape for '" + name + "'");
      }
      extents.emplace_back(offsets[0], offsets[1]);
      t.data.resize(static_cast<std::size_t>(t.numel()));
      const std::uint8_t* src = data + offsets[0];
      if (t.dtype == DType::kF32) {
        for (std::size_t i = 0; i < t.data.size(); ++i) {
          float f;
          std::memcpy(&f, src + 4 * i, 4);
          t.data[i] = f;
        }
      } else {
        std::memcpy(t.data.data(), src, t.data.size() * 8);
      }
      out.emplace(name, std::move(t));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kCorruption, "safetensors: bad entry '" + name + "': " + e.what());
    }
  }
  std::sort(extents.begin(), extents.end());
  for (std::size_t i = 1; i < extents.size(); ++i) {
    if (extents[i].first < extents[i - 1].second) {
      fail(ErrorKind::kCorruption, "safetensors: overlapping tensor data");
    }
  }
  return out;
}

std::vector<std::uint8_t> serialize_safetensors(const TensorMap& tensors,
                                                const std::map<std::string, std::string>& metadata) {
  nlohmann::json header = nlohmann::json::object();
  if (!metadata.empty()) header["__metadata__"] = metadata;
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (static_cast<std::int64_t>(t.data.size()) != t.numel()) {
      fail(ErrorKind::kShape, "tensor '" + name + "' data does not match its shape");
    }
    const std::uint64_t len = t.data.size() * dtype_size(t.dtype);
    header[name] = {{"dtype", dtype_name(t.dtype)}, {"shape", t.shape}, {"data_offsets", {offset, offset + len}}};
    offset += len;
  }
  std::string header_text = header.dump();
  while ((header_text.size() + 8) % 8 != 0) header_text.push_back(' ');

  std::vector<std::uint8_t> out(8 + header_text.size() + offset);
  const std::uint64_t header_len = header_text.size();
  std::memcpy(out.data(), &header_len, 8);
  std::memcpy(out.data() + 8, header_text.data(), header_text.size());
  std::uint8_t* dst = out.data() + 8 + header_text.size();
  for (const auto& [name, t] : tensors) {
    if (t.dtype == DType::kF32) {
      for (double v : t.data) {
        const float f = static_cast<float>(v);
        std::memcpy(dst, &f, 4);
        dst += 4;
      }
    } else {
      std::memcpy(dst, t.data.data(), t.data.size() * 8);
      dst += t.data.size() * 8;
    }
  }
  return out;
}

TensorMap read_safetensors(const std::filesystem::path& path, std::map<std::string, std::string>* metadata) {
  const auto bytes = read_binary_file(path);
  return parse_safetensors(bytes, metadata);
}

void write_safetensors(const std::filesystem::path& path, const TensorMap& tensors,
                       const std::map<std::string, std::string>& metadata) {
  const auto bytes = serialize_safetensors(tensors, metadata);
  write_binary_file(path, bytes);
}

}  // namespace rocr
