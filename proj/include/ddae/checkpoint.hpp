#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ddae/tensor.hpp"

namespace ddae {

class DDAENetwork;

// Single-file tensor container:
//
//   <UTF-8 JSON header> "\n\0" <payload>
//
// The header maps tensor names to {"dtype": "f32", "shape": [...],
// "byte_offset": n}, offsets relative to the payload start; payloads are raw
// little-endian float32. The optional reserved key "__metadata__" holds a
// free-form JSON object. Round trips are bitwise exact.
struct TensorArchive {
  std::vector<std::pair<std::string, Tensor>> tensors;
  nlohmann::json metadata = nlohmann::json::object();

  const Tensor& get(const std::string& name) const;  // throws DataError if missing
  bool contains(const std::string& name) const;
};

void save_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive load_archive(const std::filesystem::path& path);
std::string encode_archive(const TensorArchive& archive);
TensorArchive decode_archive(const std::string& bytes, const std::string& origin = "<memory>");

// Network checkpoints store every parameter by name plus the config in
// metadata["ddae_config"].
void save_network(const std::filesystem::path& path, const DDAENetwork& net,
                  const nlohmann::json& extra_metadata = nlohmann::json::object());
DDAENetwork load_network(const std::filesystem::path& path);
TensorArchive network_archive(const DDAENetwork& net);
DDAENetwork network_from_archive(const TensorArchive& archive);

}  // namespace ddae
