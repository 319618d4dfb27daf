#include "ddae/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ddae/backbone.hpp"
#include "ddae/error.hpp"
#include "ddae/serialize.hpp"

namespace ddae {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

namespace {
constexpr const char* kMetaKey = "__metadata__";
}

const Tensor& TensorArchive::get(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw DataError("archive has no tensor named '" + name + "'");
}

bool TensorArchive::contains(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

std::string encode_archive(const TensorArchive& archive) {
  nlohmann::json header = nlohmann::json::object();
  std::size_t offset = 0;
  for (const auto& [name, t] : archive.tensors) {
    if (name == kMetaKey) throw ContractError("tensor name '__metadata__' is reserved");
    if (header.contains(name)) throw ContractError("duplicate tensor name '" + name + "'");
    header[name] = {{"dtype", "f32"}, {"shape", t.shape()}, {"byte_offset", offset}};
    offset += t.numel() * sizeof(float);
  }
  if (!archive.metadata.empty()) header[kMetaKey] = archive.metadata;
  std::string out = header.dump();
  out.push_back('\n');
  out.push_back('\0');
  const std::size_t base = out.size();
  out.resize(base + offset);
  offset = 0;
  for (const auto& [name, t] : archive.tensors) {
    if (t.numel()) std::memcpy(out.data() + base + offset, t.data(), t.numel() * sizeof(float));
    offset += t.numel() * sizeof(float);
  }
  return out;
}

TensorArchive decode_archive(const std::string& bytes, const std::string& origin) {
  std::size_t sep = std::string::npos;
  for (std::size_t i = 0; i + 1 < bytes.size(); ++i)
    if (bytes[i] == '\n' && bytes[i + 1] == '\0') {
      sep = i;
      break;
    }
  if (sep == std::string::npos) throw DataError(origin + ": missing header separator");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, sep));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(origin + ": malformed header: " + e.what());
  }
  if (!header.is_object()) throw DataError(origin + ": header is not a JSON object");
  const std::size_t base = sep + 2;
  const std::size_t payload = bytes.size() - base;

  struct Entry {
    std::size_t offset;
    std::string name;
    Shape shape;
  };
  std::vector<Entry> entries;
  TensorArchive archive;
  for (auto it = header.begin(); it != header.end(); ++it) {
    if (it.key() == kMetaKey) {
      archive.metadata = it.value();
      continue;
    }
    const auto& e = it.value();
    try {
      if (e.at("dtype").get<std::string>() != "f32")
        throw DataError(origin + ": tensor '" + it.key() + "' has unsupported dtype");
      entries.push_back({e.at("byte_offset").get<std::size_t>(), it.key(), e.at("shape").get<Shape>()});
    } catch (const nlohmann::json::exception& ex) {
      throw DataError(origin + ": bad entry for '" + it.key() + "': " + ex.what());
    }
  }
  // Restore payload order so re-encoding reproduces the same bytes.
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.offset < b.offset; });
  for (auto& e : entries) {
    const std::size_t n = shape_numel(e.shape);
    if (e.offset + n * sizeof(float) > payload)
      throw DataError(origin + ": tensor '" + e.name + "' extends past end of payload");
    Tensor t(e.shape);
    if (n) std::memcpy(t.data(), bytes.data() + base + e.offset, n * sizeof(float));
    archive.tensors.emplace_back(std::move(e.name), std::move(t));
  }
  return archive;
}

void save_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  const std::string bytes = encode_archive(archive);
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

TensorArchive load_archive(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_archive(ss.str(), path.string());
}

TensorArchive network_archive(const DDAENetwork& net) {
  TensorArchive a;
  for (const auto& p : net.params()) a.tensors.emplace_back(p.name, p.var->value);
  a.metadata["ddae_config"] = net.config();
  return a;
}

DDAENetwork network_from_archive(const TensorArchive& archive) {
  if (!archive.metadata.contains("ddae_config")) throw DataError("checkpoint has no ddae_config metadata");
  DDAEConfig cfg;
  try {
    cfg = archive.metadata.at("ddae_config").get<DDAEConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad ddae_config in checkpoint: ") + e.what());
  }
  DDAENetwork net = build_ddae(cfg, 0);
  for (auto& p : net.params()) {
    const Tensor& t = archive.get(p.name);
    if (t.shape() != p.var->value.shape())
      throw DataError("checkpoint tensor '" + p.name + "' has shape " + shape_str(t.shape()) + ", expected " +
                      shape_str(p.var->value.shape()));
    p.var->value = t;
  }
  return net;
}

void save_network(const std::filesystem::path& path, const DDAENetwork& net, const nlohmann::json& extra_metadata) {
  TensorArchive a = network_archive(net);
  for (auto it = extra_metadata.begin(); it != extra_metadata.end(); ++it) a.metadata[it.key()] = it.value();
  save_archive(path, a);
}

DDAENetwork load_network(const std::filesystem::path& path) { return network_from_archive(load_archive(path)); }

}  // namespace ddae
