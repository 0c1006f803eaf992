#include "mome/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace mome {

namespace {

using nlohmann::json;

// Payload is little-endian on disk regardless of host order.
void write_f64_le(std::ostream& os, std::span<const double> vals) {
  for (double v : vals) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    if constexpr (std::endian::native == std::endian::big) {
      bits = __builtin_bswap64(bits);
    }
    char buf[8];
    std::memcpy(buf, &bits, 8);
    os.write(buf, 8);
  }
}

void read_f64_le(std::istream& is, std::span<double> vals) {
  for (double& v : vals) {
    char buf[8];
    is.read(buf, 8);
    std::uint64_t bits;
    std::memcpy(&bits, buf, 8);
    if constexpr (std::endian::native == std::endian::big) {
      bits = __builtin_bswap64(bits);
    }
    std::memcpy(&v, &bits, 8);
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path,
                     const ParamSet& params) {
  json header;
  header["tensors"] = json::array();
  for (const auto& [name, t] : params.items) {
    header["tensors"].push_back({{"name", name}, {"shape", t->shape()}});
  }
  const std::string head = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write checkpoint: " + path.string());
  const std::uint64_t len = head.size();
  os.write("MOME", 4);
  char lenbuf[8];
  std::uint64_t le = len;
  if constexpr (std::endian::native == std::endian::big) {
    le = __builtin_bswap64(le);
  }
  std::memcpy(lenbuf, &le, 8);
  os.write(lenbuf, 8);
  os.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const auto& [_, t] : params.items) write_f64_le(os, t->values());
  if (!os) throw ConfigError("short write to checkpoint: " + path.string());
}

namespace {

json read_header(std::ifstream& is, const std::filesystem::path& path) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MOME", 4) != 0) {
    throw ConfigError("not a checkpoint file: " + path.string());
  }
  char lenbuf[8];
  is.read(lenbuf, 8);
  std::uint64_t len;
  std::memcpy(&len, lenbuf, 8);
  if constexpr (std::endian::native == std::endian::big) {
    len = __builtin_bswap64(len);
  }
  std::string head(len, '\0');
  is.read(head.data(), static_cast<std::streamsize>(len));
  if (!is) throw ConfigError("truncated checkpoint header: " + path.string());
  return json::parse(head);
}

}  // namespace

void load_checkpoint(const std::filesystem::path& path,
                     const ParamSet& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read checkpoint: " + path.string());
  const json header = read_header(is, path);

  std::map<std::string, Tensor*> by_name;
  for (const auto& [name, t] : params.items) by_name[name] = t;

  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name");
    const Shape shape = entry.at("shape").get<Shape>();
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw ConfigError("checkpoint tensor not in model: " + name);
    }
    if (it->second->shape() != shape) {
      throw DimensionError("checkpoint shape mismatch for " + name + ": " +
                           shape_str(shape) + " vs " +
                           shape_str(it->second->shape()));
    }
    read_f64_le(is, it->second->mutable_values());
  }
  if (!is) throw ConfigError("truncated checkpoint payload: " + path.string());
}

std::map<std::string, Tensor> read_checkpoint(
    const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read checkpoint: " + path.string());
  const json header = read_header(is, path);
  std::map<std::string, Tensor> out;
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name");
    Shape shape = entry.at("shape").get<Shape>();
    Tensor t = Tensor::zeros(shape);
    read_f64_le(is, t.mutable_values());
    out.emplace(name, std::move(t));
  }
  return out;
}

}  // namespace mome
