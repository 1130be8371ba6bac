#include "spat/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>

#include "spat/config.hpp"
#include "spat/errors.hpp"

namespace spat {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'S', 'P', 'A', 'T', 'C', 'K', 'P', 'T'};
// Guards against allocating absurd buffers from a corrupt length field.
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 34;

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

void get_bytes(std::istream& in, char* dst, std::size_t n, const char* what) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw ParseError(std::string("checkpoint: truncated while reading ") + what, 0, 0);
  }
}

std::uint64_t get_u64(std::istream& in, const char* what) {
  unsigned char b[8];
  get_bytes(in, reinterpret_cast<char*>(b), 8, what);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  get_bytes(in, reinterpret_cast<char*>(b), 4, what);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace

void write_checkpoint(std::ostream& out, const ForecasterModel& model, const json& metadata) {
  const json header = {{"format", "spat-checkpoint"},
                       {"model", to_json(model.config())},
                       {"pruned_layers", model.pruned_layers()},
                       {"metadata", metadata}};
  const std::string text = header.dump();
  out.write(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto state = model.state();
  put_u64(out, state.size());
  for (const auto& [name, tensor] : state) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(tensor.dim()));
    for (std::size_t d : tensor.shape()) put_u64(out, d);
    for (double v : tensor.data()) put_f64(out, v);
  }
  if (!out) throw Error("checkpoint: write failed");
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[8];
  get_bytes(in, magic, 8, "magic");
  if (std::memcmp(magic, kMagic, 8) != 0) throw ParseError("checkpoint: bad magic", 0, 0);
  const std::uint32_t version = get_u32(in, "version");
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint: unsupported version " + std::to_string(version), 0, 0);
  }
  const std::uint64_t header_len = get_u64(in, "header length");
  if (header_len > kMaxElements) throw ParseError("checkpoint: corrupt header length", 0, 0);
  std::string text(header_len, '\0');
  get_bytes(in, text.data(), header_len, "header");
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint: malformed header: ") + e.what(), 0, 0);
  }
  if (!header.is_object() || header.value("format", "") != "spat-checkpoint" ||
      !header.contains("model")) {
    throw ParseError("checkpoint: header is not a spat checkpoint", 0, 0);
  }

  ModelConfig cfg;
  try {
    cfg = model_config_from_json(header.at("model"));
  } catch (const ConfigError& e) {
    throw ParseError(std::string("checkpoint: bad model config: ") + e.what(), 0, 0);
  }
  ForecasterModel model(cfg, 0);
  for (const auto& layer : header.value("pruned_layers", json::array())) {
    model.prune_layer(layer.get<std::size_t>());
  }

  std::map<std::string, Tensor> slots;
  for (auto& [name, tensor] : model.state()) slots.emplace(name, tensor);

  const std::uint64_t count = get_u64(in, "tensor count");
  if (count != slots.size()) {
    throw ParseError("checkpoint: expected " + std::to_string(slots.size()) + " tensors, found " +
                         std::to_string(count),
                     0, 0);
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = get_u32(in, "tensor name length");
    if (name_len > 4096) throw ParseError("checkpoint: corrupt tensor name", 0, 0);
    std::string name(name_len, '\0');
    get_bytes(in, name.data(), name_len, "tensor name");
    const auto it = slots.find(name);
    if (it == slots.end()) throw ParseError("checkpoint: unexpected tensor '" + name + "'", 0, 0);
    const std::uint32_t rank = get_u32(in, "tensor rank");
    if (rank > 8) throw ParseError("checkpoint: corrupt rank for '" + name + "'", 0, 0);
    Shape shape(rank);
    for (auto& d : shape) d = get_u64(in, "tensor shape");
    Tensor& dst = it->second;
    if (shape != dst.shape()) {
      throw ParseError("checkpoint: tensor '" + name + "' has shape " + shape_str(shape) +
                           ", model expects " + shape_str(dst.shape()),
                       0, 0);
    }
    auto data = dst.mutable_data();
    for (double& v : data) v = std::bit_cast<double>(get_u64(in, "tensor data"));
    slots.erase(it);
  }
  return Checkpoint{std::move(model), header.value("metadata", json::object())};
}

void save_checkpoint(const std::string& path, const ForecasterModel& model, const json& metadata) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("checkpoint: cannot write '" + path + "'");
  write_checkpoint(out, model, metadata);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("checkpoint: cannot open '" + path + "'", 0, 0);
  return read_checkpoint(in);
}

}  // namespace spat
