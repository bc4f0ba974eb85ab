#include "ovseg/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "ovseg/error.hpp"

namespace ovseg {

using json = nlohmann::json;

namespace {

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError("truncated checkpoint: " + what);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json index = json::array();
  std::uint64_t offset = 0;
  for (const auto& [group, tensors] : ckpt.groups) {
    for (const auto& [name, m] : tensors) {
      index.push_back({{"group", group}, {"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
      offset += static_cast<std::uint64_t>(m.size());
    }
  }
  json header = {{"config", ckpt.config},
                 {"step", ckpt.step},
                 {"epoch", ckpt.epoch},
                 {"rng", ckpt.rng_state},
                 {"tensors", index}};
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint: " + path.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [group, tensors] : ckpt.groups) {
      for (const auto& [name, m] : tensors) {
        out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
      }
    }
    if (!out) throw DataError("checkpoint write failed: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  char magic[sizeof(kCheckpointMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw DataError("not a checkpoint: " + path.string());
  }
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = get<std::uint64_t>(in, "header length");
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) throw DataError("truncated checkpoint header");
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("bad checkpoint header: ") + e.what());
  }
  Checkpoint ckpt;
  try {
    ckpt.config = header.at("config");
    ckpt.step = header.at("step").get<std::int64_t>();
    ckpt.epoch = header.at("epoch").get<int>();
    ckpt.rng_state = header.at("rng").get<std::string>();
    for (const auto& t : header.at("tensors")) {
      ag::Matrix m(t.at("rows").get<ag::Index>(), t.at("cols").get<ag::Index>());
      if (!in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)))) {
        throw DataError("truncated checkpoint tensor " + t.at("name").get<std::string>());
      }
      ckpt.groups[t.at("group").get<std::string>()][t.at("name").get<std::string>()] = std::move(m);
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("bad checkpoint header: ") + e.what());
  }
  return ckpt;
}

TensorGroup snapshot(const nn::ParamStore& store) {
  TensorGroup out;
  for (const auto& [name, e] : store.entries()) out.emplace(name, e.var.value());
  return out;
}

void restore(nn::ParamStore& store, const TensorGroup& values) {
  if (values.size() != store.entries().size()) throw DataError("checkpoint parameter count does not match model");
  for (const auto& [name, e] : store.entries()) {
    auto it = values.find(name);
    if (it == values.end()) throw DataError("checkpoint lacks parameter " + name);
    ag::Var v = e.var;
    if (it->second.rows() != v.rows() || it->second.cols() != v.cols()) {
      throw DataError("checkpoint shape mismatch for " + name);
    }
    v.mutable_value() = it->second;
  }
}

}  // namespace ovseg
