#include "compat/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "compat/digest.hpp"
#include "compat/error.hpp"
#include "compat/serde.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload assumes a little-endian host");

namespace compat {

namespace {

constexpr char kMagic[8] = {'C', 'O', 'M', 'P', 'C', 'K', 'P', 'T'};

void append_u32(std::string& buf, uint32_t v) {
  buf.append(reinterpret_cast<const char*>(&v), 4);
}

void append_u64(std::string& buf, uint64_t v) {
  buf.append(reinterpret_cast<const char*>(&v), 8);
}

}  // namespace

void save_checkpoint(const Component& c, const std::filesystem::path& path) {
  nlohmann::json meta;
  meta["id"] = c.id;
  meta["kind"] = component_kind_name(c.kind);
  meta["arch"] = arch_to_json(c.arch);
  meta["seed"] = c.init_seed;
  meta["meta"] = c.meta;

  nlohmann::json params = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : c.params.items()) {
    params.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += static_cast<uint64_t>(t.size());
  }
  meta["params"] = std::move(params);

  nlohmann::json stats = nlohmann::json::array();
  for (const auto& [name, v] : c.stats.items()) {
    stats.push_back({{"name", name}, {"size", v.size()}, {"offset", offset}});
    offset += static_cast<uint64_t>(v.size());
  }
  meta["stats"] = std::move(stats);
  meta["payload_floats"] = offset;

  const std::string meta_text = meta.dump();
  std::string buf;
  buf.reserve(16 + meta_text.size() + offset * 4 + 32);
  buf.append(kMagic, sizeof(kMagic));
  append_u32(buf, kCheckpointVersion);
  append_u64(buf, meta_text.size());
  buf.append(meta_text);
  for (const auto& [name, t] : c.params.items())
    buf.append(reinterpret_cast<const char*>(t.data()),
               sizeof(float) * static_cast<size_t>(t.size()));
  for (const auto& [name, v] : c.stats.items())
    buf.append(reinterpret_cast<const char*>(v.data()), sizeof(float) * v.size());

  const Digest32 d = sha256(buf.data(), buf.size());
  buf.append(reinterpret_cast<const char*>(d.data()), d.size());

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

ComponentPtr load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());

  if (buf.size() < sizeof(kMagic) + 4 + 8 + 32)
    throw CheckpointError("truncated checkpoint " + path.string());
  if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError("bad magic in " + path.string());

  const Digest32 want =
      sha256(buf.data(), buf.size() - 32);
  if (std::memcmp(buf.data() + buf.size() - 32, want.data(), 32) != 0)
    throw CheckpointError("digest mismatch in " + path.string() +
                          " (corrupted or tampered file)");

  size_t pos = sizeof(kMagic);
  uint32_t version = 0;
  std::memcpy(&version, buf.data() + pos, 4);
  pos += 4;
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " +
                          std::to_string(version) + " in " + path.string());
  uint64_t meta_len = 0;
  std::memcpy(&meta_len, buf.data() + pos, 8);
  pos += 8;
  if (pos + meta_len + 32 > buf.size())
    throw CheckpointError("truncated metadata in " + path.string());

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(buf.substr(pos, meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed metadata in " + path.string() + ": " +
                          e.what());
  }
  pos += meta_len;
  const size_t payload_bytes = buf.size() - 32 - pos;

  auto c = std::make_shared<Component>();
  try {
    c->id = meta.at("id").get<std::string>();
    c->kind = component_kind_from_name(meta.at("kind").get<std::string>());
    c->arch = arch_from_json(meta.at("arch"));
    c->init_seed = meta.at("seed").get<uint64_t>();
    if (meta.contains("meta"))
      c->meta = meta["meta"].get<std::map<std::string, std::string>>();

    const uint64_t total_floats = meta.at("payload_floats").get<uint64_t>();
    if (total_floats * 4 != payload_bytes)
      throw CheckpointError("payload size mismatch in " + path.string());

    const char* payload = buf.data() + pos;
    for (const auto& p : meta.at("params")) {
      const std::string name = p.at("name").get<std::string>();
      const Shape shape = p.at("shape").get<Shape>();
      const uint64_t off = p.at("offset").get<uint64_t>();
      Tensor t(shape);
      if (off + static_cast<uint64_t>(t.size()) > total_floats)
        throw CheckpointError("parameter '" + name + "' overruns payload");
      std::memcpy(t.data(), payload + off * 4,
                  sizeof(float) * static_cast<size_t>(t.size()));
      c->params.add(name, std::move(t));
    }
    for (const auto& s : meta.at("stats")) {
      const std::string name = s.at("name").get<std::string>();
      const uint64_t size = s.at("size").get<uint64_t>();
      const uint64_t off = s.at("offset").get<uint64_t>();
      if (off + size > total_floats)
        throw CheckpointError("statistics '" + name + "' overrun payload");
      std::vector<float>& v = c->stats.at(name);
      v.resize(size);
      std::memcpy(v.data(), payload + off * 4, sizeof(float) * size);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed metadata in " + path.string() + ": " +
                          e.what());
  }
  return c;
}

void save_bundle(const std::map<std::string, ComponentPtr>& components,
                 const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  for (const auto& [role, comp] : components) {
    const std::string file = role + ".ckpt";
    save_checkpoint(*comp, dir / file);
    manifest["components"][role] = file;
  }
  const std::string text = manifest.dump(2) + "\n";
  const std::filesystem::path tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << text;
    if (!out) throw CheckpointError("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, dir / "manifest.json");
}

std::map<std::string, ComponentPtr> load_bundle(
    const std::filesystem::path& dir) {
  const std::filesystem::path mpath = dir / "manifest.json";
  std::ifstream in(mpath);
  if (!in) throw CheckpointError("cannot open " + mpath.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed bundle manifest: " + std::string(e.what()));
  }
  std::map<std::string, ComponentPtr> out;
  if (!manifest.contains("components"))
    throw CheckpointError("bundle manifest has no components table");
  for (const auto& [role, file] : manifest["components"].items())
    out[role] = load_checkpoint(dir / file.get<std::string>());
  return out;
}

}  // namespace compat
