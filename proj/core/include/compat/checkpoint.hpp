#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "compat/component.hpp"

namespace compat {

// Single-component container:
//   magic "COMPCKPT" | version u32 LE | meta length u64 LE | metadata JSON
//   (UTF-8) | raw little-endian f32 payload | 32-byte SHA-256 over all
//   preceding bytes.
// The metadata holds id, kind, arch, seed, provenance entries and the
// parameter/statistics manifests (names, shapes, float offsets). Writes go
// through a temp file and an atomic rename.
inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Component& c, const std::filesystem::path& path);
ComponentPtr load_checkpoint(const std::filesystem::path& path);

// A model bundle is a directory of component checkpoints plus manifest.json
// mapping role names ("extractor", "task_head", "rp_head", ...) to files.
void save_bundle(const std::map<std::string, ComponentPtr>& components,
                 const std::filesystem::path& dir);
std::map<std::string, ComponentPtr> load_bundle(
    const std::filesystem::path& dir);

}  // namespace compat
