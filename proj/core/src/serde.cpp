#include "compat/serde.hpp"

#include "compat/error.hpp"

namespace compat {

nlohmann::json arch_to_json(const ArchDescriptor& arch) {
  nlohmann::json j;
  j["family"] = arch_family_name(arch.family);
  j["stage_channels"] = arch.stage_channels;
  j["blocks_per_stage"] = arch.blocks_per_stage;
  j["split"] = {arch.split.stage, arch.split.block};
  j["norm_kind"] = norm_kind_name(arch.norm_kind);
  j["in_channels"] = arch.in_channels;
  j["image_size"] = arch.image_size;
  j["head_classes"] = arch.head_classes;
  j["head_in_channels"] = arch.head_in_channels;
  j["l2_at_split"] = arch.l2_at_split;
  return j;
}

ArchDescriptor arch_from_json(const nlohmann::json& j) {
  ArchDescriptor arch;
  try {
    if (j.contains("family")) arch.family = arch_family_from_name(j["family"]);
    if (j.contains("stage_channels"))
      arch.stage_channels = j["stage_channels"].get<std::vector<int>>();
    if (j.contains("blocks_per_stage"))
      arch.blocks_per_stage = j["blocks_per_stage"].get<int>();
    if (j.contains("split")) {
      auto s = j["split"];
      if (!s.is_array() || s.size() != 2)
        throw ConfigError("arch.split must be [stage, block]");
      arch.split.stage = s[0].get<int>();
      arch.split.block = s[1].get<int>();
    }
    if (j.contains("norm_kind"))
      arch.norm_kind = norm_kind_from_name(j["norm_kind"]);
    if (j.contains("in_channels")) arch.in_channels = j["in_channels"].get<int>();
    if (j.contains("image_size")) arch.image_size = j["image_size"].get<int>();
    if (j.contains("head_classes"))
      arch.head_classes = j["head_classes"].get<int>();
    if (j.contains("head_in_channels"))
      arch.head_in_channels = j["head_in_channels"].get<int>();
    if (j.contains("l2_at_split")) arch.l2_at_split = j["l2_at_split"].get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("arch: malformed field (") + e.what() + ")");
  }
  arch.resolve();
  return arch;
}

}  // namespace compat
