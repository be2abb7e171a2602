#pragma once

#include "json.hpp"

#include "compat/arch.hpp"

namespace compat {

nlohmann::json arch_to_json(const ArchDescriptor& arch);
ArchDescriptor arch_from_json(const nlohmann::json& j);

}  // namespace compat
