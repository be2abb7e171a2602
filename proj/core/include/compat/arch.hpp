#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "compat/norm.hpp"

namespace compat {

enum class ArchFamily { MiniResNet, WideMiniResNet, MiniMobile };

const char* arch_family_name(ArchFamily f);
ArchFamily arch_family_from_name(const std::string& name);

// Boundary after `block` blocks of `stage` (1-based stage). block==0 places
// the boundary right before the stage; stage==last, block==blocks puts the
// whole convolutional trunk into the extractor.
struct SplitPoint {
  int stage = 2;
  int block = 0;  // 0 means "all blocks of the stage" when loaded from defaults
  bool operator==(const SplitPoint&) const = default;
};

struct ArchDescriptor {
  ArchFamily family = ArchFamily::MiniResNet;
  std::vector<int> stage_channels;  // defaulted per family when empty
  int blocks_per_stage = 3;
  SplitPoint split{2, 0};  // block 0 -> resolved to blocks_per_stage
  NormKind norm_kind = NormKind::Batch;
  int in_channels = 3;
  int image_size = 16;
  int head_classes = 10;     // classifier width for head components
  int head_in_channels = 0;  // 0 -> natural channel count at the split
  bool l2_at_split = false;  // L2-normalize extractor output features

  // Fills family defaults and validates; throws ConfigError.
  void resolve();
  bool operator==(const ArchDescriptor&) const = default;
};

std::vector<int> default_stage_channels(ArchFamily f);

// Flat layer plan shared by parameter initialization, checkpointing, and the
// forward pass, so parameter naming is a single source of truth.
struct ConvPlan {
  std::string name;
  int in_c = 0, out_c = 0, ksize = 3, stride = 1;
  bool depthwise = false;
};
struct NormPlan {
  std::string name;
  int channels = 0;
};
struct DensePlan {
  std::string name;
  int in_dim = 0, out_dim = 0;
};

struct ResBlockPlan {
  ConvPlan conv1, conv2;
  NormPlan n1, n2;
  std::optional<ConvPlan> proj;  // 1x1 shortcut when shape changes
  std::optional<NormPlan> nproj;
};

struct MobileBlockPlan {
  ConvPlan expand, dw, project;  // 1x1 expand, depthwise 3x3, 1x1 project
  NormPlan ne, nd, np;
  bool residual = false;
};

using BlockPlan = std::variant<ResBlockPlan, MobileBlockPlan>;

struct NetworkPlan {
  ConvPlan stem;
  NormPlan stem_norm;
  std::vector<BlockPlan> blocks;
  int split_index = 0;         // blocks[0..split_index) belong to the extractor
  DensePlan classifier;        // applied after global average pooling
  int feature_channels = 0;    // natural channel count at the split
  int head_in_channels = 0;    // == feature_channels unless overridden
};

NetworkPlan plan_network(const ArchDescriptor& arch);

int block_out_channels(const BlockPlan& b);
int block_in_channels(const BlockPlan& b);

}  // namespace compat
