#include "compat/arch.hpp"

#include "compat/error.hpp"

namespace compat {

const char* arch_family_name(ArchFamily f) {
  switch (f) {
    case ArchFamily::MiniResNet: return "mini-resnet";
    case ArchFamily::WideMiniResNet: return "wide-mini-resnet";
    case ArchFamily::MiniMobile: return "mini-mobile";
  }
  return "?";
}

ArchFamily arch_family_from_name(const std::string& name) {
  if (name == "mini-resnet") return ArchFamily::MiniResNet;
  if (name == "wide-mini-resnet") return ArchFamily::WideMiniResNet;
  if (name == "mini-mobile") return ArchFamily::MiniMobile;
  throw ConfigError("unknown architecture family '" + name + "'");
}

std::vector<int> default_stage_channels(ArchFamily f) {
  switch (f) {
    case ArchFamily::MiniResNet: return {16, 32, 64};
    case ArchFamily::WideMiniResNet: return {32, 64, 128};
    case ArchFamily::MiniMobile: return {16, 32, 64};
  }
  return {};
}

void ArchDescriptor::resolve() {
  if (stage_channels.empty()) stage_channels = default_stage_channels(family);
  if (stage_channels.size() != 3)
    throw ConfigError("arch: expected 3 stage widths, got " +
                      std::to_string(stage_channels.size()));
  for (int c : stage_channels)
    if (c <= 0) throw ConfigError("arch: non-positive stage width");
  if (blocks_per_stage <= 0)
    throw ConfigError("arch: blocks_per_stage must be positive");
  if (split.block == 0) split.block = blocks_per_stage;
  if (split.stage < 1 || split.stage > 3 || split.block < 1 ||
      split.block > blocks_per_stage)
    throw ConfigError("arch: split point (" + std::to_string(split.stage) +
                      "," + std::to_string(split.block) +
                      ") does not address a block boundary");
  if (image_size < 8) throw ConfigError("arch: image_size must be >= 8");
  if (head_classes < 2) throw ConfigError("arch: head_classes must be >= 2");
}

int block_in_channels(const BlockPlan& b) {
  if (const auto* r = std::get_if<ResBlockPlan>(&b)) return r->conv1.in_c;
  return std::get<MobileBlockPlan>(b).expand.in_c;
}

int block_out_channels(const BlockPlan& b) {
  if (const auto* r = std::get_if<ResBlockPlan>(&b)) return r->conv2.out_c;
  return std::get<MobileBlockPlan>(b).project.out_c;
}

namespace {

ResBlockPlan make_res_block(const std::string& prefix, int in_c, int out_c,
                            int stride) {
  ResBlockPlan b;
  b.conv1 = {prefix + ".conv1.w", in_c, out_c, 3, stride, false};
  b.n1 = {prefix + ".n1", out_c};
  b.conv2 = {prefix + ".conv2.w", out_c, out_c, 3, 1, false};
  b.n2 = {prefix + ".n2", out_c};
  if (stride != 1 || in_c != out_c) {
    b.proj = ConvPlan{prefix + ".proj.w", in_c, out_c, 1, stride, false};
    b.nproj = NormPlan{prefix + ".nproj", out_c};
  }
  return b;
}

MobileBlockPlan make_mobile_block(const std::string& prefix, int in_c,
                                  int out_c, int stride, int expansion) {
  MobileBlockPlan b;
  const int mid = in_c * expansion;
  b.expand = {prefix + ".expand.w", in_c, mid, 1, 1, false};
  b.ne = {prefix + ".ne", mid};
  b.dw = {prefix + ".dw.w", mid, mid, 3, stride, true};
  b.nd = {prefix + ".nd", mid};
  b.project = {prefix + ".project.w", mid, out_c, 1, 1, false};
  b.np = {prefix + ".np", out_c};
  b.residual = (stride == 1 && in_c == out_c);
  return b;
}

}  // namespace

NetworkPlan plan_network(const ArchDescriptor& arch_in) {
  ArchDescriptor arch = arch_in;
  arch.resolve();

  NetworkPlan plan;
  plan.stem = {"stem.conv.w", arch.in_channels, arch.stage_channels[0], 3, 1,
               false};
  plan.stem_norm = {"stem.n", arch.stage_channels[0]};

  const bool mobile = arch.family == ArchFamily::MiniMobile;
  int channels = arch.stage_channels[0];
  for (int stage = 1; stage <= 3; ++stage) {
    const int out_c = arch.stage_channels[static_cast<size_t>(stage - 1)];
    for (int blk = 1; blk <= arch.blocks_per_stage; ++blk) {
      const int stride = (stage > 1 && blk == 1) ? 2 : 1;
      const std::string prefix =
          "stage" + std::to_string(stage) + ".block" + std::to_string(blk);
      if (mobile)
        plan.blocks.push_back(
            make_mobile_block(prefix, channels, out_c, stride, 2));
      else
        plan.blocks.push_back(make_res_block(prefix, channels, out_c, stride));
      channels = out_c;
      if (stage == arch.split.stage && blk == arch.split.block)
        plan.split_index = static_cast<int>(plan.blocks.size());
    }
  }

  plan.feature_channels =
      plan.split_index == 0
          ? arch.stage_channels[0]
          : block_out_channels(plan.blocks[static_cast<size_t>(plan.split_index - 1)]);
  plan.head_in_channels =
      arch.head_in_channels > 0 ? arch.head_in_channels : plan.feature_channels;

  // When the head input width is overridden (shared heads behind adapters),
  // the first head block consumes that width instead of the natural one.
  if (plan.head_in_channels != plan.feature_channels &&
      plan.split_index < static_cast<int>(plan.blocks.size())) {
    BlockPlan& first = plan.blocks[static_cast<size_t>(plan.split_index)];
    if (auto* r = std::get_if<ResBlockPlan>(&first)) {
      r->conv1.in_c = plan.head_in_channels;
      if (!r->proj) {  // width change now forces a projection shortcut
        r->proj = ConvPlan{"", plan.head_in_channels, r->conv2.out_c, 1,
                           r->conv1.stride, false};
        r->nproj = NormPlan{"", r->conv2.out_c};
      } else {
        r->proj->in_c = plan.head_in_channels;
      }
      if (r->proj->name.empty()) {
        const std::string base =
            r->conv1.name.substr(0, r->conv1.name.size() - 8);  // strip .conv1.w
        r->proj->name = base + ".proj.w";
        r->nproj->name = base + ".nproj";
      }
    } else {
      auto& m = std::get<MobileBlockPlan>(first);
      m.expand.in_c = plan.head_in_channels;
      m.expand.out_c = plan.head_in_channels * 2;
      m.ne.channels = m.expand.out_c;
      m.dw.in_c = m.dw.out_c = m.expand.out_c;
      m.nd.channels = m.expand.out_c;
      m.project.in_c = m.expand.out_c;
      m.residual = m.residual && (m.expand.in_c == m.project.out_c &&
                                  m.dw.stride == 1);
    }
  }

  const int trunk_out = plan.blocks.empty()
                            ? arch.stage_channels[0]
                            : block_out_channels(plan.blocks.back());
  const int classifier_in =
      plan.split_index == static_cast<int>(plan.blocks.size())
          ? plan.head_in_channels
          : trunk_out;
  plan.classifier = {"classifier.fc", classifier_in, arch.head_classes};
  return plan;
}

}  // namespace compat
