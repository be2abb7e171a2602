#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "compat/arch.hpp"
#include "compat/norm.hpp"
#include "compat/ops.hpp"
#include "compat/tensor.hpp"

namespace compat {

enum class ComponentKind { Extractor, TaskHead, AuxHead, Adapter };

const char* component_kind_name(ComponentKind k);
ComponentKind component_kind_from_name(const std::string& name);

// Insertion-ordered name -> tensor map; the order is the parameter manifest
// order and the seeded initialization draw order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  size_t size() const { return items_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& items() const {
    return items_;
  }
  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, size_t> index_;
};

// Insertion-ordered name -> float-vector map for normalization statistics.
class StatStore {
 public:
  std::vector<float>& at(const std::string& name);  // creates when absent
  const std::vector<float>& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  size_t size() const { return items_.size(); }
  const std::vector<std::pair<std::string, std::vector<float>>>& items() const {
    return items_;
  }
  std::vector<std::pair<std::string, std::vector<float>>>& items() {
    return items_;
  }

 private:
  std::vector<std::pair<std::string, std::vector<float>>> items_;
  std::unordered_map<std::string, size_t> index_;
};

struct Component {
  std::string id;
  ComponentKind kind = ComponentKind::Extractor;
  ArchDescriptor arch;
  uint64_t init_seed = 0;
  ParamStore params;
  StatStore stats;
  // Free-form provenance (aux-head digests, pretrain origin); persisted.
  std::map<std::string, std::string> meta;

  std::shared_ptr<Component> clone() const;
  void set_trainable(bool trainable);
  bool trainable() const;
  // Digest over the parameter payload in manifest order.
  std::string param_digest() const;
  // Digest over parameters and normalization statistics.
  std::string state_digest() const;
  int out_channels() const;  // extractor/adapter interface width
  int in_channels() const;   // head/adapter interface width
};

using ComponentPtr = std::shared_ptr<Component>;

// Seeded construction; equal (arch, kind, seed) builds are bit-identical.
ComponentPtr build_component(const ArchDescriptor& arch, ComponentKind kind,
                             uint64_t seed, const std::string& id);

enum class AdapterInit { Seeded, Identity };

// 1x1 convolution (+bias) owned by an extractor to match a shared head width.
ComponentPtr make_adapter(int in_channels, int out_channels, uint64_t seed,
                          const std::string& id,
                          AdapterInit init = AdapterInit::Seeded);

// Copies every parameter whose name and shape match; returns copied names.
// Running statistics with matching names are copied too.
std::vector<std::string> copy_matching_state(const Component& src,
                                             Component& dst);

struct CompositeNetwork {
  ComponentPtr extractor;
  ComponentPtr adapter;  // optional
  ComponentPtr head;
};

// Pure re-wiring; throws InterfaceError on channel mismatch.
CompositeNetwork recombine(ComponentPtr extractor, ComponentPtr head);
CompositeNetwork recombine(ComponentPtr extractor, ComponentPtr adapter,
                           ComponentPtr head);

struct ForwardCtx {
  Tape* tape = nullptr;
  Phase phase = Phase::Train;
  NormEvalMode eval_mode = NormEvalMode::BatchAtTest;
  StatsRecorder* recorder = nullptr;
};

Tensor extractor_forward(Component& extractor, ForwardCtx& ctx,
                         const Tensor& images);
Tensor adapter_forward(Component& adapter, ForwardCtx& ctx,
                       const Tensor& features);
Tensor head_forward(Component& head, ForwardCtx& ctx, const Tensor& features);
Tensor composite_forward(const CompositeNetwork& net, ForwardCtx& ctx,
                         const Tensor& images);

// Gathers the trainable parameter tensors of a component, manifest order.
std::vector<Tensor> trainable_params(Component& c);

}  // namespace compat
