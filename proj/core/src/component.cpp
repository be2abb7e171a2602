#include "compat/component.hpp"

#include <cstring>

#include "compat/digest.hpp"
#include "compat/error.hpp"
#include "compat/rng.hpp"

namespace compat {

const char* component_kind_name(ComponentKind k) {
  switch (k) {
    case ComponentKind::Extractor: return "extractor";
    case ComponentKind::TaskHead: return "task-head";
    case ComponentKind::AuxHead: return "aux-head";
    case ComponentKind::Adapter: return "adapter";
  }
  return "?";
}

ComponentKind component_kind_from_name(const std::string& name) {
  if (name == "extractor") return ComponentKind::Extractor;
  if (name == "task-head") return ComponentKind::TaskHead;
  if (name == "aux-head") return ComponentKind::AuxHead;
  if (name == "adapter") return ComponentKind::Adapter;
  throw ConfigError("unknown component kind '" + name + "'");
}

Tensor& ParamStore::add(const std::string& name, Tensor t) {
  if (index_.count(name)) throw UsageError("duplicate parameter " + name);
  index_[name] = items_.size();
  items_.emplace_back(name, std::move(t));
  return items_.back().second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("missing parameter " + name);
  return items_[it->second].second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("missing parameter " + name);
  return items_[it->second].second;
}

bool ParamStore::contains(const std::string& name) const {
  return index_.count(name) > 0;
}

std::vector<float>& StatStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) {
    index_[name] = items_.size();
    items_.emplace_back(name, std::vector<float>{});
    return items_.back().second;
  }
  return items_[it->second].second;
}

const std::vector<float>& StatStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("missing statistics " + name);
  return items_[it->second].second;
}

bool StatStore::contains(const std::string& name) const {
  return index_.count(name) > 0;
}

std::shared_ptr<Component> Component::clone() const {
  auto c = std::make_shared<Component>();
  c->id = id;
  c->kind = kind;
  c->arch = arch;
  c->init_seed = init_seed;
  c->meta = meta;
  for (const auto& [name, t] : params.items()) c->params.add(name, t.clone());
  for (const auto& [name, v] : stats.items()) c->stats.at(name) = v;
  return c;
}

void Component::set_trainable(bool trainable) {
  for (auto& [name, t] : params.items()) t.set_requires_grad(trainable);
}

bool Component::trainable() const {
  for (const auto& [name, t] : params.items())
    if (t.requires_grad()) return true;
  return false;
}

std::string Component::param_digest() const {
  Sha256 h;
  for (const auto& [name, t] : params.items()) {
    h.update(name.data(), name.size());
    h.update(t.data(), sizeof(float) * static_cast<size_t>(t.size()));
  }
  return hex_digest(h.finish());
}

std::string Component::state_digest() const {
  Sha256 h;
  for (const auto& [name, t] : params.items()) {
    h.update(name.data(), name.size());
    h.update(t.data(), sizeof(float) * static_cast<size_t>(t.size()));
  }
  for (const auto& [name, v] : stats.items()) {
    h.update(name.data(), name.size());
    h.update(v.data(), sizeof(float) * v.size());
  }
  return hex_digest(h.finish());
}

int Component::out_channels() const {
  if (kind == ComponentKind::Adapter) return params.at("adapter.w").dim(0);
  if (kind == ComponentKind::Extractor) {
    NetworkPlan plan = plan_network(arch);
    return plan.feature_channels;
  }
  throw UsageError("out_channels() on a head component");
}

int Component::in_channels() const {
  if (kind == ComponentKind::Adapter) return params.at("adapter.w").dim(1);
  if (kind == ComponentKind::TaskHead || kind == ComponentKind::AuxHead) {
    NetworkPlan plan = plan_network(arch);
    return plan.head_in_channels;
  }
  throw UsageError("in_channels() on an extractor component");
}

namespace {

Tensor init_conv(Rng& rng, const ConvPlan& cp) {
  const int fan_in = cp.depthwise ? cp.ksize * cp.ksize
                                  : cp.in_c * cp.ksize * cp.ksize;
  const double std = std::sqrt(2.0 / fan_in);
  Shape shape = cp.depthwise
                    ? Shape{cp.out_c, 1, cp.ksize, cp.ksize}
                    : Shape{cp.out_c, cp.in_c, cp.ksize, cp.ksize};
  Tensor t(shape);
  float* p = t.data();
  const int64_t n = t.size();
  for (int64_t i = 0; i < n; ++i)
    p[i] = static_cast<float>(rng.normal(0.0, std));
  return t;
}

void init_norm(Component& c, const NormPlan& np) {
  Tensor gamma({np.channels});
  Tensor beta({np.channels});
  for (int i = 0; i < np.channels; ++i) gamma.data()[i] = 1.0f;
  c.params.add(np.name + ".gamma", std::move(gamma));
  c.params.add(np.name + ".beta", std::move(beta));
  if (c.arch.norm_kind == NormKind::Batch) {
    c.stats.at(np.name + ".mean").assign(static_cast<size_t>(np.channels), 0.0f);
    c.stats.at(np.name + ".var").assign(static_cast<size_t>(np.channels), 1.0f);
  }
}

void init_block(Component& c, Rng& rng, const BlockPlan& b) {
  if (const auto* r = std::get_if<ResBlockPlan>(&b)) {
    c.params.add(r->conv1.name, init_conv(rng, r->conv1));
    init_norm(c, r->n1);
    c.params.add(r->conv2.name, init_conv(rng, r->conv2));
    init_norm(c, r->n2);
    if (r->proj) {
      c.params.add(r->proj->name, init_conv(rng, *r->proj));
      init_norm(c, *r->nproj);
    }
  } else {
    const auto& m = std::get<MobileBlockPlan>(b);
    c.params.add(m.expand.name, init_conv(rng, m.expand));
    init_norm(c, m.ne);
    c.params.add(m.dw.name, init_conv(rng, m.dw));
    init_norm(c, m.nd);
    c.params.add(m.project.name, init_conv(rng, m.project));
    init_norm(c, m.np);
  }
}

}  // namespace

ComponentPtr build_component(const ArchDescriptor& arch_in, ComponentKind kind,
                             uint64_t seed, const std::string& id) {
  if (kind == ComponentKind::Adapter)
    throw ConfigError("adapters are built with make_adapter()");
  ArchDescriptor arch = arch_in;
  arch.resolve();
  NetworkPlan plan = plan_network(arch);

  auto c = std::make_shared<Component>();
  c->id = id;
  c->kind = kind;
  c->arch = arch;
  c->init_seed = seed;
  Rng rng(seed);

  if (kind == ComponentKind::Extractor) {
    c->params.add(plan.stem.name, init_conv(rng, plan.stem));
    init_norm(*c, plan.stem_norm);
    for (int i = 0; i < plan.split_index; ++i)
      init_block(*c, rng, plan.blocks[static_cast<size_t>(i)]);
  } else {
    for (size_t i = static_cast<size_t>(plan.split_index);
         i < plan.blocks.size(); ++i)
      init_block(*c, rng, plan.blocks[i]);
    const double std = std::sqrt(2.0 / plan.classifier.in_dim);
    Tensor w({plan.classifier.in_dim, plan.classifier.out_dim});
    float* p = w.data();
    for (int64_t i = 0; i < w.size(); ++i)
      p[i] = static_cast<float>(rng.normal(0.0, std));
    c->params.add(plan.classifier.name + ".w", std::move(w));
    c->params.add(plan.classifier.name + ".b",
                  Tensor({plan.classifier.out_dim}));
  }
  return c;
}

ComponentPtr make_adapter(int in_channels, int out_channels, uint64_t seed,
                          const std::string& id, AdapterInit init) {
  if (in_channels <= 0 || out_channels <= 0)
    throw ConfigError("make_adapter: channel counts must be positive");
  auto c = std::make_shared<Component>();
  c->id = id;
  c->kind = ComponentKind::Adapter;
  c->init_seed = seed;
  c->arch.head_in_channels = out_channels;
  Tensor w({out_channels, in_channels, 1, 1});
  if (init == AdapterInit::Identity) {
    for (int f = 0; f < out_channels; ++f)
      if (f < in_channels) w.data()[f * in_channels + f] = 1.0f;
  } else {
    Rng rng(seed);
    const double std = std::sqrt(2.0 / in_channels);
    for (int64_t i = 0; i < w.size(); ++i)
      w.data()[i] = static_cast<float>(rng.normal(0.0, std));
  }
  c->params.add("adapter.w", std::move(w));
  c->params.add("adapter.b", Tensor({out_channels}));
  return c;
}

std::vector<std::string> copy_matching_state(const Component& src,
                                             Component& dst) {
  std::vector<std::string> copied;
  for (auto& [name, t] : dst.params.items()) {
    if (!src.params.contains(name)) continue;
    const Tensor& s = src.params.at(name);
    if (s.shape() != t.shape()) continue;
    std::memcpy(t.data(), s.data(), sizeof(float) * static_cast<size_t>(t.size()));
    copied.push_back(name);
  }
  for (auto& [name, v] : dst.stats.items()) {
    if (!src.stats.contains(name)) continue;
    const std::vector<float>& s = src.stats.at(name);
    if (s.size() != v.size()) continue;
    v = s;
    copied.push_back(name);
  }
  return copied;
}

CompositeNetwork recombine(ComponentPtr extractor, ComponentPtr head) {
  if (!extractor || !head) throw UsageError("recombine: null component");
  const int out = extractor->out_channels();
  const int in = head->in_channels();
  if (out != in)
    throw InterfaceError(
        "recombine: extractor '" + extractor->id + "' produces " +
        std::to_string(out) + " channels but head '" + head->id +
        "' expects " + std::to_string(in) + "; attach a 1x1 adapter");
  return CompositeNetwork{std::move(extractor), nullptr, std::move(head)};
}

CompositeNetwork recombine(ComponentPtr extractor, ComponentPtr adapter,
                           ComponentPtr head) {
  if (!adapter) return recombine(std::move(extractor), std::move(head));
  if (!extractor || !head) throw UsageError("recombine: null component");
  if (extractor->out_channels() != adapter->in_channels())
    throw InterfaceError("recombine: adapter '" + adapter->id +
                         "' input width does not match extractor '" +
                         extractor->id + "'");
  if (adapter->out_channels() != head->in_channels())
    throw InterfaceError("recombine: adapter '" + adapter->id +
                         "' output width does not match head '" + head->id +
                         "'");
  return CompositeNetwork{std::move(extractor), std::move(adapter),
                          std::move(head)};
}

namespace {

Tensor run_norm(Component& c, ForwardCtx& ctx, const NormPlan& np,
                const Tensor& x) {
  NormContext nctx{ctx.tape, ctx.phase, ctx.eval_mode, ctx.recorder};
  thread_local std::vector<float> dummy_mean, dummy_var;  // untouched for stateless kinds
  const bool batch = c.arch.norm_kind == NormKind::Batch;
  return norm_forward(nctx, c.arch.norm_kind, x, c.params.at(np.name + ".gamma"),
                      c.params.at(np.name + ".beta"),
                      batch ? c.stats.at(np.name + ".mean") : dummy_mean,
                      batch ? c.stats.at(np.name + ".var") : dummy_var,
                      c.id + "/" + np.name);
}

Tensor run_block(Component& c, ForwardCtx& ctx, const BlockPlan& b,
                 const Tensor& x) {
  Tape& tape = *ctx.tape;
  if (const auto* r = std::get_if<ResBlockPlan>(&b)) {
    Tensor y = conv3x3(tape, x, c.params.at(r->conv1.name), r->conv1.stride);
    y = relu(tape, run_norm(c, ctx, r->n1, y));
    y = conv3x3(tape, y, c.params.at(r->conv2.name), 1);
    y = run_norm(c, ctx, r->n2, y);
    Tensor shortcut = x;
    if (r->proj) {
      shortcut = conv1x1(tape, x, c.params.at(r->proj->name), r->proj->stride);
      shortcut = run_norm(c, ctx, *r->nproj, shortcut);
    }
    return relu(tape, add(tape, y, shortcut));
  }
  const auto& m = std::get<MobileBlockPlan>(b);
  Tensor y = conv1x1(tape, x, c.params.at(m.expand.name), 1);
  y = relu(tape, run_norm(c, ctx, m.ne, y));
  y = depthwise_conv3x3(tape, y, c.params.at(m.dw.name), m.dw.stride);
  y = relu(tape, run_norm(c, ctx, m.nd, y));
  y = conv1x1(tape, y, c.params.at(m.project.name), 1);
  y = run_norm(c, ctx, m.np, y);
  if (m.residual) y = add(tape, y, x);
  return y;
}

}  // namespace

Tensor extractor_forward(Component& extractor, ForwardCtx& ctx,
                         const Tensor& images) {
  if (extractor.kind != ComponentKind::Extractor)
    throw UsageError("extractor_forward on a " +
                     std::string(component_kind_name(extractor.kind)));
  NetworkPlan plan = plan_network(extractor.arch);
  Tape& tape = *ctx.tape;
  Tensor y = conv3x3(tape, images, extractor.params.at(plan.stem.name), 1);
  y = relu(tape, run_norm(extractor, ctx, plan.stem_norm, y));
  for (int i = 0; i < plan.split_index; ++i)
    y = run_block(extractor, ctx, plan.blocks[static_cast<size_t>(i)], y);
  if (extractor.arch.l2_at_split) y = l2_normalize(tape, y);
  return y;
}

Tensor adapter_forward(Component& adapter, ForwardCtx& ctx,
                       const Tensor& features) {
  if (adapter.kind != ComponentKind::Adapter)
    throw UsageError("adapter_forward on a " +
                     std::string(component_kind_name(adapter.kind)));
  Tape& tape = *ctx.tape;
  Tensor y = conv1x1(tape, features, adapter.params.at("adapter.w"), 1);
  return bias_channels(tape, y, adapter.params.at("adapter.b"));
}

Tensor head_forward(Component& head, ForwardCtx& ctx, const Tensor& features) {
  if (head.kind != ComponentKind::TaskHead && head.kind != ComponentKind::AuxHead)
    throw UsageError("head_forward on a " +
                     std::string(component_kind_name(head.kind)));
  NetworkPlan plan = plan_network(head.arch);
  if (features.dim(1) != plan.head_in_channels)
    throw InterfaceError("head '" + head.id + "' expects " +
                         std::to_string(plan.head_in_channels) +
                         " channels, got " + std::to_string(features.dim(1)));
  Tape& tape = *ctx.tape;
  Tensor y = features;
  for (size_t i = static_cast<size_t>(plan.split_index); i < plan.blocks.size();
       ++i)
    y = run_block(head, ctx, plan.blocks[i], y);
  y = global_avg_pool(tape, y);
  return dense(tape, y, head.params.at(plan.classifier.name + ".w"),
               head.params.at(plan.classifier.name + ".b"));
}

Tensor composite_forward(const CompositeNetwork& net, ForwardCtx& ctx,
                         const Tensor& images) {
  Tensor feat = extractor_forward(*net.extractor, ctx, images);
  if (net.adapter) feat = adapter_forward(*net.adapter, ctx, feat);
  return head_forward(*net.head, ctx, feat);
}

std::vector<Tensor> trainable_params(Component& c) {
  std::vector<Tensor> out;
  for (auto& [name, t] : c.params.items())
    if (t.requires_grad()) out.push_back(t);
  return out;
}

}  // namespace compat
