#include "compat/transferlab.hpp"

#include <algorithm>
#include <cstring>

#include "compat/error.hpp"
#include "compat/rng.hpp"

namespace compat {

ComponentPtr extend_classifier(const Component& head, int new_total_classes,
                               uint64_t seed) {
  if (head.kind != ComponentKind::TaskHead && head.kind != ComponentKind::AuxHead)
    throw ConfigError("extend_classifier: not a head component");
  const int old_k = head.arch.head_classes;
  if (new_total_classes < old_k)
    throw ConfigError("extend_classifier: cannot shrink from " +
                      std::to_string(old_k) + " to " +
                      std::to_string(new_total_classes) + " classes");

  ComponentPtr out = head.clone();
  if (new_total_classes == old_k) return out;

  const Tensor& old_w = head.params.at("classifier.fc.w");
  const Tensor& old_b = head.params.at("classifier.fc.b");
  const int in_dim = old_w.dim(0);

  Rng rng(seed);
  const double std = std::sqrt(2.0 / in_dim);
  Tensor w({in_dim, new_total_classes});
  for (int i = 0; i < in_dim; ++i) {
    std::memcpy(w.data() + static_cast<int64_t>(i) * new_total_classes,
                old_w.data() + static_cast<int64_t>(i) * old_k,
                sizeof(float) * static_cast<size_t>(old_k));
    for (int k = old_k; k < new_total_classes; ++k)
      w.data()[static_cast<int64_t>(i) * new_total_classes + k] =
          static_cast<float>(rng.normal(0.0, std));
  }
  Tensor b({new_total_classes});
  std::memcpy(b.data(), old_b.data(), sizeof(float) * static_cast<size_t>(old_k));

  // Rebuild the store so shapes stay consistent with the manifest order.
  auto& items = out->params.items();
  for (auto& [name, t] : items) {
    if (name == "classifier.fc.w") t = w;
    if (name == "classifier.fc.b") t = b;
  }
  out->arch.head_classes = new_total_classes;
  return out;
}

const char* finetune_variant_name(FinetuneVariant v) {
  return v == FinetuneVariant::FreezeExtractor ? "freeze-extractor"
                                               : "freeze-rp";
}

FinetuneVariant finetune_variant_from_name(const std::string& name) {
  if (name == "freeze-extractor") return FinetuneVariant::FreezeExtractor;
  if (name == "freeze-rp") return FinetuneVariant::FreezeRp;
  throw ConfigError("unknown fine-tuning variant '" + name + "'");
}

MetricLog finetune_reference(CompositeNetwork& reference, ComponentPtr rp_head,
                             FinetuneVariant variant,
                             const TaskDataset& train_data,
                             const TrainConfig& cfg) {
  if (variant == FinetuneVariant::FreezeRp && !rp_head)
    throw ConfigError(
        "finetune_reference: freeze-rp variant needs the RP head trained in "
        "the initial phase");

  TrainUnit unit;
  unit.task_id = "reference";
  unit.net = reference;
  unit.train_data = &train_data;
  if (variant == FinetuneVariant::FreezeExtractor) {
    reference.extractor->set_trainable(false);
    if (reference.adapter) reference.adapter->set_trainable(false);
    reference.head->set_trainable(true);
  } else {
    reference.extractor->set_trainable(true);
    if (reference.adapter) reference.adapter->set_trainable(true);
    reference.head->set_trainable(true);
    rp_head->set_trainable(false);
    unit.rp_head = rp_head;
  }
  std::vector<TrainUnit> units{unit};
  return run_training(units, cfg);
}

std::vector<TransferCurvePoint> finetune_curve(
    CompositeNetwork net, const TaskDataset& train_data,
    const TaskDataset& test_data, const std::vector<int>& checkpoints,
    const TrainConfig& cfg, const EvalSettings& eval) {
  std::vector<int> points = checkpoints;
  std::sort(points.begin(), points.end());
  points.erase(std::unique(points.begin(), points.end()), points.end());
  if (points.empty() || points.front() < 0)
    throw ConfigError("finetune_curve: checkpoints must be non-negative");

  std::vector<int> all(static_cast<size_t>(test_data.size()));
  for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);

  std::vector<TransferCurvePoint> curve;
  net.extractor->set_trainable(true);
  if (net.adapter) net.adapter->set_trainable(true);
  net.head->set_trainable(true);

  std::vector<Tensor> params = trainable_params(*net.extractor);
  if (net.adapter)
    for (Tensor& t : trainable_params(*net.adapter)) params.push_back(t);
  for (Tensor& t : trainable_params(*net.head)) params.push_back(t);
  Adam opt(params, cfg.adam);
  BatchSampler sampler(train_data.size(), cfg.batch, cfg.sampler_seed,
                       "finetune");

  int done = 0;
  for (int target : points) {
    for (; done < target; ++done) {
      const std::vector<int> idx = sampler.next();
      Tensor x = gather_images(train_data, idx);
      const std::vector<int> y = gather_labels(train_data, idx);
      Tape tape(true);
      ForwardCtx ctx{&tape, Phase::Train, NormEvalMode::BatchAtTest, nullptr};
      opt.zero_grad();
      Tensor logits = composite_forward(net, ctx, x);
      Tensor loss = softmax_cross_entropy(tape, logits, y);
      if (!std::isfinite(loss.item()))
        throw TrainingError("fine-tuning loss diverged", done);
      tape.backward(loss);
      opt.step(cfg.lr.at(done), cfg.weight_decay);
    }
    curve.push_back(
        {target, accuracy(net, test_data, all, nullptr, eval)});
  }
  return curve;
}

void stamp_rp_provenance(Component& c, const Component& rp_head) {
  c.meta["rp_head_digest"] = rp_head.param_digest();
}

void check_rp_provenance(const Component& a, const Component& b) {
  const auto ia = a.meta.find("rp_head_digest");
  const auto ib = b.meta.find("rp_head_digest");
  if (ia == a.meta.end() || ib == b.meta.end())
    throw ConfigError("fast transfer: component '" +
                      (ia == a.meta.end() ? a.id : b.id) +
                      "' records no RP-head provenance");
  if (ia->second != ib->second)
    throw ConfigError("fast transfer: components '" + a.id + "' and '" + b.id +
                      "' were trained against different RP heads");
}

}  // namespace compat
