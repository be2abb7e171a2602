#include "compat/adaptation.hpp"

#include <cstring>

#include "compat/error.hpp"
#include "compat/rng.hpp"

namespace compat {

namespace {

Tensor slice_rows(const Tensor& images, const std::vector<int>& idx) {
  const int n = images.dim(0);
  const int64_t stride = images.size() / n;
  Tensor out({static_cast<int>(idx.size()), images.dim(1), images.dim(2),
              images.dim(3)});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n) throw InputError("slice_rows: bad index");
    std::memcpy(out.data() + static_cast<int64_t>(i) * stride,
                images.data() + static_cast<int64_t>(idx[i]) * stride,
                sizeof(float) * static_cast<size_t>(stride));
  }
  return out;
}

}  // namespace

ComponentPtr adapt_extractor(const SourceModel& source,
                             const Tensor& target_images,
                             const AdaptConfig& cfg) {
  if (!source.rp_head)
    throw ConfigError(
        "adapt_extractor: source model has no rotation-prediction head");
  if (!source.extractor) throw ConfigError("adapt_extractor: no extractor");
  if (!target_images.defined() || target_images.dim(0) == 0)
    throw InputError("adapt_extractor: empty target image set");
  if (target_images.dim(2) != target_images.dim(3))
    throw ConfigError("adapt_extractor: target images must be square");

  ComponentPtr adapted = source.extractor->clone();
  adapted->set_trainable(true);
  ComponentPtr rp = source.rp_head->clone();  // source stays untouched
  rp->set_trainable(false);

  Adam opt(trainable_params(*adapted), cfg.adam);
  Rng rng = Rng(cfg.sampler_seed).fork("adapt");
  const int n = target_images.dim(0);

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<int> idx(static_cast<size_t>(cfg.batch));
    for (int i = 0; i < cfg.batch; ++i)
      idx[static_cast<size_t>(i)] = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
    Tensor x = slice_rows(target_images, idx);

    Tape tape(true);
    ForwardCtx ctx{&tape, Phase::Train, NormEvalMode::BatchAtTest, nullptr};
    opt.zero_grad();
    Tensor loss = rp_loss(ctx, *adapted, nullptr, *rp, x);
    if (!std::isfinite(loss.item()))
      throw TrainingError("adaptation loss diverged", step);
    tape.backward(loss);
    opt.step(cfg.lr, cfg.weight_decay);
  }
  return adapted;
}

float evaluate_uda(ComponentPtr extractor, ComponentPtr classifier,
                   const TaskDataset& target_test,
                   const std::vector<int>* label_map, const EvalSettings& s) {
  CompositeNetwork net = recombine(std::move(extractor), std::move(classifier));
  std::vector<int> all(static_cast<size_t>(target_test.size()));
  for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  return average_class_accuracy(net, target_test, all, label_map, s);
}

}  // namespace compat
