#pragma once

#include "compat/component.hpp"
#include "compat/dataset.hpp"
#include "compat/evaluation.hpp"
#include "compat/training.hpp"

namespace compat {

struct SourceModel {
  ComponentPtr extractor;
  ComponentPtr classifier;
  ComponentPtr rp_head;
};

struct AdaptConfig {
  int steps = 200;
  int batch = 64;
  float lr = 1e-4f;  // caller passes the final source learning rate
  float weight_decay = 0.0f;
  uint64_t sampler_seed = 1;
  AdamConfig adam{};
};

// Fine-tunes a clone of the source extractor on unlabeled target images by
// minimizing the rotation-prediction loss against the frozen RP head. The
// source model is read-only; only the returned extractor differs. The
// signature takes raw images: no labels enter the operation.
ComponentPtr adapt_extractor(const SourceModel& source,
                             const Tensor& target_images,
                             const AdaptConfig& cfg);

// Average per-class accuracy of (extractor + classifier) on the target test
// set, optionally remapping target labels into the classifier vocabulary.
float evaluate_uda(ComponentPtr extractor, ComponentPtr classifier,
                   const TaskDataset& target_test,
                   const std::vector<int>* label_map, const EvalSettings& s);

}  // namespace compat
