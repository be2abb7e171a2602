#pragma once

#include "compat/component.hpp"
#include "compat/dataset.hpp"
#include "compat/evaluation.hpp"
#include "compat/training.hpp"

namespace compat {

// Widens the classifier of a head component; existing class rows are kept
// bit-exact, new rows are seeded. Shrinking is rejected.
ComponentPtr extend_classifier(const Component& head, int new_total_classes,
                               uint64_t seed);

enum class FinetuneVariant { FreezeExtractor, FreezeRp };

const char* finetune_variant_name(FinetuneVariant v);
FinetuneVariant finetune_variant_from_name(const std::string& name);

// Reference fine-tuning after a class-set extension. FreezeExtractor updates
// only the head; FreezeRp lets extractor (+adapter) and head move while a
// frozen RP head keeps the features compatible.
MetricLog finetune_reference(CompositeNetwork& reference, ComponentPtr rp_head,
                             FinetuneVariant variant,
                             const TaskDataset& train_data,
                             const TrainConfig& cfg);

struct TransferCurvePoint {
  int step = 0;
  float acc = 0;
};

// Accuracy of the composite at step 0 and along fine-tuning on the target
// task (plain task loss, callers pass weight decay 0). Mutates the given
// components; pass clones to keep originals.
std::vector<TransferCurvePoint> finetune_curve(
    CompositeNetwork net, const TaskDataset& train_data,
    const TaskDataset& test_data, const std::vector<int>& checkpoints,
    const TrainConfig& cfg, const EvalSettings& eval);

// Marks a component as trained against a specific frozen RP head.
void stamp_rp_provenance(Component& c, const Component& rp_head);

// Throws ConfigError unless both components carry the same RP-head digest.
void check_rp_provenance(const Component& a, const Component& b);

}  // namespace compat
