#pragma once

#include <optional>
#include <string>
#include <vector>

#include "compat/component.hpp"
#include "compat/dataset.hpp"

namespace compat {

struct EvalSettings {
  NormEvalMode mode = NormEvalMode::BatchAtTest;
  int batch = 128;
};

// Predictions (head-vocabulary indices) over data[indices], evaluated in
// fixed order. A trailing 1-example remainder is folded into the previous
// batch when batch statistics are in use. Never mutates parameters or
// statistics; recomputed-on-test mode operates on internal clones.
std::vector<int> predict(const CompositeNetwork& net, const TaskDataset& data,
                         std::span<const int> indices, const EvalSettings& s);

// Share of examples with argmax == label_map[label] (identity map when null).
float accuracy(const CompositeNetwork& net, const TaskDataset& data,
               std::span<const int> indices, const std::vector<int>* label_map,
               const EvalSettings& s);

// Mean of per-class recalls over the classes present in the evaluated subset.
float average_class_accuracy(const CompositeNetwork& net,
                             const TaskDataset& data,
                             std::span<const int> indices,
                             const std::vector<int>* label_map,
                             const EvalSettings& s);

// Replaces running statistics of every batch-norm layer in the composite
// with exact statistics aggregated over the given images (labels unused).
void recompute_stats(const CompositeNetwork& net, const Tensor& images,
                     int batch);

struct RecombinationReport {
  float acc_ab = 0;  // extractor a + head b on test_a, common classes
  float acc_ba = 0;  // extractor b + head a on test_b, common classes
  float average = 0;
  float chance = 0;  // 1/|C|
  float own_a_full = 0, own_b_full = 0;
  float own_a_common = 0, own_b_common = 0;
  std::string eval_mode;
};

// The recombination-accuracy protocol: cross-paired composites evaluated on
// the common-class-restricted test sets with label remapping, plus own-task
// accuracies. Adapters stay with their extractors.
RecombinationReport recombination_accuracy(const TaskPair& pair,
                                           const CompositeNetwork& net_a,
                                           const CompositeNetwork& net_b,
                                           const EvalSettings& s);

struct CorrelationReport {
  std::vector<float> per_channel;  // sorted by magnitude, descending
  float mean = 0;
  std::vector<int> permutation;  // b-channel matched to each a-channel
  double objective = 0;          // assignment objective (optimal mode)
  bool optimal = false;
  int zero_variance_flagged = 0;
};

enum class CorrelationMode { Identity, OptimalPermutation };

// Per-channel Pearson correlation between spatially pooled activations of
// two extractors over a probe set; optimal mode solves the max-sum
// assignment over the full channel-pair correlation matrix.
CorrelationReport cross_correlation(Component& extr_a, Component* adapter_a,
                                    Component& extr_b, Component* adapter_b,
                                    const Tensor& probe, CorrelationMode mode,
                                    int batch = 128);

}  // namespace compat
