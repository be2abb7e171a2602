#pragma once

#include <map>
#include <string>
#include <vector>

#include "compat/tensor.hpp"

namespace compat {

enum class NormKind { Batch, Layer, Instance, None };
enum class NormEvalMode { AggregatedTrain, BatchAtTest, RecomputedOnTest };
enum class Phase { Train, Eval };

const char* norm_eval_mode_name(NormEvalMode m);
NormEvalMode norm_eval_mode_from_name(const std::string& name);
const char* norm_kind_name(NormKind k);
NormKind norm_kind_from_name(const std::string& name);

// Exact (momentum-free) per-channel statistics aggregated over every element
// seen for a key. Used to recompute running statistics after recombination.
class StatsRecorder {
 public:
  void accumulate(const std::string& key, const std::vector<double>& sum,
                  const std::vector<double>& sumsq, int64_t count_per_channel);
  bool has(const std::string& key) const;
  // mean and population variance per channel
  void finalize(const std::string& key, std::vector<float>& mean,
                std::vector<float>& var) const;
  std::vector<std::string> keys() const;

 private:
  struct Entry {
    std::vector<double> sum, sumsq;
    int64_t count = 0;
  };
  std::map<std::string, Entry> entries_;
};

struct NormContext {
  Tape* tape = nullptr;
  Phase phase = Phase::Train;
  NormEvalMode eval_mode = NormEvalMode::BatchAtTest;
  StatsRecorder* recorder = nullptr;  // non-null: use batch stats and record
};

// Normalization with a per-channel affine. Batch kind keeps running
// statistics; layer/instance kinds are stateless and phase-independent.
// Train phase is differentiable; eval phase records no gradients.
// Batch statistics require at least 2 examples.
Tensor norm_forward(NormContext& ctx, NormKind kind, const Tensor& x,
                    const Tensor& gamma, const Tensor& beta,
                    std::vector<float>& running_mean,
                    std::vector<float>& running_var,
                    const std::string& stat_key, float momentum = 0.9f,
                    float eps = 1e-5f);

// Mean squared deviation of per-example L2 norms from 1.
Tensor unit_length_loss(Tape& tape, const Tensor& features);

}  // namespace compat
