#pragma once

#include <optional>
#include <string>
#include <vector>

#include "compat/component.hpp"
#include "compat/dataset.hpp"
#include "compat/rng.hpp"

namespace compat {

struct AdamConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// One Adam update over a flat buffer; bias-corrected, decoupled weight decay.
void adam_update(float* param, const float* grad, float* m, float* v,
                 int64_t n, int64_t t, float lr, float weight_decay,
                 const AdamConfig& cfg);

// Optimizer over a fixed parameter list; one instance per parameter store.
class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, AdamConfig cfg = {});
  void zero_grad();
  // Throws TrainingError when a gradient is non-finite.
  void step(float lr, float weight_decay);
  int64_t step_count() const { return t_; }

 private:
  struct Slot {
    std::vector<float> m, v;
  };
  std::vector<Tensor> params_;
  std::vector<Slot> slots_;
  AdamConfig cfg_;
  int64_t t_ = 0;
};

struct LrSchedule {
  float base = 0.01f;
  float decay = 0.1f;
  int decay_every = 500;  // <=0 disables decay
  float at(int step) const;
};

struct TrainConfig {
  int steps = 2000;
  int batch = 64;
  LrSchedule lr{};
  float weight_decay = 1e-7f;
  float unit_length_weight = 0.0f;
  uint64_t sampler_seed = 1;  // batch streams depend on (seed, task) only
  AdamConfig adam{};
};

// Uniform-with-replacement batch stream, a pure function of (seed, task id).
class BatchSampler {
 public:
  BatchSampler(int dataset_size, int batch, uint64_t seed,
               const std::string& task_id);
  std::vector<int> next();

 private:
  int n_, batch_;
  Rng rng_;
};

struct MetricRow {
  int step = 0;
  std::string task;
  float target_loss = 0, rp_loss = 0, dcc_loss = 0, unit_loss = 0, total = 0,
        lr = 0;
};

struct MetricLog {
  std::vector<MetricRow> rows;
  std::string to_csv() const;  // step,task,target_loss,rp_loss,dcc_loss,unit_loss,total,lr
};

// Mean over the four rotations of the cross-entropy between the head's
// prediction on rotated features and the applied rotation. The four rotated
// copies run as one stacked batch.
Tensor rp_loss(ForwardCtx& ctx, Component& extractor, Component* adapter,
               Component& rp_head, const Tensor& images);

// Cross-entropy over the common classes, restricted by the label map
// (own label -> common-class index, -1 outside). Batches without a single
// common-class example contribute a zero loss.
Tensor dcc_loss_on_features(ForwardCtx& ctx, const Tensor& features,
                            Component& dcc_head,
                            const std::vector<int>& labels,
                            const std::vector<int>& label_map);

// Same, but runs the extractor (+ optional adapter) itself.
Tensor dcc_loss(ForwardCtx& ctx, Component& extractor, Component* adapter,
                Component& dcc_head, const Tensor& images,
                const std::vector<int>& labels,
                const std::vector<int>& label_map);

// One trainee: a composite network on its task, plus optional auxiliary
// heads (shared or private; frozen heads take no updates).
struct TrainUnit {
  std::string task_id;
  CompositeNetwork net;
  const TaskDataset* train_data = nullptr;
  ComponentPtr rp_head;
  ComponentPtr dcc_head;
  std::vector<int> dcc_label_map;
  float w_rp = 1.0f, w_dcc = 1.0f;
};

// Alternating minibatch optimization in unit order; auxiliary heads shared
// between units are updated by every unit and carry a single Adam state.
MetricLog run_training(std::vector<TrainUnit>& units, const TrainConfig& cfg);

inline MetricLog joint_train(std::vector<TrainUnit>& units,
                             const TrainConfig& cfg) {
  return run_training(units, cfg);
}

// Trains one new network against previously trained auxiliary heads, which
// must be present and frozen.
MetricLog incremental_train(TrainUnit& unit, const TrainConfig& cfg);

}  // namespace compat
