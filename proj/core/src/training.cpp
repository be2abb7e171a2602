#include "compat/training.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "compat/error.hpp"
#include "compat/rng.hpp"

namespace compat {

void adam_update(float* param, const float* grad, float* m, float* v,
                 int64_t n, int64_t t, float lr, float weight_decay,
                 const AdamConfig& cfg) {
  const float bc1 = 1.0f - std::pow(cfg.beta1, static_cast<float>(t));
  const float bc2 = 1.0f - std::pow(cfg.beta2, static_cast<float>(t));
  for (int64_t i = 0; i < n; ++i) {
    const float g = grad[i];
    m[i] = cfg.beta1 * m[i] + (1.0f - cfg.beta1) * g;
    v[i] = cfg.beta2 * v[i] + (1.0f - cfg.beta2) * g * g;
    const float mhat = m[i] / bc1;
    const float vhat = v[i] / bc2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    if (weight_decay != 0.0f) param[i] -= lr * weight_decay * param[i];
  }
}

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  slots_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    slots_[i].m.assign(static_cast<size_t>(params_[i].size()), 0.0f);
    slots_[i].v.assign(static_cast<size_t>(params_[i].size()), 0.0f);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step(float lr, float weight_decay) {
  ++t_;
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    const float* g = p.grad();  // allocates zeros when the parameter was not reached
    const int64_t n = p.size();
    for (int64_t j = 0; j < n; ++j)
      if (!std::isfinite(g[j]))
        throw TrainingError("non-finite gradient in parameter " +
                                std::to_string(i),
                            static_cast<long>(t_));
    adam_update(p.data(), g, slots_[i].m.data(), slots_[i].v.data(), n, t_, lr,
                weight_decay, cfg_);
  }
}

float LrSchedule::at(int step) const {
  if (decay_every <= 0) return base;
  const int k = step / decay_every;
  return base * std::pow(decay, static_cast<float>(k));
}

BatchSampler::BatchSampler(int dataset_size, int batch, uint64_t seed,
                           const std::string& task_id)
    : n_(dataset_size), batch_(batch), rng_(Rng(seed).fork(task_id)) {
  if (n_ <= 0) throw InputError("BatchSampler: empty dataset");
  if (batch_ <= 0) throw ConfigError("BatchSampler: non-positive batch size");
}

std::vector<int> BatchSampler::next() {
  std::vector<int> idx(static_cast<size_t>(batch_));
  for (int i = 0; i < batch_; ++i)
    idx[static_cast<size_t>(i)] = static_cast<int>(rng_.below(static_cast<uint64_t>(n_)));
  return idx;
}

std::string MetricLog::to_csv() const {
  std::ostringstream out;
  out << "step,task,target_loss,rp_loss,dcc_loss,unit_loss,total,lr\n";
  char buf[256];
  for (const MetricRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                  r.step, r.task.c_str(), r.target_loss, r.rp_loss, r.dcc_loss,
                  r.unit_loss, r.total, r.lr);
    out << buf;
  }
  return out.str();
}

Tensor rp_loss(ForwardCtx& ctx, Component& extractor, Component* adapter,
               Component& rp_head, const Tensor& images) {
  if (rp_head.arch.head_classes != 4)
    throw ConfigError("rp_loss: rotation head must have 4 outputs, has " +
                      std::to_string(rp_head.arch.head_classes));
  if (images.dim(2) != images.dim(3))
    throw ConfigError("rp_loss: requires square images");
  Tape& tape = *ctx.tape;
  const int B = images.dim(0);

  std::vector<Tensor> rotated;
  std::vector<int> labels(static_cast<size_t>(4 * B));
  rotated.reserve(4);
  for (int s = 0; s < 4; ++s) {
    rotated.push_back(rotate90(tape, images, rotation_from_index(s)));
    for (int i = 0; i < B; ++i) labels[static_cast<size_t>(s * B + i)] = s;
  }
  Tensor stacked = concat_batch(tape, rotated);
  Tensor feat = extractor_forward(extractor, ctx, stacked);
  if (adapter) feat = adapter_forward(*adapter, ctx, feat);
  Tensor logits = head_forward(rp_head, ctx, feat);
  return softmax_cross_entropy(tape, logits, labels);
}

Tensor dcc_loss_on_features(ForwardCtx& ctx, const Tensor& features,
                            Component& dcc_head,
                            const std::vector<int>& labels,
                            const std::vector<int>& label_map) {
  if (label_map.empty() ||
      std::all_of(label_map.begin(), label_map.end(),
                  [](int v) { return v < 0; }))
    throw ConfigError("dcc_loss: empty common-class set, DCC inapplicable");
  Tensor logits = head_forward(dcc_head, ctx, features);
  const int K = logits.dim(1);
  std::vector<int> mapped(labels.size());
  std::vector<float> weights(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= static_cast<int>(label_map.size()))
      throw InputError("dcc_loss: label " + std::to_string(y) +
                       " outside the task vocabulary");
    const int c = label_map[static_cast<size_t>(y)];
    if (c >= K)
      throw ConfigError("dcc_loss: label map exceeds head width");
    mapped[i] = c < 0 ? 0 : c;
    weights[i] = c < 0 ? 0.0f : 1.0f;
  }
  return softmax_cross_entropy_weighted(*ctx.tape, logits, mapped, weights);
}

Tensor dcc_loss(ForwardCtx& ctx, Component& extractor, Component* adapter,
                Component& dcc_head, const Tensor& images,
                const std::vector<int>& labels,
                const std::vector<int>& label_map) {
  Tensor feat = extractor_forward(extractor, ctx, images);
  if (adapter) feat = adapter_forward(*adapter, ctx, feat);
  return dcc_loss_on_features(ctx, feat, dcc_head, labels, label_map);
}

namespace {

struct Trainee {
  Component* comp;
  Adam opt;
};

}  // namespace

MetricLog run_training(std::vector<TrainUnit>& units, const TrainConfig& cfg) {
  if (units.empty()) throw ConfigError("run_training: no units");
  for (const TrainUnit& u : units) {
    if (!u.net.extractor || !u.net.head || !u.train_data)
      throw ConfigError("run_training: unit '" + u.task_id + "' incomplete");
    if (u.dcc_head && u.dcc_label_map.empty())
      throw ConfigError("run_training: unit '" + u.task_id +
                        "' has a DCC head but no label map");
  }

  // One optimizer per distinct trainable parameter store.
  std::vector<Trainee> trainees;
  std::set<const Component*> seen;
  auto enroll = [&](const ComponentPtr& c) {
    if (!c || seen.count(c.get())) return;
    seen.insert(c.get());
    if (!c->trainable()) return;
    trainees.push_back(Trainee{c.get(), Adam(trainable_params(*c), cfg.adam)});
  };
  for (TrainUnit& u : units) {
    enroll(u.net.extractor);
    enroll(u.net.adapter);
    enroll(u.net.head);
    enroll(u.rp_head);
    enroll(u.dcc_head);
  }
  if (trainees.empty())
    throw ConfigError("run_training: nothing is trainable");

  std::vector<BatchSampler> samplers;
  samplers.reserve(units.size());
  for (const TrainUnit& u : units)
    samplers.emplace_back(u.train_data->size(), cfg.batch, cfg.sampler_seed,
                          u.task_id);

  MetricLog log;
  log.rows.reserve(static_cast<size_t>(cfg.steps) * units.size());
  for (int step = 0; step < cfg.steps; ++step) {
    const float lr = cfg.lr.at(step);
    for (size_t ui = 0; ui < units.size(); ++ui) {
      TrainUnit& u = units[ui];
      const std::vector<int> idx = samplers[ui].next();
      Tensor x = gather_images(*u.train_data, idx);
      const std::vector<int> y = gather_labels(*u.train_data, idx);

      Tape tape(true);
      ForwardCtx ctx{&tape, Phase::Train, NormEvalMode::BatchAtTest, nullptr};
      for (Trainee& t : trainees) t.opt.zero_grad();

      Tensor feat = extractor_forward(*u.net.extractor, ctx, x);
      if (u.net.adapter) feat = adapter_forward(*u.net.adapter, ctx, feat);
      Tensor logits = head_forward(*u.net.head, ctx, feat);
      Tensor target = softmax_cross_entropy(tape, logits, y);

      MetricRow row;
      row.step = step;
      row.task = u.task_id;
      row.target_loss = target.item();
      row.lr = lr;

      Tensor total = target;
      if (u.dcc_head) {
        Tensor lc = dcc_loss_on_features(ctx, feat, *u.dcc_head, y,
                                         u.dcc_label_map);
        row.dcc_loss = lc.item();
        total = add(tape, total, scale(tape, lc, u.w_dcc));
      }
      if (u.rp_head) {
        Tensor ls = rp_loss(ctx, *u.net.extractor, u.net.adapter.get(),
                            *u.rp_head, x);
        row.rp_loss = ls.item();
        total = add(tape, total, scale(tape, ls, u.w_rp));
      }
      if (cfg.unit_length_weight > 0.0f) {
        Tensor lu = unit_length_loss(tape, feat);
        row.unit_loss = lu.item();
        total = add(tape, total, scale(tape, lu, cfg.unit_length_weight));
      }
      row.total = total.item();
      if (!std::isfinite(row.total))
        throw TrainingError("loss diverged on task '" + u.task_id + "'", step);

      tape.backward(total);
      for (Trainee& t : trainees) t.opt.step(lr, cfg.weight_decay);
      log.rows.push_back(std::move(row));
    }
  }
  return log;
}

MetricLog incremental_train(TrainUnit& unit, const TrainConfig& cfg) {
  if (!unit.rp_head && !unit.dcc_head)
    throw ConfigError(
        "incremental_train: no frozen auxiliary head supplied; nothing "
        "enforces compatibility");
  for (const ComponentPtr& aux : {unit.rp_head, unit.dcc_head})
    if (aux && aux->trainable())
      throw ConfigError("incremental_train: auxiliary head '" + aux->id +
                        "' must be frozen");
  std::vector<TrainUnit> units{unit};
  MetricLog log = run_training(units, cfg);
  unit = units[0];
  return log;
}

}  // namespace compat
