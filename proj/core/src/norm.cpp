#include "compat/norm.hpp"

#include <cmath>

#include "compat/error.hpp"

namespace compat {

const char* norm_eval_mode_name(NormEvalMode m) {
  switch (m) {
    case NormEvalMode::AggregatedTrain: return "aggregated-train";
    case NormEvalMode::BatchAtTest: return "batch-at-test";
    case NormEvalMode::RecomputedOnTest: return "recomputed-on-test";
  }
  return "?";
}

NormEvalMode norm_eval_mode_from_name(const std::string& name) {
  if (name == "aggregated-train") return NormEvalMode::AggregatedTrain;
  if (name == "batch-at-test") return NormEvalMode::BatchAtTest;
  if (name == "recomputed-on-test") return NormEvalMode::RecomputedOnTest;
  throw ConfigError("unknown norm eval mode '" + name + "'");
}

const char* norm_kind_name(NormKind k) {
  switch (k) {
    case NormKind::Batch: return "batch";
    case NormKind::Layer: return "layer";
    case NormKind::Instance: return "instance";
    case NormKind::None: return "none";
  }
  return "?";
}

NormKind norm_kind_from_name(const std::string& name) {
  if (name == "batch") return NormKind::Batch;
  if (name == "layer") return NormKind::Layer;
  if (name == "instance") return NormKind::Instance;
  if (name == "none") return NormKind::None;
  throw ConfigError("unknown norm kind '" + name + "'");
}

void StatsRecorder::accumulate(const std::string& key,
                               const std::vector<double>& sum,
                               const std::vector<double>& sumsq,
                               int64_t count_per_channel) {
  Entry& e = entries_[key];
  if (e.sum.empty()) {
    e.sum.assign(sum.size(), 0.0);
    e.sumsq.assign(sum.size(), 0.0);
  }
  if (e.sum.size() != sum.size())
    throw UsageError("StatsRecorder: channel count changed for key " + key);
  for (size_t i = 0; i < sum.size(); ++i) {
    e.sum[i] += sum[i];
    e.sumsq[i] += sumsq[i];
  }
  e.count += count_per_channel;
}

bool StatsRecorder::has(const std::string& key) const {
  return entries_.count(key) > 0;
}

void StatsRecorder::finalize(const std::string& key, std::vector<float>& mean,
                             std::vector<float>& var) const {
  auto it = entries_.find(key);
  if (it == entries_.end())
    throw UsageError("StatsRecorder: no statistics for key " + key);
  const Entry& e = it->second;
  mean.resize(e.sum.size());
  var.resize(e.sum.size());
  for (size_t i = 0; i < e.sum.size(); ++i) {
    const double m = e.sum[i] / static_cast<double>(e.count);
    double v = e.sumsq[i] / static_cast<double>(e.count) - m * m;
    if (v < 0.0) v = 0.0;
    mean[i] = static_cast<float>(m);
    var[i] = static_cast<float>(v);
  }
}

std::vector<std::string> StatsRecorder::keys() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

namespace {

struct ChannelStats {
  std::vector<double> sum, sumsq;
  std::vector<float> mean, inv_std;
};

// Per-channel statistics over (B,H,W).
ChannelStats batch_stats(const Tensor& x, float eps) {
  const int B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  ChannelStats s;
  s.sum.assign(static_cast<size_t>(C), 0.0);
  s.sumsq.assign(static_cast<size_t>(C), 0.0);
  const float* xp = x.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const float* row = xp + (static_cast<int64_t>(b) * C + c) * HW;
      double su = 0.0, sq = 0.0;
      for (int j = 0; j < HW; ++j) {
        su += row[j];
        sq += static_cast<double>(row[j]) * row[j];
      }
      s.sum[static_cast<size_t>(c)] += su;
      s.sumsq[static_cast<size_t>(c)] += sq;
    }
  const double n = static_cast<double>(B) * HW;
  s.mean.resize(static_cast<size_t>(C));
  s.inv_std.resize(static_cast<size_t>(C));
  for (int c = 0; c < C; ++c) {
    const double m = s.sum[static_cast<size_t>(c)] / n;
    double v = s.sumsq[static_cast<size_t>(c)] / n - m * m;
    if (v < 0.0) v = 0.0;
    s.mean[static_cast<size_t>(c)] = static_cast<float>(m);
    s.inv_std[static_cast<size_t>(c)] =
        static_cast<float>(1.0 / std::sqrt(v + static_cast<double>(eps)));
  }
  return s;
}

Tensor affine_with_channel_stats(Tape* tape, bool with_grad, const Tensor& x,
                                 const Tensor& gamma, const Tensor& beta,
                                 const std::vector<float>& mean,
                                 const std::vector<float>& inv_std,
                                 bool stats_depend_on_x) {
  const int B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor out(x.shape(), with_grad);
  const float* xp = x.data();
  const float* gp = gamma.data();
  const float* bp = beta.data();
  float* op = out.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const float m = mean[static_cast<size_t>(c)];
      const float is = inv_std[static_cast<size_t>(c)];
      const float g = gp[c], be = bp[c];
      const float* row = xp + (static_cast<int64_t>(b) * C + c) * HW;
      float* orow = op + (static_cast<int64_t>(b) * C + c) * HW;
      for (int j = 0; j < HW; ++j) orow[j] = g * (row[j] - m) * is + be;
    }

  if (with_grad) {
    Tensor xc = x, gc = gamma, bc = beta, oc = out;
    std::vector<float> mv = mean, iv = inv_std;
    tape->record([xc, gc, bc, oc, mv, iv, B, C, HW, stats_depend_on_x]() mutable {
      const float* dy = oc.grad();
      if (!dy) return;
      const float* xp2 = xc.data();
      const float* gp2 = gc.data();
      const double n = static_cast<double>(B) * HW;
      for (int c = 0; c < C; ++c) {
        const float m = mv[static_cast<size_t>(c)];
        const float is = iv[static_cast<size_t>(c)];
        // Reductions over the channel's elements.
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int b = 0; b < B; ++b) {
          const float* row = xp2 + (static_cast<int64_t>(b) * C + c) * HW;
          const float* dyr = dy + (static_cast<int64_t>(b) * C + c) * HW;
          for (int j = 0; j < HW; ++j) {
            const double xhat = static_cast<double>(row[j] - m) * is;
            sum_dy += dyr[j];
            sum_dy_xhat += dyr[j] * xhat;
          }
        }
        if (gc.requires_grad())
          gc.grad()[c] += static_cast<float>(sum_dy_xhat);
        if (bc.requires_grad()) bc.grad()[c] += static_cast<float>(sum_dy);
        if (xc.requires_grad()) {
          float* dx = xc.grad();
          const float g = gp2[c];
          const float mean_dy = static_cast<float>(sum_dy / n);
          const float mean_dy_xhat = static_cast<float>(sum_dy_xhat / n);
          for (int b = 0; b < B; ++b) {
            const float* row = xp2 + (static_cast<int64_t>(b) * C + c) * HW;
            const float* dyr = dy + (static_cast<int64_t>(b) * C + c) * HW;
            float* dxr = dx + (static_cast<int64_t>(b) * C + c) * HW;
            if (stats_depend_on_x) {
              for (int j = 0; j < HW; ++j) {
                const float xhat = (row[j] - m) * is;
                dxr[j] += g * is * (dyr[j] - mean_dy - xhat * mean_dy_xhat);
              }
            } else {
              for (int j = 0; j < HW; ++j) dxr[j] += g * is * dyr[j];
            }
          }
        }
      }
    });
  }
  return out;
}

// Normalization over per-example (layer) or per-example-channel (instance)
// groups, with a per-channel affine.
Tensor grouped_norm(Tape* tape, bool with_grad, const Tensor& x,
                    const Tensor& gamma, const Tensor& beta, bool per_channel,
                    float eps) {
  const int B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const int groups = per_channel ? B * C : B;
  const int64_t glen = per_channel ? HW : static_cast<int64_t>(C) * HW;
  std::vector<float> mean(static_cast<size_t>(groups)),
      inv_std(static_cast<size_t>(groups));
  const float* xp = x.data();
  for (int g = 0; g < groups; ++g) {
    const float* row = xp + g * glen;
    double su = 0.0, sq = 0.0;
    for (int64_t j = 0; j < glen; ++j) {
      su += row[j];
      sq += static_cast<double>(row[j]) * row[j];
    }
    const double m = su / static_cast<double>(glen);
    double v = sq / static_cast<double>(glen) - m * m;
    if (v < 0.0) v = 0.0;
    mean[static_cast<size_t>(g)] = static_cast<float>(m);
    inv_std[static_cast<size_t>(g)] =
        static_cast<float>(1.0 / std::sqrt(v + static_cast<double>(eps)));
  }

  Tensor out(x.shape(), with_grad);
  const float* gp = gamma.data();
  const float* bp = beta.data();
  float* op = out.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const int g = per_channel ? b * C + c : b;
      const float m = mean[static_cast<size_t>(g)];
      const float is = inv_std[static_cast<size_t>(g)];
      const float ga = gp[c], be = bp[c];
      const float* row = xp + (static_cast<int64_t>(b) * C + c) * HW;
      float* orow = op + (static_cast<int64_t>(b) * C + c) * HW;
      for (int j = 0; j < HW; ++j) orow[j] = ga * (row[j] - m) * is + be;
    }

  if (with_grad) {
    Tensor xc = x, gc = gamma, bc = beta, oc = out;
    tape->record([xc, gc, bc, oc, mean, inv_std, B, C, HW, per_channel,
                  glen]() mutable {
      const float* dy = oc.grad();
      if (!dy) return;
      const float* xp2 = xc.data();
      const float* gp2 = gc.data();
      // Affine gradients per channel.
      if (gc.requires_grad() || bc.requires_grad()) {
        for (int c = 0; c < C; ++c) {
          double sdyx = 0.0, sdy = 0.0;
          for (int b = 0; b < B; ++b) {
            const int g = per_channel ? b * C + c : b;
            const float m = mean[static_cast<size_t>(g)];
            const float is = inv_std[static_cast<size_t>(g)];
            const float* row = xp2 + (static_cast<int64_t>(b) * C + c) * HW;
            const float* dyr = dy + (static_cast<int64_t>(b) * C + c) * HW;
            for (int j = 0; j < HW; ++j) {
              sdyx += dyr[j] * static_cast<double>((row[j] - m) * is);
              sdy += dyr[j];
            }
          }
          if (gc.requires_grad()) gc.grad()[c] += static_cast<float>(sdyx);
          if (bc.requires_grad()) bc.grad()[c] += static_cast<float>(sdy);
        }
      }
      if (xc.requires_grad()) {
        float* dx = xc.grad();
        const int groups = per_channel ? B * C : B;
        for (int g = 0; g < groups; ++g) {
          const int b = per_channel ? g / C : g;
          const float m = mean[static_cast<size_t>(g)];
          const float is = inv_std[static_cast<size_t>(g)];
          // dxhat = dy * gamma(channel of element)
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          const int c_lo = per_channel ? g % C : 0;
          const int c_hi = per_channel ? c_lo + 1 : C;
          for (int c = c_lo; c < c_hi; ++c) {
            const float ga = gp2[c];
            const float* row = xp2 + (static_cast<int64_t>(b) * C + c) * HW;
            const float* dyr = dy + (static_cast<int64_t>(b) * C + c) * HW;
            for (int j = 0; j < HW; ++j) {
              const double dxh = static_cast<double>(dyr[j]) * ga;
              const double xh = static_cast<double>((row[j] - m) * is);
              sum_dxhat += dxh;
              sum_dxhat_xhat += dxh * xh;
            }
          }
          const float mean_dxhat = static_cast<float>(sum_dxhat / static_cast<double>(glen));
          const float mean_dxhat_xhat =
              static_cast<float>(sum_dxhat_xhat / static_cast<double>(glen));
          for (int c = c_lo; c < c_hi; ++c) {
            const float ga = gp2[c];
            const float* row = xp2 + (static_cast<int64_t>(b) * C + c) * HW;
            const float* dyr = dy + (static_cast<int64_t>(b) * C + c) * HW;
            float* dxr = dx + (static_cast<int64_t>(b) * C + c) * HW;
            for (int j = 0; j < HW; ++j) {
              const float xh = (row[j] - m) * is;
              dxr[j] += is * (dyr[j] * ga - mean_dxhat - xh * mean_dxhat_xhat);
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor norm_forward(NormContext& ctx, NormKind kind, const Tensor& x,
                    const Tensor& gamma, const Tensor& beta,
                    std::vector<float>& running_mean,
                    std::vector<float>& running_var,
                    const std::string& stat_key, float momentum, float eps) {
  if (kind == NormKind::None) return x;
  if (x.ndim() != 4)
    throw ConfigError("norm_forward: expected [B,C,H,W], got " +
                      shape_str(x.shape()));
  const int B = x.dim(0), C = x.dim(1);
  if (gamma.size() != C || beta.size() != C)
    throw ConfigError("norm_forward: affine size mismatch for " + stat_key);

  const bool train = ctx.phase == Phase::Train;
  const bool grad_ok = train && ctx.tape && ctx.tape->grad_enabled() &&
                       (x.requires_grad() || gamma.requires_grad() ||
                        beta.requires_grad());

  if (kind == NormKind::Layer)
    return grouped_norm(ctx.tape, grad_ok, x, gamma, beta, false, eps);
  if (kind == NormKind::Instance)
    return grouped_norm(ctx.tape, grad_ok, x, gamma, beta, true, eps);

  // Batch kind.
  if (static_cast<int>(running_mean.size()) != C) {
    running_mean.assign(static_cast<size_t>(C), 0.0f);
    running_var.assign(static_cast<size_t>(C), 1.0f);
  }

  const bool use_batch_stats =
      train || ctx.recorder != nullptr ||
      ctx.eval_mode == NormEvalMode::BatchAtTest;

  if (use_batch_stats) {
    if (B < 2)
      throw InputError("norm_forward: batch statistics need at least 2 "
                       "examples, got a degenerate batch of " +
                       std::to_string(B) + " (" + stat_key + ")");
    ChannelStats s = batch_stats(x, eps);
    if (train) {
      for (int c = 0; c < C; ++c) {
        const size_t ci = static_cast<size_t>(c);
        const float var =
            1.0f / (s.inv_std[ci] * s.inv_std[ci]) - eps;  // batch variance
        running_mean[ci] = momentum * running_mean[ci] + (1 - momentum) * s.mean[ci];
        running_var[ci] = momentum * running_var[ci] + (1 - momentum) * var;
      }
    }
    if (ctx.recorder) {
      const int64_t count = static_cast<int64_t>(B) * x.dim(2) * x.dim(3);
      ctx.recorder->accumulate(stat_key, s.sum, s.sumsq, count);
    }
    return affine_with_channel_stats(ctx.tape, grad_ok, x, gamma, beta, s.mean,
                                     s.inv_std, true);
  }

  // Eval with stored statistics (aggregated-train or recomputed-on-test).
  std::vector<float> inv_std(static_cast<size_t>(C));
  for (int c = 0; c < C; ++c)
    inv_std[static_cast<size_t>(c)] = static_cast<float>(
        1.0 / std::sqrt(static_cast<double>(running_var[static_cast<size_t>(c)]) +
                        static_cast<double>(eps)));
  return affine_with_channel_stats(ctx.tape, false, x, gamma, beta,
                                   running_mean, inv_std, false);
}

Tensor unit_length_loss(Tape& tape, const Tensor& features) {
  if (features.ndim() < 2)
    throw ConfigError("unit_length_loss: needs a batch dim");
  const int B = features.dim(0);
  const int64_t D = features.size() / B;
  const float* xp = features.data();
  std::vector<float> norms(static_cast<size_t>(B));
  double acc = 0.0;
  for (int i = 0; i < B; ++i) {
    const float* row = xp + i * D;
    double ss = 0.0;
    for (int64_t j = 0; j < D; ++j) ss += static_cast<double>(row[j]) * row[j];
    const double n = std::sqrt(ss);
    norms[static_cast<size_t>(i)] = static_cast<float>(n);
    acc += (n - 1.0) * (n - 1.0);
  }
  Tensor out = Tensor::scalar(static_cast<float>(acc / B));
  out.set_requires_grad(tape.grad_enabled() && features.requires_grad());
  if (out.requires_grad()) {
    Tensor xc = features, oc = out;
    tape.record([xc, oc, norms, B, D]() mutable {
      const float* dy = oc.grad();
      if (!dy) return;
      float* dx = xc.grad();
      const float* xp2 = xc.data();
      for (int i = 0; i < B; ++i) {
        const float n = norms[static_cast<size_t>(i)];
        if (n < 1e-12f) continue;  // gradient vanishes at the origin guard
        const float coef = dy[0] * 2.0f * (n - 1.0f) / (n * static_cast<float>(B));
        const float* row = xp2 + i * D;
        float* dxr = dx + i * D;
        for (int64_t j = 0; j < D; ++j) dxr[j] += coef * row[j];
      }
    });
  }
  return out;
}

}  // namespace compat
