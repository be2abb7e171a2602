#include "compat/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "compat/assignment.hpp"
#include "compat/error.hpp"

namespace compat {

namespace {

// Splits [0,n) into contiguous ranges of size `batch`; a trailing remainder
// of 1 merges into the previous range when batch statistics are involved.
std::vector<std::pair<int, int>> batch_ranges(int n, int batch,
                                              bool batch_stats) {
  if (n <= 0) throw InputError("evaluation: empty example set");
  std::vector<std::pair<int, int>> out;
  for (int lo = 0; lo < n; lo += batch)
    out.emplace_back(lo, std::min(n, lo + batch));
  if (batch_stats && out.size() > 1 &&
      out.back().second - out.back().first == 1) {
    out[out.size() - 2].second = n;
    out.pop_back();
  }
  return out;
}

std::vector<int> predict_with_components(const CompositeNetwork& net,
                                         const TaskDataset& data,
                                         std::span<const int> indices,
                                         const EvalSettings& s) {
  const bool batch_stats = s.mode == NormEvalMode::BatchAtTest;
  std::vector<int> preds;
  preds.reserve(indices.size());
  const auto ranges =
      batch_ranges(static_cast<int>(indices.size()), s.batch, batch_stats);
  for (const auto& [lo, hi] : ranges) {
    std::vector<int> chunk(indices.begin() + lo, indices.begin() + hi);
    Tensor x = gather_images(data, chunk);
    Tape tape(false);
    ForwardCtx ctx{&tape, Phase::Eval, s.mode, nullptr};
    Tensor logits = composite_forward(net, ctx, x);
    std::vector<int> arg = argmax_rows(logits);
    preds.insert(preds.end(), arg.begin(), arg.end());
  }
  return preds;
}

CompositeNetwork clone_composite(const CompositeNetwork& net) {
  CompositeNetwork out;
  out.extractor = net.extractor->clone();
  if (net.adapter) out.adapter = net.adapter->clone();
  out.head = net.head->clone();
  return out;
}

}  // namespace

std::vector<int> predict(const CompositeNetwork& net, const TaskDataset& data,
                         std::span<const int> indices, const EvalSettings& s) {
  if (s.mode != NormEvalMode::RecomputedOnTest)
    return predict_with_components(net, data, indices, s);
  // Recompute statistics on clones so evaluation stays side-effect free.
  CompositeNetwork copy = clone_composite(net);
  std::vector<int> idx(indices.begin(), indices.end());
  recompute_stats(copy, gather_images(data, idx), s.batch);
  return predict_with_components(copy, data, indices, s);
}

float accuracy(const CompositeNetwork& net, const TaskDataset& data,
               std::span<const int> indices, const std::vector<int>* label_map,
               const EvalSettings& s) {
  const std::vector<int> preds = predict(net, data, indices, s);
  int64_t hit = 0;
  for (size_t i = 0; i < indices.size(); ++i) {
    int want = data.labels[static_cast<size_t>(indices[i])];
    if (label_map) {
      want = (*label_map)[static_cast<size_t>(want)];
      if (want < 0) throw InputError("accuracy: example outside the label map");
    }
    if (preds[i] == want) ++hit;
  }
  return static_cast<float>(static_cast<double>(hit) / static_cast<double>(indices.size()));
}

float average_class_accuracy(const CompositeNetwork& net,
                             const TaskDataset& data,
                             std::span<const int> indices,
                             const std::vector<int>* label_map,
                             const EvalSettings& s) {
  const std::vector<int> preds = predict(net, data, indices, s);
  std::map<int, std::pair<int64_t, int64_t>> per_class;  // label -> (hits, total)
  for (size_t i = 0; i < indices.size(); ++i) {
    int want = data.labels[static_cast<size_t>(indices[i])];
    if (label_map) want = (*label_map)[static_cast<size_t>(want)];
    auto& [hits, total] = per_class[want];
    ++total;
    if (preds[i] == want) ++hits;
  }
  if (per_class.empty()) throw InputError("average_class_accuracy: no examples");
  double acc = 0.0;
  for (const auto& [cls, ht] : per_class)
    acc += static_cast<double>(ht.first) / static_cast<double>(ht.second);
  return static_cast<float>(acc / static_cast<double>(per_class.size()));
}

void recompute_stats(const CompositeNetwork& net, const Tensor& images,
                     int batch) {
  if (!images.defined() || images.dim(0) == 0)
    throw InputError("recompute_stats: empty image set");
  StatsRecorder recorder;
  const int n = images.dim(0);
  const int64_t stride = images.size() / n;
  const auto ranges = batch_ranges(n, batch, true);
  for (const auto& [lo, hi] : ranges) {
    Tensor chunk({hi - lo, images.dim(1), images.dim(2), images.dim(3)});
    std::copy(images.data() + lo * stride, images.data() + hi * stride,
              chunk.data());
    Tape tape(false);
    ForwardCtx ctx{&tape, Phase::Eval, NormEvalMode::BatchAtTest, &recorder};
    composite_forward(net, ctx, chunk);
  }

  auto apply = [&recorder](Component& c) {
    for (auto& [name, values] : c.stats.items()) {
      if (name.size() < 5 || name.substr(name.size() - 5) != ".mean") continue;
      const std::string layer = name.substr(0, name.size() - 5);
      const std::string key = c.id + "/" + layer;
      if (!recorder.has(key)) continue;
      std::vector<float> mean, var;
      recorder.finalize(key, mean, var);
      c.stats.at(layer + ".mean") = mean;
      c.stats.at(layer + ".var") = var;
    }
  };
  apply(*net.extractor);
  if (net.adapter) apply(*net.adapter);
  apply(*net.head);
}

RecombinationReport recombination_accuracy(const TaskPair& pair,
                                           const CompositeNetwork& net_a,
                                           const CompositeNetwork& net_b,
                                           const EvalSettings& s) {
  if (pair.common_classes.empty())
    throw ConfigError("recombination_accuracy: no common classes");

  RecombinationReport rep;
  rep.chance = 1.0f / static_cast<float>(pair.common_count());
  rep.eval_mode = norm_eval_mode_name(s.mode);

  // Adapters travel with their extractors, heads move alone.
  CompositeNetwork n_ab = recombine(net_a.extractor, net_a.adapter, net_b.head);
  CompositeNetwork n_ba = recombine(net_b.extractor, net_b.adapter, net_a.head);

  std::vector<int> common_a, common_b;
  for (size_t y = 0; y < pair.map_a_to_b.size(); ++y)
    if (pair.map_a_to_b[y] >= 0) common_a.push_back(static_cast<int>(y));
  for (size_t y = 0; y < pair.map_b_to_a.size(); ++y)
    if (pair.map_b_to_a[y] >= 0) common_b.push_back(static_cast<int>(y));

  const std::vector<int> idx_a =
      indices_with_labels(pair.a.test, common_a);
  const std::vector<int> idx_b =
      indices_with_labels(pair.b.test, common_b);

  rep.acc_ab = accuracy(n_ab, pair.a.test, idx_a, &pair.map_a_to_b, s);
  rep.acc_ba = accuracy(n_ba, pair.b.test, idx_b, &pair.map_b_to_a, s);
  rep.average = 0.5f * (rep.acc_ab + rep.acc_ba);

  std::vector<int> all_a(static_cast<size_t>(pair.a.test.size()));
  std::vector<int> all_b(static_cast<size_t>(pair.b.test.size()));
  for (size_t i = 0; i < all_a.size(); ++i) all_a[i] = static_cast<int>(i);
  for (size_t i = 0; i < all_b.size(); ++i) all_b[i] = static_cast<int>(i);
  rep.own_a_full = accuracy(net_a, pair.a.test, all_a, nullptr, s);
  rep.own_b_full = accuracy(net_b, pair.b.test, all_b, nullptr, s);
  rep.own_a_common = accuracy(net_a, pair.a.test, idx_a, nullptr, s);
  rep.own_b_common = accuracy(net_b, pair.b.test, idx_b, nullptr, s);
  return rep;
}

namespace {

// Pooled activations [N,C] of extractor(+adapter) over the probe set,
// batch-at-test normalization.
std::vector<std::vector<float>> pooled_features(Component& extr,
                                                Component* adapter,
                                                const Tensor& probe,
                                                int batch) {
  const int n = probe.dim(0);
  const int64_t stride = probe.size() / n;
  std::vector<std::vector<float>> rows;
  rows.reserve(static_cast<size_t>(n));
  const auto ranges = batch_ranges(n, batch, true);
  for (const auto& [lo, hi] : ranges) {
    Tensor chunk({hi - lo, probe.dim(1), probe.dim(2), probe.dim(3)});
    std::copy(probe.data() + lo * stride, probe.data() + hi * stride,
              chunk.data());
    Tape tape(false);
    ForwardCtx ctx{&tape, Phase::Eval, NormEvalMode::BatchAtTest, nullptr};
    Tensor feat = extractor_forward(extr, ctx, chunk);
    if (adapter) feat = adapter_forward(*adapter, ctx, feat);
    Tensor pooled = global_avg_pool(tape, feat);
    const int C = pooled.dim(1);
    for (int i = 0; i < hi - lo; ++i)
      rows.emplace_back(pooled.data() + static_cast<int64_t>(i) * C,
                        pooled.data() + static_cast<int64_t>(i + 1) * C);
  }
  return rows;
}

}  // namespace

CorrelationReport cross_correlation(Component& extr_a, Component* adapter_a,
                                    Component& extr_b, Component* adapter_b,
                                    const Tensor& probe, CorrelationMode mode,
                                    int batch) {
  const auto fa = pooled_features(extr_a, adapter_a, probe, batch);
  const auto fb = pooled_features(extr_b, adapter_b, probe, batch);
  const int n = static_cast<int>(fa.size());
  const int ca = static_cast<int>(fa[0].size());
  const int cb = static_cast<int>(fb[0].size());
  if (ca != cb)
    throw ConfigError(
        "cross_correlation: channel counts differ (" + std::to_string(ca) +
        " vs " + std::to_string(cb) + "); correlate post-adapter features");

  // Standardize per channel.
  auto standardize = [n](const std::vector<std::vector<float>>& f, int c,
                         std::vector<std::vector<double>>& z,
                         std::vector<bool>& flat) {
    z.assign(static_cast<size_t>(c), std::vector<double>(static_cast<size_t>(n)));
    flat.assign(static_cast<size_t>(c), false);
    for (int j = 0; j < c; ++j) {
      double mean = 0.0;
      for (int i = 0; i < n; ++i) mean += f[static_cast<size_t>(i)][static_cast<size_t>(j)];
      mean /= n;
      double var = 0.0;
      for (int i = 0; i < n; ++i) {
        const double d = f[static_cast<size_t>(i)][static_cast<size_t>(j)] - mean;
        var += d * d;
      }
      var /= n;
      if (var < 1e-18) {
        flat[static_cast<size_t>(j)] = true;
        continue;
      }
      const double inv = 1.0 / std::sqrt(var);
      for (int i = 0; i < n; ++i)
        z[static_cast<size_t>(j)][static_cast<size_t>(i)] =
            (f[static_cast<size_t>(i)][static_cast<size_t>(j)] - mean) * inv;
    }
  };
  std::vector<std::vector<double>> za, zb;
  std::vector<bool> flat_a, flat_b;
  standardize(fa, ca, za, flat_a);
  standardize(fb, cb, zb, flat_b);

  std::vector<std::vector<double>> corr(
      static_cast<size_t>(ca), std::vector<double>(static_cast<size_t>(cb), 0.0));
  int flagged = 0;
  for (int i = 0; i < ca; ++i) {
    if (flat_a[static_cast<size_t>(i)]) ++flagged;
    for (int j = 0; j < cb; ++j) {
      if (flat_a[static_cast<size_t>(i)] || flat_b[static_cast<size_t>(j)]) continue;
      double acc = 0.0;
      for (int t = 0; t < n; ++t)
        acc += za[static_cast<size_t>(i)][static_cast<size_t>(t)] *
               zb[static_cast<size_t>(j)][static_cast<size_t>(t)];
      corr[static_cast<size_t>(i)][static_cast<size_t>(j)] = acc / n;
    }
  }
  for (int j = 0; j < cb; ++j)
    if (flat_b[static_cast<size_t>(j)]) ++flagged;

  CorrelationReport rep;
  rep.zero_variance_flagged = flagged;
  rep.optimal = mode == CorrelationMode::OptimalPermutation;
  if (rep.optimal) {
    auto [perm, objective] = solve_assignment_max(corr);
    rep.permutation = std::move(perm);
    rep.objective = objective;
  } else {
    rep.permutation.resize(static_cast<size_t>(ca));
    for (int i = 0; i < ca; ++i) rep.permutation[static_cast<size_t>(i)] = i;
    rep.objective = 0.0;
    for (int i = 0; i < ca; ++i) rep.objective += corr[static_cast<size_t>(i)][static_cast<size_t>(i)];
  }

  rep.per_channel.resize(static_cast<size_t>(ca));
  double mean = 0.0;
  for (int i = 0; i < ca; ++i) {
    const double c = corr[static_cast<size_t>(i)]
                         [static_cast<size_t>(rep.permutation[static_cast<size_t>(i)])];
    rep.per_channel[static_cast<size_t>(i)] = static_cast<float>(c);
    mean += c;
  }
  rep.mean = static_cast<float>(mean / ca);
  std::sort(rep.per_channel.begin(), rep.per_channel.end(),
            [](float x, float y) { return std::fabs(x) > std::fabs(y); });
  return rep;
}

}  // namespace compat
