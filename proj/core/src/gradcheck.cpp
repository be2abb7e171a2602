#include "compat/gradcheck.hpp"

#include <cmath>
#include <cstring>

#include "compat/error.hpp"
#include "compat/rng.hpp"

namespace compat {

namespace refd {

DT from_tensor(const Tensor& t) {
  DT d;
  d.shape = t.shape();
  d.data.assign(t.data(), t.data() + t.size());
  return d;
}

namespace {
int64_t numel(const Shape& s) { return shape_size(s); }
}  // namespace

DT conv3x3(const DT& x, const DT& k, int stride) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int F = k.dim(0);
  const int OH = (H + 2 - 3) / stride + 1, OW = (W + 2 - 3) / stride + 1;
  DT out{{B, F, OH, OW}, std::vector<double>(static_cast<size_t>(B) * F * OH * OW, 0.0)};
  for (int b = 0; b < B; ++b)
    for (int f = 0; f < F; ++f)
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          double acc = 0.0;
          for (int c = 0; c < C; ++c)
            for (int kh = 0; kh < 3; ++kh)
              for (int kw = 0; kw < 3; ++kw) {
                const int ih = oh * stride + kh - 1, iw = ow * stride + kw - 1;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x.data[((static_cast<size_t>(b) * C + c) * H + ih) * W + iw] *
                       k.data[((static_cast<size_t>(f) * C + c) * 3 + kh) * 3 + kw];
              }
          out.data[((static_cast<size_t>(b) * F + f) * OH + oh) * OW + ow] = acc;
        }
  return out;
}

DT conv1x1(const DT& x, const DT& k, int stride) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int F = k.dim(0);
  const int OH = (H - 1) / stride + 1, OW = (W - 1) / stride + 1;
  DT out{{B, F, OH, OW}, std::vector<double>(static_cast<size_t>(B) * F * OH * OW, 0.0)};
  for (int b = 0; b < B; ++b)
    for (int f = 0; f < F; ++f)
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          double acc = 0.0;
          for (int c = 0; c < C; ++c)
            acc += x.data[((static_cast<size_t>(b) * C + c) * H + oh * stride) * W +
                          ow * stride] *
                   k.data[static_cast<size_t>(f) * C + c];
          out.data[((static_cast<size_t>(b) * F + f) * OH + oh) * OW + ow] = acc;
        }
  return out;
}

DT depthwise3x3(const DT& x, const DT& k, int stride) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int OH = (H + 2 - 3) / stride + 1, OW = (W + 2 - 3) / stride + 1;
  DT out{{B, C, OH, OW}, std::vector<double>(static_cast<size_t>(B) * C * OH * OW, 0.0)};
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          double acc = 0.0;
          for (int kh = 0; kh < 3; ++kh)
            for (int kw = 0; kw < 3; ++kw) {
              const int ih = oh * stride + kh - 1, iw = ow * stride + kw - 1;
              if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
              acc += x.data[((static_cast<size_t>(b) * C + c) * H + ih) * W + iw] *
                     k.data[(static_cast<size_t>(c) * 3 + kh) * 3 + kw];
            }
          out.data[((static_cast<size_t>(b) * C + c) * OH + oh) * OW + ow] = acc;
        }
  return out;
}

DT dense(const DT& x, const DT& w, const DT& b) {
  const int B = x.dim(0), I = x.dim(1), O = w.dim(1);
  DT out{{B, O}, std::vector<double>(static_cast<size_t>(B) * O, 0.0)};
  for (int i = 0; i < B; ++i)
    for (int o = 0; o < O; ++o) {
      double acc = b.data[static_cast<size_t>(o)];
      for (int j = 0; j < I; ++j)
        acc += x.data[static_cast<size_t>(i) * I + j] * w.data[static_cast<size_t>(j) * O + o];
      out.data[static_cast<size_t>(i) * O + o] = acc;
    }
  return out;
}

DT bias_channels(const DT& x, const DT& b) {
  const int B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  DT out = x;
  for (int i = 0; i < B; ++i)
    for (int c = 0; c < C; ++c)
      for (int j = 0; j < HW; ++j)
        out.data[(static_cast<size_t>(i) * C + c) * HW + j] += b.data[static_cast<size_t>(c)];
  return out;
}

DT relu(const DT& x) {
  DT out = x;
  for (double& v : out.data) v = v > 0 ? v : 0;
  return out;
}

DT add(const DT& a, const DT& b) {
  DT out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
  return out;
}

DT gap(const DT& x) {
  const int B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  DT out{{B, C}, std::vector<double>(static_cast<size_t>(B) * C, 0.0)};
  for (int i = 0; i < B; ++i)
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int j = 0; j < HW; ++j)
        acc += x.data[(static_cast<size_t>(i) * C + c) * HW + j];
      out.data[static_cast<size_t>(i) * C + c] = acc / HW;
    }
  return out;
}

DT rotate90(const DT& x, int turns) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2);
  DT out = x;
  for (int p = 0; p < B * C; ++p) {
    const double* src = x.data.data() + static_cast<size_t>(p) * H * H;
    double* dst = out.data.data() + static_cast<size_t>(p) * H * H;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < H; ++j) {
        int si, sj;
        switch (turns & 3) {
          case 0: si = i; sj = j; break;
          case 1: si = j; sj = H - 1 - i; break;
          case 2: si = H - 1 - i; sj = H - 1 - j; break;
          default: si = H - 1 - j; sj = i; break;
        }
        dst[i * H + j] = src[si * H + sj];
      }
  }
  return out;
}

DT batchnorm_train(const DT& x, const DT& gamma, const DT& beta, double eps) {
  const int B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  DT out = x;
  for (int c = 0; c < C; ++c) {
    double sum = 0, sq = 0;
    for (int b = 0; b < B; ++b)
      for (int j = 0; j < HW; ++j) {
        const double v = x.data[(static_cast<size_t>(b) * C + c) * HW + j];
        sum += v;
        sq += v * v;
      }
    const double n = static_cast<double>(B) * HW;
    const double m = sum / n;
    const double var = std::max(0.0, sq / n - m * m);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int b = 0; b < B; ++b)
      for (int j = 0; j < HW; ++j) {
        double& v = out.data[(static_cast<size_t>(b) * C + c) * HW + j];
        v = gamma.data[static_cast<size_t>(c)] * (v - m) * inv + beta.data[static_cast<size_t>(c)];
      }
  }
  return out;
}

namespace {

DT grouped_norm_ref(const DT& x, const DT& gamma, const DT& beta, double eps,
                    bool per_channel) {
  const int B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  DT out = x;
  const int groups = per_channel ? B * C : B;
  const int64_t glen = per_channel ? HW : static_cast<int64_t>(C) * HW;
  for (int g = 0; g < groups; ++g) {
    double sum = 0, sq = 0;
    for (int64_t j = 0; j < glen; ++j) {
      const double v = x.data[static_cast<size_t>(g * glen + j)];
      sum += v;
      sq += v * v;
    }
    const double m = sum / static_cast<double>(glen);
    const double var = std::max(0.0, sq / static_cast<double>(glen) - m * m);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < glen; ++j) {
      const int64_t flat = g * glen + j;
      const int c = static_cast<int>((flat / HW) % C);
      double& v = out.data[static_cast<size_t>(flat)];
      v = gamma.data[static_cast<size_t>(c)] * (v - m) * inv + beta.data[static_cast<size_t>(c)];
    }
  }
  return out;
}

}  // namespace

DT layernorm(const DT& x, const DT& gamma, const DT& beta, double eps) {
  return grouped_norm_ref(x, gamma, beta, eps, false);
}

DT instancenorm(const DT& x, const DT& gamma, const DT& beta, double eps) {
  return grouped_norm_ref(x, gamma, beta, eps, true);
}

DT l2_normalize(const DT& x) {
  const int B = x.dim(0);
  const int64_t D = numel(x.shape) / B;
  DT out = x;
  for (int i = 0; i < B; ++i) {
    double ss = 0;
    for (int64_t j = 0; j < D; ++j) {
      const double v = x.data[static_cast<size_t>(i * D + j)];
      ss += v * v;
    }
    const double inv = 1.0 / std::sqrt(ss + 1e-12);
    for (int64_t j = 0; j < D; ++j) out.data[static_cast<size_t>(i * D + j)] *= inv;
  }
  return out;
}

double cross_entropy(const DT& logits, const std::vector<int>& labels,
                     const std::vector<float>* weights) {
  const int B = logits.dim(0), K = logits.dim(1);
  double acc = 0, wsum = 0;
  for (int i = 0; i < B; ++i) {
    const double w = weights ? (*weights)[static_cast<size_t>(i)] : 1.0;
    wsum += w;
    if (w == 0) continue;
    const double* row = logits.data.data() + static_cast<size_t>(i) * K;
    double m = row[0];
    for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
    double z = 0;
    for (int k = 0; k < K; ++k) z += std::exp(row[k] - m);
    acc += w * (std::log(z) - (row[labels[static_cast<size_t>(i)]] - m));
  }
  return wsum > 0 ? acc / wsum : 0.0;
}

double unit_length(const DT& x) {
  const int B = x.dim(0);
  const int64_t D = numel(x.shape) / B;
  double acc = 0;
  for (int i = 0; i < B; ++i) {
    double ss = 0;
    for (int64_t j = 0; j < D; ++j) {
      const double v = x.data[static_cast<size_t>(i * D + j)];
      ss += v * v;
    }
    const double n = std::sqrt(ss);
    acc += (n - 1.0) * (n - 1.0);
  }
  return acc / B;
}

namespace {

// Double copy of a component's parameter, with at most one perturbed entry.
DT fetch(const Component& c, const std::string& name,
         const Component* perturb_comp, const std::string& perturb_name,
         int64_t perturb_index, double delta) {
  DT d = from_tensor(c.params.at(name));
  if (&c == perturb_comp && name == perturb_name)
    d.data[static_cast<size_t>(perturb_index)] += delta;
  return d;
}

struct RefWalk {
  const Component* comp;
  const Component* perturb_comp;
  const std::string* perturb_name;
  int64_t perturb_index;
  double delta;
  uint64_t* sign_hash = nullptr;

  DT relu_h(const DT& x) const {
    if (sign_hash)
      for (double v : x.data) {
        *sign_hash ^= v > 0 ? 0x9e3779b97f4a7c15ull : 0x2545f4914f6cdd1dull;
        *sign_hash *= 0x100000001b3ull;
      }
    return relu(x);
  }

  DT param(const std::string& name) const {
    return fetch(*comp, name, perturb_comp, *perturb_name, perturb_index,
                 delta);
  }

  DT norm(const NormPlan& np, const DT& x) const {
    const DT g = param(np.name + ".gamma");
    const DT b = param(np.name + ".beta");
    switch (comp->arch.norm_kind) {
      case NormKind::Batch: return batchnorm_train(x, g, b, 1e-5);
      case NormKind::Layer: return layernorm(x, g, b, 1e-5);
      case NormKind::Instance: return instancenorm(x, g, b, 1e-5);
      case NormKind::None: return x;
    }
    return x;
  }

  DT block(const BlockPlan& bp, const DT& x) const {
    if (const auto* r = std::get_if<ResBlockPlan>(&bp)) {
      DT y = conv3x3(x, param(r->conv1.name), r->conv1.stride);
      y = relu_h(norm(r->n1, y));
      y = conv3x3(y, param(r->conv2.name), 1);
      y = norm(r->n2, y);
      DT sc = x;
      if (r->proj) {
        sc = conv1x1(x, param(r->proj->name), r->proj->stride);
        sc = norm(*r->nproj, sc);
      }
      return relu_h(add(y, sc));
    }
    const auto& m = std::get<MobileBlockPlan>(bp);
    DT y = conv1x1(x, param(m.expand.name), 1);
    y = relu_h(norm(m.ne, y));
    y = depthwise3x3(y, param(m.dw.name), m.dw.stride);
    y = relu_h(norm(m.nd, y));
    y = conv1x1(y, param(m.project.name), 1);
    y = norm(m.np, y);
    if (m.residual) y = add(y, x);
    return y;
  }
};

}  // namespace

double composite_loss(const CompositeNetwork& net, const DT& images,
                      const std::vector<int>& labels,
                      const Component* perturb_comp,
                      const std::string& perturb_name, int64_t perturb_index,
                      double delta, uint64_t* sign_hash) {
  if (sign_hash) *sign_hash = 0xcbf29ce484222325ull;
  RefWalk we{net.extractor.get(), perturb_comp, &perturb_name, perturb_index,
             delta, sign_hash};
  NetworkPlan eplan = plan_network(net.extractor->arch);
  DT y = conv3x3(images, we.param(eplan.stem.name), 1);
  y = we.relu_h(we.norm(eplan.stem_norm, y));
  for (int i = 0; i < eplan.split_index; ++i)
    y = we.block(eplan.blocks[static_cast<size_t>(i)], y);
  if (net.extractor->arch.l2_at_split) y = l2_normalize(y);

  if (net.adapter) {
    RefWalk wa{net.adapter.get(), perturb_comp, &perturb_name, perturb_index,
               delta, sign_hash};
    y = conv1x1(y, wa.param("adapter.w"), 1);
    y = bias_channels(y, wa.param("adapter.b"));
  }

  RefWalk wh{net.head.get(), perturb_comp, &perturb_name, perturb_index, delta,
             sign_hash};
  NetworkPlan hplan = plan_network(net.head->arch);
  for (size_t i = static_cast<size_t>(hplan.split_index); i < hplan.blocks.size();
       ++i)
    y = wh.block(hplan.blocks[i], y);
  y = gap(y);
  y = dense(y, wh.param(hplan.classifier.name + ".w"),
            wh.param(hplan.classifier.name + ".b"));
  return cross_entropy(y, labels, nullptr);
}

}  // namespace refd

double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-6});
}

namespace {

constexpr double kEps = 1e-3;

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape), true);
  for (int64_t i = 0; i < t.size(); ++i)
    t.data()[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

// Magnitudes in [0.15, 1] with random sign, keeping ReLU kinks at a safe
// distance from the finite-difference probes.
Tensor random_tensor_signed(Rng& rng, Shape shape) {
  Tensor t(std::move(shape), true);
  for (int64_t i = 0; i < t.size(); ++i) {
    const double mag = rng.uniform(0.15, 1.0);
    t.data()[i] = static_cast<float>(rng.uniform() < 0.5 ? -mag : mag);
  }
  return t;
}

std::vector<float> random_weights(Rng& rng, int64_t n) {
  std::vector<float> w(static_cast<size_t>(n));
  for (auto& v : w) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return w;
}

// Taped scalar readout sum_i w_i * x_i; its backward is exact, so errors in
// a check always come from the op under test.
Tensor weighted_sum(Tape& tape, const Tensor& x, const std::vector<float>& w) {
  double acc = 0;
  for (int64_t i = 0; i < x.size(); ++i) acc += static_cast<double>(x.data()[i]) * w[static_cast<size_t>(i)];
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  out.set_requires_grad(tape.grad_enabled() && x.requires_grad());
  if (out.requires_grad()) {
    Tensor xc = x, oc = out;
    std::vector<float> wc = w;
    tape.record([xc, oc, wc]() mutable {
      const float* dy = oc.grad();
      if (!dy) return;
      float* dx = xc.grad();
      for (int64_t i = 0; i < xc.size(); ++i) dx[i] += dy[0] * wc[static_cast<size_t>(i)];
    });
  }
  return out;
}

double ws_ref(const refd::DT& x, const std::vector<float>& w) {
  double acc = 0;
  for (size_t i = 0; i < x.data.size(); ++i) acc += x.data[i] * w[i];
  return acc;
}

struct OpCheck {
  GradCheckResult result;
  double tol;

  void compare(const Tensor& input, const std::vector<double>& fd) {
    const float* g = input.grad();
    for (int64_t i = 0; i < input.size(); ++i) {
      const double e = rel_err(g ? g[i] : 0.0, fd[static_cast<size_t>(i)]);
      result.max_rel_err = std::max(result.max_rel_err, e);
      ++result.coords;
    }
  }
};

// Central differences of fn over every coordinate of `input`.
template <typename Fn>
std::vector<double> central_diff(Tensor& input, Fn&& fn) {
  std::vector<double> fd(static_cast<size_t>(input.size()));
  for (int64_t i = 0; i < input.size(); ++i) {
    const float keep = input.data()[i];
    input.data()[i] = static_cast<float>(keep + kEps);
    const double up = fn();
    input.data()[i] = static_cast<float>(keep - kEps);
    const double dn = fn();
    input.data()[i] = keep;
    fd[static_cast<size_t>(i)] = (up - dn) / (2 * kEps);
  }
  return fd;
}

}  // namespace

std::vector<GradCheckResult> run_gradient_checks(double tol, uint64_t seed) {
  std::vector<GradCheckResult> results;
  Rng rng(seed);

  auto finish = [&](OpCheck& chk) {
    chk.result.pass = chk.result.max_rel_err < chk.tol;
    results.push_back(chk.result);
  };

  // dense
  {
    OpCheck chk{{"dense"}, tol};
    Tensor x = random_tensor(rng, {3, 5}), w = random_tensor(rng, {5, 4}),
           b = random_tensor(rng, {4});
    const auto wts = random_weights(rng, 12);
    Tape tape;
    Tensor out = dense(tape, x, w, b);
    tape.backward(weighted_sum(tape, out, wts));
    for (Tensor* t : {&x, &w, &b}) {
      auto fd = central_diff(*t, [&]() {
        return ws_ref(refd::dense(refd::from_tensor(x), refd::from_tensor(w),
                                  refd::from_tensor(b)),
                      wts);
      });
      chk.compare(*t, fd);
    }
    finish(chk);
  }

  // convolutions, both strides
  for (int stride : {1, 2}) {
    {
      OpCheck chk{{"conv3x3/s" + std::to_string(stride)}, tol};
      Tensor x = random_tensor(rng, {2, 3, 6, 6}), k = random_tensor(rng, {4, 3, 3, 3});
      const int oh = (6 + 2 - 3) / stride + 1;
      const auto wts = random_weights(rng, 2LL * 4 * oh * oh);
      Tape tape;
      Tensor out = conv3x3(tape, x, k, stride);
      tape.backward(weighted_sum(tape, out, wts));
      for (Tensor* t : {&x, &k}) {
        auto fd = central_diff(*t, [&]() {
          return ws_ref(refd::conv3x3(refd::from_tensor(x), refd::from_tensor(k), stride), wts);
        });
        chk.compare(*t, fd);
      }
      finish(chk);
    }
    {
      OpCheck chk{{"conv1x1/s" + std::to_string(stride)}, tol};
      Tensor x = random_tensor(rng, {2, 4, 6, 6}), k = random_tensor(rng, {3, 4, 1, 1});
      const int oh = (6 - 1) / stride + 1;
      const auto wts = random_weights(rng, 2LL * 3 * oh * oh);
      Tape tape;
      Tensor out = conv1x1(tape, x, k, stride);
      tape.backward(weighted_sum(tape, out, wts));
      for (Tensor* t : {&x, &k}) {
        auto fd = central_diff(*t, [&]() {
          return ws_ref(refd::conv1x1(refd::from_tensor(x), refd::from_tensor(k), stride), wts);
        });
        chk.compare(*t, fd);
      }
      finish(chk);
    }
    {
      OpCheck chk{{"depthwise3x3/s" + std::to_string(stride)}, tol};
      Tensor x = random_tensor(rng, {2, 3, 6, 6}), k = random_tensor(rng, {3, 1, 3, 3});
      const int oh = (6 + 2 - 3) / stride + 1;
      const auto wts = random_weights(rng, 2LL * 3 * oh * oh);
      Tape tape;
      Tensor out = depthwise_conv3x3(tape, x, k, stride);
      tape.backward(weighted_sum(tape, out, wts));
      for (Tensor* t : {&x, &k}) {
        auto fd = central_diff(*t, [&]() {
          return ws_ref(refd::depthwise3x3(refd::from_tensor(x), refd::from_tensor(k), stride), wts);
        });
        chk.compare(*t, fd);
      }
      finish(chk);
    }
  }

  // bias / relu / add / gap / rotate / l2
  {
    OpCheck chk{{"bias_channels"}, tol};
    Tensor x = random_tensor(rng, {2, 3, 4, 4}), b = random_tensor(rng, {3});
    const auto wts = random_weights(rng, x.size());
    Tape tape;
    tape.backward(weighted_sum(tape, bias_channels(tape, x, b), wts));
    for (Tensor* t : {&x, &b}) {
      auto fd = central_diff(*t, [&]() {
        return ws_ref(refd::bias_channels(refd::from_tensor(x), refd::from_tensor(b)), wts);
      });
      chk.compare(*t, fd);
    }
    finish(chk);
  }
  {
    OpCheck chk{{"relu"}, tol};
    Tensor x = random_tensor_signed(rng, {2, 3, 4, 4});
    const auto wts = random_weights(rng, x.size());
    Tape tape;
    tape.backward(weighted_sum(tape, relu(tape, x), wts));
    auto fd = central_diff(x, [&]() { return ws_ref(refd::relu(refd::from_tensor(x)), wts); });
    chk.compare(x, fd);
    finish(chk);
  }
  {
    OpCheck chk{{"add"}, tol};
    Tensor a = random_tensor(rng, {3, 7}), b = random_tensor(rng, {3, 7});
    const auto wts = random_weights(rng, a.size());
    Tape tape;
    tape.backward(weighted_sum(tape, add(tape, a, b), wts));
    for (Tensor* t : {&a, &b}) {
      auto fd = central_diff(*t, [&]() {
        return ws_ref(refd::add(refd::from_tensor(a), refd::from_tensor(b)), wts);
      });
      chk.compare(*t, fd);
    }
    finish(chk);
  }
  {
    OpCheck chk{{"global_avg_pool"}, tol};
    Tensor x = random_tensor(rng, {2, 3, 4, 4});
    const auto wts = random_weights(rng, 6);
    Tape tape;
    tape.backward(weighted_sum(tape, global_avg_pool(tape, x), wts));
    auto fd = central_diff(x, [&]() { return ws_ref(refd::gap(refd::from_tensor(x)), wts); });
    chk.compare(x, fd);
    finish(chk);
  }
  for (int turns = 0; turns < 4; ++turns) {
    OpCheck chk{{"rotate90/" + std::to_string(turns * 90)}, tol};
    Tensor x = random_tensor(rng, {2, 2, 5, 5});
    const auto wts = random_weights(rng, x.size());
    Tape tape;
    tape.backward(weighted_sum(tape, rotate90(tape, x, rotation_from_index(turns)), wts));
    auto fd = central_diff(x, [&]() { return ws_ref(refd::rotate90(refd::from_tensor(x), turns), wts); });
    chk.compare(x, fd);
    finish(chk);
  }
  {
    OpCheck chk{{"l2_normalize"}, tol};
    Tensor x = random_tensor(rng, {3, 8});
    const auto wts = random_weights(rng, x.size());
    Tape tape;
    tape.backward(weighted_sum(tape, l2_normalize(tape, x), wts));
    auto fd = central_diff(x, [&]() { return ws_ref(refd::l2_normalize(refd::from_tensor(x)), wts); });
    chk.compare(x, fd);
    finish(chk);
  }

  // normalization layers, train phase
  for (NormKind kind : {NormKind::Batch, NormKind::Layer, NormKind::Instance}) {
    OpCheck chk{{std::string("norm/") + norm_kind_name(kind)}, tol};
    Tensor x = random_tensor(rng, {3, 4, 4, 4});
    Tensor gamma = random_tensor(rng, {4}, 0.5, 1.5);
    Tensor beta = random_tensor(rng, {4}, -0.5, 0.5);
    const auto wts = random_weights(rng, x.size());
    std::vector<float> rm, rv;
    Tape tape;
    NormContext ctx{&tape, Phase::Train, NormEvalMode::BatchAtTest, nullptr};
    Tensor out = norm_forward(ctx, kind, x, gamma, beta, rm, rv, "chk");
    tape.backward(weighted_sum(tape, out, wts));
    auto ref = [&]() {
      const refd::DT xd = refd::from_tensor(x);
      const refd::DT g = refd::from_tensor(gamma);
      const refd::DT b = refd::from_tensor(beta);
      switch (kind) {
        case NormKind::Batch: return ws_ref(refd::batchnorm_train(xd, g, b, 1e-5), wts);
        case NormKind::Layer: return ws_ref(refd::layernorm(xd, g, b, 1e-5), wts);
        default: return ws_ref(refd::instancenorm(xd, g, b, 1e-5), wts);
      }
    };
    for (Tensor* t : {&x, &gamma, &beta}) {
      auto fd = central_diff(*t, ref);
      chk.compare(*t, fd);
    }
    finish(chk);
  }

  // losses
  {
    OpCheck chk{{"softmax_cross_entropy"}, tol};
    Tensor logits = random_tensor(rng, {5, 4});
    std::vector<int> labels{0, 3, 1, 2, 2};
    Tape tape;
    Tensor loss = softmax_cross_entropy(tape, logits, labels);
    tape.backward(loss);
    auto fd = central_diff(logits, [&]() {
      return refd::cross_entropy(refd::from_tensor(logits), labels, nullptr);
    });
    chk.compare(logits, fd);
    finish(chk);
  }
  {
    OpCheck chk{{"softmax_cross_entropy_weighted"}, tol};
    Tensor logits = random_tensor(rng, {5, 4});
    std::vector<int> labels{0, 3, 1, 2, 2};
    std::vector<float> w{1, 0, 1, 1, 0};
    Tape tape;
    Tensor loss = softmax_cross_entropy_weighted(tape, logits, labels, w);
    tape.backward(loss);
    auto fd = central_diff(logits, [&]() {
      return refd::cross_entropy(refd::from_tensor(logits), labels, &w);
    });
    chk.compare(logits, fd);
    finish(chk);
  }
  {
    OpCheck chk{{"unit_length_loss"}, tol};
    Tensor x = random_tensor(rng, {4, 6});
    Tape tape;
    tape.backward(unit_length_loss(tape, x));
    auto fd = central_diff(x, [&]() { return refd::unit_length(refd::from_tensor(x)); });
    chk.compare(x, fd);
    finish(chk);
  }

  // full composites, one per family
  for (ArchFamily family :
       {ArchFamily::MiniResNet, ArchFamily::WideMiniResNet, ArchFamily::MiniMobile}) {
    OpCheck chk{{std::string("composite/") + arch_family_name(family)}, tol};
    ArchDescriptor arch;
    arch.family = family;
    arch.stage_channels = {4, 6, 8};
    arch.blocks_per_stage = 1;
    arch.split = {2, 1};
    arch.image_size = 8;
    arch.head_classes = 3;
    ComponentPtr extr = build_component(arch, ComponentKind::Extractor,
                                        seed + 11, "gc_extr");
    ComponentPtr head = build_component(arch, ComponentKind::TaskHead,
                                        seed + 12, "gc_head");
    extr->set_trainable(true);
    head->set_trainable(true);
    CompositeNetwork net = recombine(extr, head);

    Tensor x = random_tensor(rng, {3, 3, 8, 8}, 0.0, 1.0);
    std::vector<int> labels{0, 2, 1};

    Tape tape;
    ForwardCtx ctx{&tape, Phase::Train, NormEvalMode::BatchAtTest, nullptr};
    Tensor logits = composite_forward(net, ctx, x);
    Tensor loss = softmax_cross_entropy(tape, logits, labels);
    tape.backward(loss);

    const refd::DT images = refd::from_tensor(x);
    for (const ComponentPtr& comp : {extr, head}) {
      for (auto& [name, t] : comp->params.items()) {
        const float* g = t.grad();
        for (int64_t i = 0; i < t.size(); ++i) {
          // Central differences are only a valid derivative estimate when no
          // ReLU input changes sign inside the probe interval; shrink the
          // step for exactly those coordinates.
          double fd = 0.0;
          bool valid = false;
          double eps_try = kEps;
          for (int attempt = 0; attempt < 3; ++attempt, eps_try *= 0.1) {
            uint64_t h_up = 0, h_dn = 0;
            const double up = refd::composite_loss(net, images, labels,
                                                   comp.get(), name, i,
                                                   eps_try, &h_up);
            const double dn = refd::composite_loss(net, images, labels,
                                                   comp.get(), name, i,
                                                   -eps_try, &h_dn);
            if (h_up == h_dn) {
              fd = (up - dn) / (2 * eps_try);
              valid = true;
              if (attempt > 0) ++chk.result.kink_refined;
              break;
            }
          }
          if (!valid) {
            ++chk.result.skipped;
            continue;
          }
          const double a = g ? g[i] : 0.0;
          // A coordinate whose gradient both routes place below f32
          // backward resolution counts as zero; relative agreement is
          // meaningless there.
          if (std::fabs(a) < 1e-4 && std::fabs(fd) < 1e-4 &&
              std::fabs(a - fd) < 1e-5) {
            ++chk.result.near_zero;
            ++chk.result.coords;
            continue;
          }
          const double e = rel_err(a, fd);
          chk.result.max_rel_err = std::max(chk.result.max_rel_err, e);
          ++chk.result.coords;
        }
      }
    }
    finish(chk);
  }

  return results;
}

}  // namespace compat
