#include "compat/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "compat/error.hpp"

namespace compat {

namespace {

int conv_out_dim(int in, int pad, int k, int stride) {
  return (in + 2 * pad - k) / stride + 1;
}

void check_4d(const Tensor& x, const char* op) {
  if (x.ndim() != 4)
    throw ConfigError(std::string(op) + ": expected a 4-d input, got " +
                      shape_str(x.shape()));
}

bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts)
    if (t->requires_grad()) return true;
  return false;
}

// The convolution kernels below work in pixel-major scratch layouts:
// inputs transpose to xT[h*W+w][c] and kernels to kt[tap][c][f], so the
// inner loops stream contiguously and SIMD spans independent outputs.
// Per output element the reduction order is the canonical nested loop
// (kh, kw, c), which keeps results bit-identical to a direct 6-loop
// convolution with that inner order.

inline void to_pixel_major(const float* __restrict x, int C, int HW,
                           float* __restrict xT) {
  for (int c = 0; c < C; ++c)
    for (int j = 0; j < HW; ++j) xT[j * C + c] = x[c * HW + j];
}

inline void add_from_pixel_major(const float* __restrict xT, int C, int HW,
                                 float* __restrict x) {
  for (int c = 0; c < C; ++c)
    for (int j = 0; j < HW; ++j) x[c * HW + j] += xT[j * C + c];
}

}  // namespace

Tensor dense(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.ndim() != 2 || w.ndim() != 2 || b.ndim() != 1)
    throw ConfigError("dense: expected x[B,I] w[I,O] b[O], got " +
                      shape_str(x.shape()) + " " + shape_str(w.shape()) + " " +
                      shape_str(b.shape()));
  const int B = x.dim(0), I = x.dim(1), O = w.dim(1);
  if (w.dim(0) != I || b.dim(0) != O)
    throw ConfigError("dense: shape mismatch, x" + shape_str(x.shape()) +
                      " w" + shape_str(w.shape()) + " b" + shape_str(b.shape()));

  Tensor out({B, O}, tape.grad_enabled() && any_requires_grad({&x, &w, &b}));
  const float* xp = x.data();
  const float* wp = w.data();
  const float* bp = b.data();
  float* op = out.data();
  for (int i = 0; i < B; ++i) {
    float* __restrict orow = op + i * O;
    std::memcpy(orow, bp, sizeof(float) * static_cast<size_t>(O));
    const float* xrow = xp + i * I;
    for (int j = 0; j < I; ++j) {
      const float xv = xrow[j];
      const float* __restrict wrow = wp + j * O;
      for (int o = 0; o < O; ++o) orow[o] += xv * wrow[o];
    }
  }

  if (out.requires_grad()) {
    Tensor xc = x, wc = w, bc = b, oc = out;
    tape.record([xc, wc, bc, oc, B, I, O]() mutable {
      const float* dy = oc.grad();
      if (!dy) return;
      if (xc.requires_grad()) {
        float* dx = xc.grad();
        const float* wp2 = wc.data();
        for (int i = 0; i < B; ++i) {
          const float* dyrow = dy + i * O;
          float* dxrow = dx + i * I;
          for (int j = 0; j < I; ++j) {
            const float* __restrict wrow = wp2 + j * O;
            float acc = 0.0f;
            for (int o = 0; o < O; ++o) acc += dyrow[o] * wrow[o];
            dxrow[j] += acc;
          }
        }
      }
      if (wc.requires_grad()) {
        float* dw = wc.grad();
        const float* xp2 = xc.data();
        for (int i = 0; i < B; ++i) {
          const float* dyrow = dy + i * O;
          const float* xrow = xp2 + i * I;
          for (int j = 0; j < I; ++j) {
            const float xv = xrow[j];
            float* __restrict dwrow = dw + j * O;
            for (int o = 0; o < O; ++o) dwrow[o] += xv * dyrow[o];
          }
        }
      }
      if (bc.requires_grad()) {
        float* db = bc.grad();
        for (int i = 0; i < B; ++i) {
          const float* dyrow = dy + i * O;
          for (int o = 0; o < O; ++o) db[o] += dyrow[o];
        }
      }
    });
  }
  return out;
}

namespace {

// Per-image conv3x3 inner loops with the output width known at compile time,
// so the f-loops vectorize without runtime prologues. FT==0 falls back to a
// runtime width.
template <int FT>
void conv3x3_image(const float* __restrict xT, const float* __restrict kt,
                   float* __restrict ob, float* __restrict acc, int rtF, int C,
                   int H, int W, int OH, int OW, int stride) {
  const int F = FT > 0 ? FT : rtF;
  const int OHW = OH * OW;

  auto do_pixel = [&](int oh, int ow) {
    float* __restrict a = acc;
    for (int f = 0; f < F; ++f) a[f] = 0.0f;
    for (int kh = 0; kh < 3; ++kh) {
      const int ih = oh * stride + kh - 1;
      if (ih < 0 || ih >= H) continue;
      for (int kw = 0; kw < 3; ++kw) {
        const int iw = ow * stride + kw - 1;
        if (iw < 0 || iw >= W) continue;
        const float* __restrict xr = xT + (static_cast<size_t>(ih) * W + iw) * C;
        const float* __restrict kr = kt + (static_cast<size_t>(kh * 3 + kw)) * C * F;
        for (int c = 0; c < C; ++c) {
          const float xv = xr[c];
          const float* __restrict kv = kr + static_cast<size_t>(c) * F;
          for (int f = 0; f < F; ++f) a[f] += xv * kv[f];
        }
      }
    }
    float* obase = ob + oh * OW + ow;
    for (int f = 0; f < F; ++f) obase[static_cast<int64_t>(f) * OHW] = a[f];
  };

  int ow_lo = 0, ow_hi = OW;
  while (ow_lo < OW && (ow_lo * stride - 1 < 0)) ++ow_lo;
  while (ow_hi > ow_lo && ((ow_hi - 1) * stride + 1 >= W)) --ow_hi;

  for (int oh = 0; oh < OH; ++oh) {
    for (int ow = 0; ow < ow_lo; ++ow) do_pixel(oh, ow);
    int ow = ow_lo;
    for (; ow + 4 <= ow_hi; ow += 4) {
      float* __restrict a = acc;
      for (int f = 0; f < 4 * F; ++f) a[f] = 0.0f;
      for (int kh = 0; kh < 3; ++kh) {
        const int ih = oh * stride + kh - 1;
        if (ih < 0 || ih >= H) continue;
        for (int kw = 0; kw < 3; ++kw) {
          const int iw = ow * stride + kw - 1;
          const float* __restrict xr = xT + (static_cast<size_t>(ih) * W + iw) * C;
          const float* __restrict kr = kt + (static_cast<size_t>(kh * 3 + kw)) * C * F;
          const int step = stride * C;
          for (int c = 0; c < C; ++c) {
            const float xv0 = xr[c];
            const float xv1 = xr[c + step];
            const float xv2 = xr[c + 2 * step];
            const float xv3 = xr[c + 3 * step];
            const float* __restrict kv = kr + static_cast<size_t>(c) * F;
            float* __restrict a0 = a;
            float* __restrict a1 = a + F;
            float* __restrict a2 = a + 2 * F;
            float* __restrict a3 = a + 3 * F;
            for (int f = 0; f < F; ++f) {
              a0[f] += xv0 * kv[f];
              a1[f] += xv1 * kv[f];
              a2[f] += xv2 * kv[f];
              a3[f] += xv3 * kv[f];
            }
          }
        }
      }
      float* obase = ob + oh * OW + ow;
      for (int f = 0; f < F; ++f) {
        float* orow = obase + static_cast<int64_t>(f) * OHW;
        orow[0] = a[f];
        orow[1] = a[F + f];
        orow[2] = a[2 * F + f];
        orow[3] = a[3 * F + f];
      }
    }
    for (; ow < OW; ++ow) do_pixel(oh, ow);
  }
}

void conv3x3_image_dispatch(const float* xT, const float* kt, float* ob,
                            float* acc, int F, int C, int H, int W, int OH,
                            int OW, int stride) {
  switch (F) {
    case 8: conv3x3_image<8>(xT, kt, ob, acc, F, C, H, W, OH, OW, stride); break;
    case 12: conv3x3_image<12>(xT, kt, ob, acc, F, C, H, W, OH, OW, stride); break;
    case 16: conv3x3_image<16>(xT, kt, ob, acc, F, C, H, W, OH, OW, stride); break;
    case 24: conv3x3_image<24>(xT, kt, ob, acc, F, C, H, W, OH, OW, stride); break;
    case 32: conv3x3_image<32>(xT, kt, ob, acc, F, C, H, W, OH, OW, stride); break;
    case 48: conv3x3_image<48>(xT, kt, ob, acc, F, C, H, W, OH, OW, stride); break;
    case 64: conv3x3_image<64>(xT, kt, ob, acc, F, C, H, W, OH, OW, stride); break;
    case 128: conv3x3_image<128>(xT, kt, ob, acc, F, C, H, W, OH, OW, stride); break;
    default: conv3x3_image<0>(xT, kt, ob, acc, F, C, H, W, OH, OW, stride); break;
  }
}

}  // namespace

Tensor conv3x3(Tape& tape, const Tensor& x, const Tensor& k, int stride) {
  check_4d(x, "conv3x3");
  if (k.ndim() != 4 || k.dim(2) != 3 || k.dim(3) != 3)
    throw ConfigError("conv3x3: kernel must be [F,C,3,3], got " +
                      shape_str(k.shape()));
  if (stride != 1 && stride != 2)
    throw ConfigError("conv3x3: stride must be 1 or 2");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int F = k.dim(0);
  if (k.dim(1) != C)
    throw ConfigError("conv3x3: input has " + std::to_string(C) +
                      " channels, kernel expects " + std::to_string(k.dim(1)));
  const int OH = conv_out_dim(H, 1, 3, stride);
  const int OW = conv_out_dim(W, 1, 3, stride);

  Tensor out({B, F, OH, OW}, tape.grad_enabled() && any_requires_grad({&x, &k}));
  const float* xp = x.data();
  const float* kp = k.data();
  float* op = out.data();
  const int HW = H * W, OHW = OH * OW;
  std::vector<float> xT(static_cast<size_t>(HW) * C);
  std::vector<float> kt(static_cast<size_t>(9) * C * F);  // [tap][c][f]
  for (int f = 0; f < F; ++f)
    for (int c = 0; c < C; ++c)
      for (int t = 0; t < 9; ++t)
        kt[(static_cast<size_t>(t) * C + c) * F + f] =
            kp[(static_cast<size_t>(f) * C + c) * 9 + t];
  std::vector<float> acc(static_cast<size_t>(4) * F);
  for (int b = 0; b < B; ++b) {
    to_pixel_major(xp + static_cast<int64_t>(b) * C * HW, C, HW, xT.data());
    conv3x3_image_dispatch(xT.data(), kt.data(),
                           op + static_cast<int64_t>(b) * F * OHW, acc.data(),
                           F, C, H, W, OH, OW, stride);
  }

  if (out.requires_grad()) {
    Tensor xc = x, kc = k, oc = out;
    tape.record([xc, kc, oc, stride, B, C, H, W, F, OH, OW]() mutable {
      const float* dy = oc.grad();
      if (!dy) return;
      const int HW = H * W, OHW = OH * OW;
      const bool need_dx = xc.requires_grad();
      const bool need_dk = kc.requires_grad();
      std::vector<float> ktb;  // [tap][f][c]
      if (need_dx) {
        const float* kp2 = kc.data();
        ktb.assign(static_cast<size_t>(9) * F * C, 0.0f);
        for (int f = 0; f < F; ++f)
          for (int c = 0; c < C; ++c)
            for (int t = 0; t < 9; ++t)
              ktb[(static_cast<size_t>(t) * F + f) * C + c] =
                  kp2[(static_cast<size_t>(f) * C + c) * 9 + t];
      }
      std::vector<float> dxT(need_dx ? static_cast<size_t>(HW) * C : 0);
      std::vector<double> dkT(need_dk ? static_cast<size_t>(9) * F * C : 0, 0.0);
      std::vector<float> xT(need_dk ? static_cast<size_t>(HW) * C : 0);
      for (int b = 0; b < B; ++b) {
        if (need_dx) std::fill(dxT.begin(), dxT.end(), 0.0f);
        if (need_dk)
          to_pixel_major(xc.data() + static_cast<int64_t>(b) * C * HW, C, HW,
                         xT.data());
        const float* dyb = dy + static_cast<int64_t>(b) * F * OHW;
        for (int oh = 0; oh < OH; ++oh) {
          for (int ow = 0; ow < OW; ++ow) {
            for (int kh = 0; kh < 3; ++kh) {
              const int ih = oh * stride + kh - 1;
              if (ih < 0 || ih >= H) continue;
              for (int kw = 0; kw < 3; ++kw) {
                const int iw = ow * stride + kw - 1;
                if (iw < 0 || iw >= W) continue;
                const size_t pix = static_cast<size_t>(ih) * W + iw;
                const int tap = kh * 3 + kw;
                if (need_dx) {
                  float* __restrict dxp = dxT.data() + pix * C;
                  const float* __restrict kr =
                      ktb.data() + static_cast<size_t>(tap) * F * C;
                  for (int f = 0; f < F; ++f) {
                    const float dv = dyb[static_cast<int64_t>(f) * OHW + oh * OW + ow];
                    const float* __restrict kvr = kr + static_cast<size_t>(f) * C;
                    for (int c = 0; c < C; ++c) dxp[c] += dv * kvr[c];
                  }
                }
                if (need_dk) {
                  const float* __restrict xr = xT.data() + pix * C;
                  double* __restrict dkp =
                      dkT.data() + static_cast<size_t>(tap) * F * C;
                  for (int f = 0; f < F; ++f) {
                    const double dv = dyb[static_cast<int64_t>(f) * OHW + oh * OW + ow];
                    double* __restrict row = dkp + static_cast<size_t>(f) * C;
                    for (int c = 0; c < C; ++c) row[c] += dv * xr[c];
                  }
                }
              }
            }
          }
        }
        if (need_dx)
          add_from_pixel_major(dxT.data(), C, HW,
                               xc.grad() + static_cast<int64_t>(b) * C * HW);
      }
      if (need_dk) {
        float* dk = kc.grad();
        for (int f = 0; f < F; ++f)
          for (int c = 0; c < C; ++c)
            for (int t = 0; t < 9; ++t)
              dk[(static_cast<size_t>(f) * C + c) * 9 + t] += static_cast<float>(
                  dkT[(static_cast<size_t>(t) * F + f) * C + c]);
      }
    });
  }
  return out;
}

Tensor conv1x1(Tape& tape, const Tensor& x, const Tensor& k, int stride) {
  check_4d(x, "conv1x1");
  if (k.ndim() != 4 || k.dim(2) != 1 || k.dim(3) != 1)
    throw ConfigError("conv1x1: kernel must be [F,C,1,1], got " +
                      shape_str(k.shape()));
  if (stride != 1 && stride != 2)
    throw ConfigError("conv1x1: stride must be 1 or 2");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int F = k.dim(0);
  if (k.dim(1) != C)
    throw ConfigError("conv1x1: input has " + std::to_string(C) +
                      " channels, kernel expects " + std::to_string(k.dim(1)));
  const int OH = (H - 1) / stride + 1;
  const int OW = (W - 1) / stride + 1;

  Tensor out({B, F, OH, OW}, tape.grad_enabled() && any_requires_grad({&x, &k}));
  const float* xp = x.data();
  const float* kp = k.data();
  float* op = out.data();
  const int HW = H * W, OHW = OH * OW;
  std::vector<float> xT(static_cast<size_t>(HW) * C);
  std::vector<float> kt(static_cast<size_t>(C) * F);  // [c][f]
  for (int f = 0; f < F; ++f)
    for (int c = 0; c < C; ++c)
      kt[static_cast<size_t>(c) * F + f] = kp[static_cast<size_t>(f) * C + c];
  std::vector<float> acc(static_cast<size_t>(F));
  for (int b = 0; b < B; ++b) {
    to_pixel_major(xp + static_cast<int64_t>(b) * C * HW, C, HW, xT.data());
    for (int oh = 0; oh < OH; ++oh) {
      for (int ow = 0; ow < OW; ++ow) {
        float* __restrict a = acc.data();
        for (int f = 0; f < F; ++f) a[f] = 0.0f;
        const float* __restrict xr =
            xT.data() + (static_cast<size_t>(oh * stride) * W + ow * stride) * C;
        for (int c = 0; c < C; ++c) {
          const float xv = xr[c];
          const float* __restrict kv = kt.data() + static_cast<size_t>(c) * F;
          for (int f = 0; f < F; ++f) a[f] += xv * kv[f];
        }
        float* obase = op + static_cast<int64_t>(b) * F * OHW + oh * OW + ow;
        for (int f = 0; f < F; ++f) obase[static_cast<int64_t>(f) * OHW] = a[f];
      }
    }
  }

  if (out.requires_grad()) {
    Tensor xc = x, kc = k, oc = out;
    tape.record([xc, kc, oc, stride, B, C, H, W, F, OH, OW]() mutable {
      const float* dy = oc.grad();
      if (!dy) return;
      const int HW = H * W, OHW = OH * OW;
      const bool need_dx = xc.requires_grad();
      const bool need_dk = kc.requires_grad();
      std::vector<float> ktb;  // [f][c], the original layout, contiguous in c
      std::vector<float> dxT(need_dx ? static_cast<size_t>(HW) * C : 0);
      std::vector<double> dkT(need_dk ? static_cast<size_t>(F) * C : 0, 0.0);
      std::vector<float> xT(need_dk ? static_cast<size_t>(HW) * C : 0);
      const float* kp2 = kc.data();
      for (int b = 0; b < B; ++b) {
        if (need_dx) std::fill(dxT.begin(), dxT.end(), 0.0f);
        if (need_dk)
          to_pixel_major(xc.data() + static_cast<int64_t>(b) * C * HW, C, HW,
                         xT.data());
        const float* dyb = dy + static_cast<int64_t>(b) * F * OHW;
        for (int oh = 0; oh < OH; ++oh) {
          for (int ow = 0; ow < OW; ++ow) {
            const size_t pix =
                static_cast<size_t>(oh * stride) * W + ow * stride;
            if (need_dx) {
              float* __restrict dxp = dxT.data() + pix * C;
              for (int f = 0; f < F; ++f) {
                const float dv = dyb[static_cast<int64_t>(f) * OHW + oh * OW + ow];
                const float* __restrict kvr = kp2 + static_cast<size_t>(f) * C;
                for (int c = 0; c < C; ++c) dxp[c] += dv * kvr[c];
              }
            }
            if (need_dk) {
              const float* __restrict xr = xT.data() + pix * C;
              for (int f = 0; f < F; ++f) {
                const double dv = dyb[static_cast<int64_t>(f) * OHW + oh * OW + ow];
                double* __restrict row = dkT.data() + static_cast<size_t>(f) * C;
                for (int c = 0; c < C; ++c) row[c] += dv * xr[c];
              }
            }
          }
        }
        if (need_dx)
          add_from_pixel_major(dxT.data(), C, HW,
                               xc.grad() + static_cast<int64_t>(b) * C * HW);
      }
      if (need_dk) {
        float* dk = kc.grad();
        for (size_t i = 0; i < dkT.size(); ++i)
          dk[i] += static_cast<float>(dkT[i]);
      }
    });
  }
  return out;
}

Tensor depthwise_conv3x3(Tape& tape, const Tensor& x, const Tensor& k,
                         int stride) {
  check_4d(x, "depthwise_conv3x3");
  if (k.ndim() != 4 || k.dim(1) != 1 || k.dim(2) != 3 || k.dim(3) != 3)
    throw ConfigError("depthwise_conv3x3: kernel must be [C,1,3,3], got " +
                      shape_str(k.shape()));
  if (stride != 1 && stride != 2)
    throw ConfigError("depthwise_conv3x3: stride must be 1 or 2");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (k.dim(0) != C)
    throw ConfigError("depthwise_conv3x3: input has " + std::to_string(C) +
                      " channels, kernel expects " + std::to_string(k.dim(0)));
  const int OH = conv_out_dim(H, 1, 3, stride);
  const int OW = conv_out_dim(W, 1, 3, stride);

  Tensor out({B, C, OH, OW}, tape.grad_enabled() && any_requires_grad({&x, &k}));
  const float* xp = x.data();
  const float* kp = k.data();
  float* op = out.data();
  const int HW = H * W, OHW = OH * OW;
  std::vector<float> xT(static_cast<size_t>(HW) * C);
  std::vector<float> kt(static_cast<size_t>(9) * C);  // [tap][c]
  for (int c = 0; c < C; ++c)
    for (int t = 0; t < 9; ++t)
      kt[static_cast<size_t>(t) * C + c] = kp[static_cast<size_t>(c) * 9 + t];
  std::vector<float> acc(static_cast<size_t>(C));
  for (int b = 0; b < B; ++b) {
    to_pixel_major(xp + static_cast<int64_t>(b) * C * HW, C, HW, xT.data());
    for (int oh = 0; oh < OH; ++oh) {
      for (int ow = 0; ow < OW; ++ow) {
        float* __restrict a = acc.data();
        for (int c = 0; c < C; ++c) a[c] = 0.0f;
        for (int kh = 0; kh < 3; ++kh) {
          const int ih = oh * stride + kh - 1;
          if (ih < 0 || ih >= H) continue;
          for (int kw = 0; kw < 3; ++kw) {
            const int iw = ow * stride + kw - 1;
            if (iw < 0 || iw >= W) continue;
            const float* __restrict xr =
                xT.data() + (static_cast<size_t>(ih) * W + iw) * C;
            const float* __restrict kv =
                kt.data() + static_cast<size_t>(kh * 3 + kw) * C;
            for (int c = 0; c < C; ++c) a[c] += xr[c] * kv[c];
          }
        }
        float* obase = op + static_cast<int64_t>(b) * C * OHW + oh * OW + ow;
        for (int c = 0; c < C; ++c) obase[static_cast<int64_t>(c) * OHW] = a[c];
      }
    }
  }

  if (out.requires_grad()) {
    Tensor xc = x, kc = k, oc = out;
    tape.record([xc, kc, oc, stride, B, C, H, W, OH, OW]() mutable {
      const float* dy = oc.grad();
      if (!dy) return;
      const int HW = H * W, OHW = OH * OW;
      const bool need_dx = xc.requires_grad();
      const bool need_dk = kc.requires_grad();
      std::vector<float> kt(static_cast<size_t>(9) * C);  // [tap][c]
      const float* kp2 = kc.data();
      for (int c = 0; c < C; ++c)
        for (int t = 0; t < 9; ++t)
          kt[static_cast<size_t>(t) * C + c] = kp2[static_cast<size_t>(c) * 9 + t];
      std::vector<float> dyT(static_cast<size_t>(OHW) * C);
      std::vector<float> dxT(need_dx ? static_cast<size_t>(HW) * C : 0);
      std::vector<double> dkT(need_dk ? static_cast<size_t>(9) * C : 0, 0.0);
      std::vector<float> xT(need_dk ? static_cast<size_t>(HW) * C : 0);
      for (int b = 0; b < B; ++b) {
        to_pixel_major(dy + static_cast<int64_t>(b) * C * OHW, C, OHW, dyT.data());
        if (need_dx) std::fill(dxT.begin(), dxT.end(), 0.0f);
        if (need_dk)
          to_pixel_major(xc.data() + static_cast<int64_t>(b) * C * HW, C, HW,
                         xT.data());
        for (int oh = 0; oh < OH; ++oh) {
          for (int ow = 0; ow < OW; ++ow) {
            const float* __restrict dyr =
                dyT.data() + (static_cast<size_t>(oh) * OW + ow) * C;
            for (int kh = 0; kh < 3; ++kh) {
              const int ih = oh * stride + kh - 1;
              if (ih < 0 || ih >= H) continue;
              for (int kw = 0; kw < 3; ++kw) {
                const int iw = ow * stride + kw - 1;
                if (iw < 0 || iw >= W) continue;
                const size_t pix = static_cast<size_t>(ih) * W + iw;
                const int tap = kh * 3 + kw;
                if (need_dx) {
                  float* __restrict dxp = dxT.data() + pix * C;
                  const float* __restrict kv =
                      kt.data() + static_cast<size_t>(tap) * C;
                  for (int c = 0; c < C; ++c) dxp[c] += dyr[c] * kv[c];
                }
                if (need_dk) {
                  const float* __restrict xr = xT.data() + pix * C;
                  double* __restrict row =
                      dkT.data() + static_cast<size_t>(tap) * C;
                  for (int c = 0; c < C; ++c)
                    row[c] += static_cast<double>(dyr[c]) * xr[c];
                }
              }
            }
          }
        }
        if (need_dx)
          add_from_pixel_major(dxT.data(), C, HW,
                               xc.grad() + static_cast<int64_t>(b) * C * HW);
      }
      if (need_dk) {
        float* dk = kc.grad();
        for (int c = 0; c < C; ++c)
          for (int t = 0; t < 9; ++t)
            dk[static_cast<size_t>(c) * 9 + t] +=
                static_cast<float>(dkT[static_cast<size_t>(t) * C + c]);
      }
    });
  }
  return out;
}

Tensor bias_channels(Tape& tape, const Tensor& x, const Tensor& b) {
  check_4d(x, "bias_channels");
  const int B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (b.ndim() != 1 || b.dim(0) != C)
    throw ConfigError("bias_channels: bias must be [C], got " +
                      shape_str(b.shape()));
  Tensor out(x.shape(), tape.grad_enabled() && any_requires_grad({&x, &b}));
  const float* xp = x.data();
  const float* bp = b.data();
  float* op = out.data();
  for (int i = 0; i < B; ++i)
    for (int c = 0; c < C; ++c) {
      const float bv = bp[c];
      const float* xr = xp + (static_cast<int64_t>(i) * C + c) * HW;
      float* orow = op + (static_cast<int64_t>(i) * C + c) * HW;
      for (int j = 0; j < HW; ++j) orow[j] = xr[j] + bv;
    }

  if (out.requires_grad()) {
    Tensor xc = x, bc = b, oc = out;
    tape.record([xc, bc, oc, B, C, HW]() mutable {
      const float* dy = oc.grad();
      if (!dy) return;
      if (xc.requires_grad()) {
        float* dx = xc.grad();
        const int64_t n = xc.size();
        for (int64_t i = 0; i < n; ++i) dx[i] += dy[i];
      }
      if (bc.requires_grad()) {
        float* db = bc.grad();
        for (int c = 0; c < C; ++c) {
          double acc = 0.0;
          for (int i = 0; i < B; ++i) {
            const float* dr = dy + (static_cast<int64_t>(i) * C + c) * HW;
            for (int j = 0; j < HW; ++j) acc += dr[j];
          }
          db[c] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

Tensor relu(Tape& tape, const Tensor& x) {
  Tensor out(x.shape(), tape.grad_enabled() && x.requires_grad());
  const float* xp = x.data();
  float* op = out.data();
  const int64_t n = x.size();
  for (int64_t i = 0; i < n; ++i) op[i] = xp[i] > 0.0f ? xp[i] : 0.0f;

  if (out.requires_grad()) {
    Tensor xc = x, oc = out;
    tape.record([xc, oc]() mutable {
      const float* dy = oc.grad();
      if (!dy) return;
      float* dx = xc.grad();
      const float* xp2 = xc.data();
      const int64_t m = xc.size();
      for (int64_t i = 0; i < m; ++i)
        if (xp2[i] > 0.0f) dx[i] += dy[i];
    });
  }
  return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ConfigError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  Tensor out(a.shape(), tape.grad_enabled() && any_requires_grad({&a, &b}));
  const float* ap = a.data();
  const float* bp = b.data();
  float* op = out.data();
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];

  if (out.requires_grad()) {
    Tensor ac = a, bc = b, oc = out;
    tape.record([ac, bc, oc]() mutable {
      const float* dy = oc.grad();
      if (!dy) return;
      const int64_t m = oc.size();
      if (ac.requires_grad()) {
        float* da = ac.grad();
        for (int64_t i = 0; i < m; ++i) da[i] += dy[i];
      }
      if (bc.requires_grad()) {
        float* db = bc.grad();
        for (int64_t i = 0; i < m; ++i) db[i] += dy[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& x, float c) {
  Tensor out(x.shape(), tape.grad_enabled() && x.requires_grad());
  const float* xp = x.data();
  float* op = out.data();
  const int64_t n = x.size();
  for (int64_t i = 0; i < n; ++i) op[i] = c * xp[i];

  if (out.requires_grad()) {
    Tensor xc = x, oc = out;
    tape.record([xc, oc, c]() mutable {
      const float* dy = oc.grad();
      if (!dy) return;
      float* dx = xc.grad();
      const int64_t m = xc.size();
      for (int64_t i = 0; i < m; ++i) dx[i] += c * dy[i];
    });
  }
  return out;
}

Tensor global_avg_pool(Tape& tape, const Tensor& x) {
  check_4d(x, "global_avg_pool");
  const int B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor out({B, C}, tape.grad_enabled() && x.requires_grad());
  const float* xp = x.data();
  float* op = out.data();
  for (int i = 0; i < B; ++i)
    for (int c = 0; c < C; ++c) {
      const float* xr = xp + (static_cast<int64_t>(i) * C + c) * HW;
      double acc = 0.0;
      for (int j = 0; j < HW; ++j) acc += xr[j];
      op[i * C + c] = static_cast<float>(acc / HW);
    }

  if (out.requires_grad()) {
    Tensor xc = x, oc = out;
    tape.record([xc, oc, B, C, HW]() mutable {
      const float* dy = oc.grad();
      if (!dy) return;
      float* dx = xc.grad();
      const float inv = 1.0f / static_cast<float>(HW);
      for (int i = 0; i < B; ++i)
        for (int c = 0; c < C; ++c) {
          const float g = dy[i * C + c] * inv;
          float* dr = dx + (static_cast<int64_t>(i) * C + c) * HW;
          for (int j = 0; j < HW; ++j) dr[j] += g;
        }
    });
  }
  return out;
}

namespace {

// out[i][j] = in[src(i,j)] for one CCW quarter-turn count.
inline void rotate_plane(float* __restrict dst, const float* __restrict src,
                         int H, int turns, bool accumulate) {
  const int W = H;
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      int si = 0, sj = 0;
      switch (turns) {
        case 0: si = i; sj = j; break;
        case 1: si = j; sj = H - 1 - i; break;
        case 2: si = H - 1 - i; sj = W - 1 - j; break;
        default: si = W - 1 - j; sj = i; break;
      }
      if (accumulate)
        dst[i * W + j] += src[si * W + sj];
      else
        dst[i * W + j] = src[si * W + sj];
    }
}

}  // namespace

Tensor rotate90(Tape& tape, const Tensor& x, Rotation s) {
  check_4d(x, "rotate90");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H != W)
    throw ConfigError("rotate90: requires square images, got " +
                      shape_str(x.shape()));
  const int turns = static_cast<int>(s);
  Tensor out(x.shape(), tape.grad_enabled() && x.requires_grad());
  const float* xp = x.data();
  float* op = out.data();
  for (int p = 0; p < B * C; ++p)
    rotate_plane(op + static_cast<int64_t>(p) * H * W,
                 xp + static_cast<int64_t>(p) * H * W, H, turns, false);

  if (out.requires_grad()) {
    Tensor xc = x, oc = out;
    const int inv = static_cast<int>(inverse_rotation(s));
    tape.record([xc, oc, B, C, H, inv]() mutable {
      const float* dy = oc.grad();
      if (!dy) return;
      float* dx = xc.grad();
      for (int p = 0; p < B * C; ++p)
        rotate_plane(dx + static_cast<int64_t>(p) * H * H,
                     dy + static_cast<int64_t>(p) * H * H, H, inv, true);
    });
  }
  return out;
}

Tensor concat_batch(Tape& tape, std::span<const Tensor> parts) {
  if (parts.empty()) throw UsageError("concat_batch: no inputs");
  Shape rest = parts[0].shape();
  int total = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    if (p.ndim() != parts[0].ndim())
      throw ConfigError("concat_batch: rank mismatch");
    for (int d = 1; d < p.ndim(); ++d)
      if (p.dim(d) != parts[0].dim(d))
        throw ConfigError("concat_batch: trailing dims mismatch " +
                          shape_str(p.shape()) + " vs " +
                          shape_str(parts[0].shape()));
    total += p.dim(0);
    rg = rg || p.requires_grad();
  }
  rest[0] = total;
  Tensor out(rest, tape.grad_enabled() && rg);
  float* op = out.data();
  int64_t off = 0;
  for (const Tensor& p : parts) {
    std::memcpy(op + off, p.data(), sizeof(float) * static_cast<size_t>(p.size()));
    off += p.size();
  }

  if (out.requires_grad()) {
    std::vector<Tensor> held(parts.begin(), parts.end());
    Tensor oc = out;
    tape.record([held, oc]() mutable {
      const float* dy = oc.grad();
      if (!dy) return;
      int64_t pos = 0;
      for (Tensor& p : held) {
        const int64_t n = p.size();
        if (p.requires_grad()) {
          float* dp = p.grad();
          for (int64_t i = 0; i < n; ++i) dp[i] += dy[pos + i];
        }
        pos += n;
      }
    });
  }
  return out;
}

Tensor l2_normalize(Tape& tape, const Tensor& x) {
  if (x.ndim() < 2) throw ConfigError("l2_normalize: needs a batch dim");
  const int B = x.dim(0);
  const int64_t D = x.size() / B;
  Tensor out(x.shape(), tape.grad_enabled() && x.requires_grad());
  std::vector<float> norms(static_cast<size_t>(B));
  const float* xp = x.data();
  float* op = out.data();
  for (int i = 0; i < B; ++i) {
    const float* xr = xp + i * D;
    double ss = 0.0;
    for (int64_t j = 0; j < D; ++j) ss += static_cast<double>(xr[j]) * xr[j];
    const float n = static_cast<float>(std::sqrt(ss + 1e-12));
    norms[static_cast<size_t>(i)] = n;
    float* orow = op + i * D;
    const float inv = 1.0f / n;
    for (int64_t j = 0; j < D; ++j) orow[j] = xr[j] * inv;
  }

  if (out.requires_grad()) {
    Tensor xc = x, oc = out;
    tape.record([xc, oc, norms, B, D]() mutable {
      const float* dy = oc.grad();
      if (!dy) return;
      float* dx = xc.grad();
      const float* xp2 = xc.data();
      for (int i = 0; i < B; ++i) {
        const float* xr = xp2 + i * D;
        const float* dyr = dy + i * D;
        float* dxr = dx + i * D;
        const float n = norms[static_cast<size_t>(i)];
        double dot = 0.0;
        for (int64_t j = 0; j < D; ++j)
          dot += static_cast<double>(dyr[j]) * xr[j];
        const float a = 1.0f / n;
        const float b = static_cast<float>(dot) / (n * n * n);
        for (int64_t j = 0; j < D; ++j) dxr[j] += a * dyr[j] - b * xr[j];
      }
    });
  }
  return out;
}

namespace {

Tensor cross_entropy_impl(Tape& tape, const Tensor& logits,
                          std::span<const int> labels,
                          std::span<const float> weights) {
  if (logits.ndim() != 2)
    throw ConfigError("softmax_cross_entropy: logits must be [B,K], got " +
                      shape_str(logits.shape()));
  const int B = logits.dim(0), K = logits.dim(1);
  if (static_cast<int>(labels.size()) != B)
    throw InputError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for batch " + std::to_string(B));
  for (int i = 0; i < B; ++i)
    if (labels[i] < 0 || labels[i] >= K)
      throw InputError("softmax_cross_entropy: label " +
                       std::to_string(labels[i]) + " outside [0," +
                       std::to_string(K) + ")");

  const float* lp = logits.data();
  double loss_acc = 0.0, wsum = 0.0;
  for (int i = 0; i < B; ++i) {
    const float w = weights.empty() ? 1.0f : weights[i];
    wsum += w;
    if (w == 0.0f) continue;
    const float* row = lp + i * K;
    float m = row[0];
    for (int k2 = 1; k2 < K; ++k2) m = std::max(m, row[k2]);
    double z = 0.0;
    for (int k2 = 0; k2 < K; ++k2) z += std::exp(static_cast<double>(row[k2] - m));
    const double nll = std::log(z) - static_cast<double>(row[labels[i]] - m);
    loss_acc += static_cast<double>(w) * nll;
  }
  const bool empty_mask = wsum <= 0.0;
  const float loss_val =
      empty_mask ? 0.0f : static_cast<float>(loss_acc / wsum);

  Tensor out = Tensor::scalar(loss_val);
  out.set_requires_grad(tape.grad_enabled() && logits.requires_grad());
  if (out.requires_grad() && !empty_mask) {
    Tensor lc = logits, oc = out;
    std::vector<int> lab(labels.begin(), labels.end());
    std::vector<float> wv(weights.begin(), weights.end());
    const double denom = wsum;
    tape.record([lc, oc, lab, wv, B, K, denom]() mutable {
      const float* dy = oc.grad();
      if (!dy) return;
      const float g = dy[0] / static_cast<float>(denom);
      float* dl = lc.grad();
      const float* lp2 = lc.data();
      for (int i = 0; i < B; ++i) {
        const float w = wv.empty() ? 1.0f : wv[static_cast<size_t>(i)];
        if (w == 0.0f) continue;
        const float* row = lp2 + i * K;
        float* drow = dl + i * K;
        float m = row[0];
        for (int k2 = 1; k2 < K; ++k2) m = std::max(m, row[k2]);
        double z = 0.0;
        for (int k2 = 0; k2 < K; ++k2)
          z += std::exp(static_cast<double>(row[k2] - m));
        const float gw = g * w;
        for (int k2 = 0; k2 < K; ++k2) {
          const float p =
              static_cast<float>(std::exp(static_cast<double>(row[k2] - m)) / z);
          drow[k2] += gw * (p - (k2 == lab[static_cast<size_t>(i)] ? 1.0f : 0.0f));
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits,
                             std::span<const int> labels) {
  return cross_entropy_impl(tape, logits, labels, {});
}

Tensor softmax_cross_entropy_weighted(Tape& tape, const Tensor& logits,
                                      std::span<const int> labels,
                                      std::span<const float> weights) {
  if (weights.size() != labels.size())
    throw InputError("softmax_cross_entropy_weighted: weight/label count mismatch");
  return cross_entropy_impl(tape, logits, labels, weights);
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.ndim() != 2)
    throw UsageError("argmax_rows: expected [B,K], got " +
                     shape_str(logits.shape()));
  const int B = logits.dim(0), K = logits.dim(1);
  std::vector<int> out(static_cast<size_t>(B));
  const float* lp = logits.data();
  for (int i = 0; i < B; ++i) {
    const float* row = lp + i * K;
    int best = 0;
    for (int k = 1; k < K; ++k)
      if (row[k] > row[best]) best = k;
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

}  // namespace compat
