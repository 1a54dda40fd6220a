#pragma once

// Straight-line reference implementations used only by tests. They index
// tensors element by element and share no code with src/.

#include <cmath>
#include <vector>

#include "stp/tensor.hpp"

namespace oracle {

inline double at5(const stp::Tensor& t, std::size_t b, std::size_t f, std::size_t c, std::size_t y,
                  std::size_t x) {
  const auto& s = t.shape();
  return t[(((b * s[1] + f) * s[2] + c) * s[3] + y) * s[4] + x];
}

/// Direct per-frame convolution with zero padding k/2.
inline stp::Tensor conv2d(const stp::Tensor& x, const stp::Tensor& w, const stp::Tensor& b) {
  const auto& s = x.shape();
  const std::size_t co_n = w.shape()[0], ci_n = w.shape()[1], k = w.shape()[2];
  const long pad = static_cast<long>(k / 2);
  stp::Tensor out({s[0], s[1], co_n, s[3], s[4]});
  auto o = out.mutable_data();
  std::size_t idx = 0;
  for (std::size_t bi = 0; bi < s[0]; ++bi)
    for (std::size_t f = 0; f < s[1]; ++f)
      for (std::size_t co = 0; co < co_n; ++co)
        for (std::size_t y = 0; y < s[3]; ++y)
          for (std::size_t xx = 0; xx < s[4]; ++xx) {
            double acc = b[co];
            for (std::size_t ci = 0; ci < ci_n; ++ci)
              for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) {
                  long iy = static_cast<long>(y) + static_cast<long>(ky) - pad;
                  long ix = static_cast<long>(xx) + static_cast<long>(kx) - pad;
                  if (iy < 0 || ix < 0 || iy >= static_cast<long>(s[3]) || ix >= static_cast<long>(s[4])) continue;
                  acc += w[((co * ci_n + ci) * k + ky) * k + kx] *
                         at5(x, bi, f, ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
                }
            o[idx++] = acc;
          }
  return out;
}

/// Direct depthwise kernel-3 convolution along frames.
inline stp::Tensor conv_time(const stp::Tensor& x, const stp::Tensor& w, const stp::Tensor& b) {
  const auto& s = x.shape();
  stp::Tensor out(s);
  auto o = out.mutable_data();
  std::size_t idx = 0;
  for (std::size_t bi = 0; bi < s[0]; ++bi)
    for (std::size_t f = 0; f < s[1]; ++f)
      for (std::size_t c = 0; c < s[2]; ++c)
        for (std::size_t y = 0; y < s[3]; ++y)
          for (std::size_t xx = 0; xx < s[4]; ++xx) {
            double acc = b[c];
            for (int tap = 0; tap < 3; ++tap) {
              long sf = static_cast<long>(f) + tap - 1;
              if (sf < 0 || sf >= static_cast<long>(s[1])) continue;
              acc += w[c * 3 + static_cast<std::size_t>(tap)] * at5(x, bi, static_cast<std::size_t>(sf), c, y, xx);
            }
            o[idx++] = acc;
          }
  return out;
}

struct AttnWeights {
  std::vector<double> wq, bq, wk, bk, wv, bv, wo, bo;  // [C*C] / [C]
};

/// softmax(q k^T / sqrt(C)) v followed by the output projection, over a
/// token-major list of C-dim features.
inline std::vector<std::vector<double>> attention(const std::vector<std::vector<double>>& tokens,
                                                  const AttnWeights& w) {
  const std::size_t N = tokens.size(), C = tokens[0].size();
  auto proj = [C](const std::vector<double>& W, const std::vector<double>& B, const std::vector<double>& v) {
    std::vector<double> r(C);
    for (std::size_t o = 0; o < C; ++o) {
      r[o] = B[o];
      for (std::size_t c = 0; c < C; ++c) r[o] += W[o * C + c] * v[c];
    }
    return r;
  };
  std::vector<std::vector<double>> q, k, v;
  for (const auto& t : tokens) {
    q.push_back(proj(w.wq, w.bq, t));
    k.push_back(proj(w.wk, w.bk, t));
    v.push_back(proj(w.wv, w.bv, t));
  }
  std::vector<std::vector<double>> out;
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<double> e(N);
    double z = 0.0;
    for (std::size_t m = 0; m < N; ++m) {
      double s = 0.0;
      for (std::size_t c = 0; c < C; ++c) s += q[n][c] * k[m][c];
      e[m] = std::exp(s / std::sqrt(static_cast<double>(C)));
      z += e[m];
    }
    std::vector<double> mix(C, 0.0);
    for (std::size_t m = 0; m < N; ++m)
      for (std::size_t c = 0; c < C; ++c) mix[c] += e[m] / z * v[m][c];
    out.push_back(proj(w.wo, w.bo, mix));
  }
  return out;
}

/// Token list of frame (b, f): one C-vector per pixel, row-major.
inline std::vector<std::vector<double>> frame_tokens(const stp::Tensor& x, std::size_t b, std::size_t f) {
  const auto& s = x.shape();
  std::vector<std::vector<double>> toks;
  for (std::size_t y = 0; y < s[3]; ++y)
    for (std::size_t xx = 0; xx < s[4]; ++xx) {
      std::vector<double> t;
      for (std::size_t c = 0; c < s[2]; ++c) t.push_back(at5(x, b, f, c, y, xx));
      toks.push_back(t);
    }
  return toks;
}

inline std::size_t idx5(const stp::Shape& s, std::size_t b, std::size_t f, std::size_t c, std::size_t y,
                        std::size_t x) {
  return (((b * s[1] + f) * s[2] + c) * s[3] + y) * s[4] + x;
}

/// Attention applied per frame over pixels (temporal = false) or per pixel over frames.
inline stp::Tensor attention_video(const stp::Tensor& x, const AttnWeights& w, bool temporal) {
  const auto& s = x.shape();
  stp::Tensor out(s);
  auto o = out.mutable_data();
  if (!temporal) {
    for (std::size_t b = 0; b < s[0]; ++b)
      for (std::size_t f = 0; f < s[1]; ++f) {
        auto res = attention(frame_tokens(x, b, f), w);
        for (std::size_t y = 0; y < s[3]; ++y)
          for (std::size_t xx = 0; xx < s[4]; ++xx)
            for (std::size_t c = 0; c < s[2]; ++c) o[idx5(s, b, f, c, y, xx)] = res[y * s[4] + xx][c];
      }
    return out;
  }
  for (std::size_t b = 0; b < s[0]; ++b)
    for (std::size_t y = 0; y < s[3]; ++y)
      for (std::size_t xx = 0; xx < s[4]; ++xx) {
        std::vector<std::vector<double>> toks;
        for (std::size_t f = 0; f < s[1]; ++f) {
          std::vector<double> t;
          for (std::size_t c = 0; c < s[2]; ++c) t.push_back(at5(x, b, f, c, y, xx));
          toks.push_back(t);
        }
        auto res = attention(toks, w);
        for (std::size_t f = 0; f < s[1]; ++f)
          for (std::size_t c = 0; c < s[2]; ++c) o[idx5(s, b, f, c, y, xx)] = res[f][c];
      }
  return out;
}

inline stp::Tensor silu(const stp::Tensor& x) {
  stp::Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < x.numel(); ++i) o[i] = x[i] / (1.0 + std::exp(-x[i]));
  return out;
}

inline stp::Tensor add(const stp::Tensor& a, const stp::Tensor& b) {
  stp::Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < a.numel(); ++i) o[i] = a[i] + b[i];
  return out;
}

/// x [B,F,C,H,W] plus v [B,C] at every frame and pixel.
inline stp::Tensor add_channel_vector(const stp::Tensor& x, const stp::Tensor& v) {
  const auto& s = x.shape();
  stp::Tensor out(s);
  auto o = out.mutable_data();
  for (std::size_t b = 0; b < s[0]; ++b)
    for (std::size_t f = 0; f < s[1]; ++f)
      for (std::size_t c = 0; c < s[2]; ++c)
        for (std::size_t y = 0; y < s[3]; ++y)
          for (std::size_t xx = 0; xx < s[4]; ++xx) {
            const std::size_t i = idx5(s, b, f, c, y, xx);
            o[i] = x[i] + v[b * s[2] + c];
          }
  return out;
}

/// Normalization over each (b, f, channel group) with population variance, eps 1e-5.
inline stp::Tensor group_norm(const stp::Tensor& x, const stp::Tensor& gamma, const stp::Tensor& beta,
                              std::size_t groups) {
  const auto& s = x.shape();
  const std::size_t cg = s[2] / groups;
  stp::Tensor out(s);
  auto o = out.mutable_data();
  for (std::size_t b = 0; b < s[0]; ++b)
    for (std::size_t f = 0; f < s[1]; ++f)
      for (std::size_t g = 0; g < groups; ++g) {
        double sum = 0.0, n = 0.0;
        for (std::size_t c = g * cg; c < (g + 1) * cg; ++c)
          for (std::size_t y = 0; y < s[3]; ++y)
            for (std::size_t xx = 0; xx < s[4]; ++xx) {
              sum += at5(x, b, f, c, y, xx);
              n += 1.0;
            }
        const double mean = sum / n;
        double var = 0.0;
        for (std::size_t c = g * cg; c < (g + 1) * cg; ++c)
          for (std::size_t y = 0; y < s[3]; ++y)
            for (std::size_t xx = 0; xx < s[4]; ++xx) {
              const double d = at5(x, b, f, c, y, xx) - mean;
              var += d * d;
            }
        var /= n;
        for (std::size_t c = g * cg; c < (g + 1) * cg; ++c)
          for (std::size_t y = 0; y < s[3]; ++y)
            for (std::size_t xx = 0; xx < s[4]; ++xx) {
              const std::size_t i = idx5(s, b, f, c, y, xx);
              o[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * gamma[c] + beta[c];
            }
      }
  return out;
}

/// Rows [N, in] times weight [out, in] plus bias.
inline stp::Tensor linear_rows(const stp::Tensor& x, const stp::Tensor& w, const stp::Tensor& b) {
  const std::size_t N = x.shape()[0], in = x.shape()[1], out_n = w.shape()[0];
  stp::Tensor out({N, out_n});
  auto o = out.mutable_data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t j = 0; j < out_n; ++j) {
      double acc = b[j];
      for (std::size_t i = 0; i < in; ++i) acc += w[j * in + i] * x[n * in + i];
      o[n * out_n + j] = acc;
    }
  return out;
}

/// Per-pixel channel projection of a video tensor with weight [out, in].
inline stp::Tensor linear_channels(const stp::Tensor& x, const stp::Tensor& w, const stp::Tensor& b) {
  const auto& s = x.shape();
  const std::size_t out_n = w.shape()[0];
  stp::Shape os{s[0], s[1], out_n, s[3], s[4]};
  stp::Tensor out(os);
  auto o = out.mutable_data();
  for (std::size_t bi = 0; bi < s[0]; ++bi)
    for (std::size_t f = 0; f < s[1]; ++f)
      for (std::size_t j = 0; j < out_n; ++j)
        for (std::size_t y = 0; y < s[3]; ++y)
          for (std::size_t xx = 0; xx < s[4]; ++xx) {
            double acc = b[j];
            for (std::size_t i = 0; i < s[2]; ++i) acc += w[j * s[2] + i] * at5(x, bi, f, i, y, xx);
            o[idx5(os, bi, f, j, y, xx)] = acc;
          }
  return out;
}

inline stp::Tensor avg_pool2(const stp::Tensor& x) {
  const auto& s = x.shape();
  stp::Shape os{s[0], s[1], s[2], s[3] / 2, s[4] / 2};
  stp::Tensor out(os);
  auto o = out.mutable_data();
  for (std::size_t b = 0; b < s[0]; ++b)
    for (std::size_t f = 0; f < s[1]; ++f)
      for (std::size_t c = 0; c < s[2]; ++c)
        for (std::size_t y = 0; y < os[3]; ++y)
          for (std::size_t xx = 0; xx < os[4]; ++xx)
            o[idx5(os, b, f, c, y, xx)] = (at5(x, b, f, c, 2 * y, 2 * xx) + at5(x, b, f, c, 2 * y, 2 * xx + 1) +
                                           at5(x, b, f, c, 2 * y + 1, 2 * xx) +
                                           at5(x, b, f, c, 2 * y + 1, 2 * xx + 1)) /
                                          4.0;
  return out;
}

inline stp::Tensor nearest_up2(const stp::Tensor& x) {
  const auto& s = x.shape();
  stp::Shape os{s[0], s[1], s[2], s[3] * 2, s[4] * 2};
  stp::Tensor out(os);
  auto o = out.mutable_data();
  for (std::size_t b = 0; b < s[0]; ++b)
    for (std::size_t f = 0; f < s[1]; ++f)
      for (std::size_t c = 0; c < s[2]; ++c)
        for (std::size_t y = 0; y < os[3]; ++y)
          for (std::size_t xx = 0; xx < os[4]; ++xx) o[idx5(os, b, f, c, y, xx)] = at5(x, b, f, c, y / 2, xx / 2);
  return out;
}

inline stp::Tensor concat_channels(const stp::Tensor& a, const stp::Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  stp::Shape os{sa[0], sa[1], sa[2] + sb[2], sa[3], sa[4]};
  stp::Tensor out(os);
  auto o = out.mutable_data();
  for (std::size_t bi = 0; bi < sa[0]; ++bi)
    for (std::size_t f = 0; f < sa[1]; ++f)
      for (std::size_t c = 0; c < os[2]; ++c)
        for (std::size_t y = 0; y < sa[3]; ++y)
          for (std::size_t xx = 0; xx < sa[4]; ++xx)
            o[idx5(os, bi, f, c, y, xx)] = c < sa[2] ? at5(a, bi, f, c, y, xx) : at5(b, bi, f, c - sa[2], y, xx);
  return out;
}

/// Sinusoidal features: sin(t w_k) then cos(t w_k), w_k = 10000^(-k/half).
inline stp::Tensor time_features(const std::vector<std::size_t>& ts, std::size_t dim) {
  const std::size_t half = dim / 2;
  stp::Tensor out({ts.size(), dim});
  auto o = out.mutable_data();
  for (std::size_t n = 0; n < ts.size(); ++n)
    for (std::size_t k = 0; k < half; ++k) {
      const double w = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(half));
      o[n * dim + k] = std::sin(static_cast<double>(ts[n]) * w);
      o[n * dim + half + k] = std::cos(static_cast<double>(ts[n]) * w);
    }
  return out;
}

}  // namespace oracle
