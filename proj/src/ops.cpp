#include "stp/ops.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <numbers>

namespace stp {

namespace {

struct VideoDims {
  std::size_t B, F, C, H, W;
  std::size_t hw() const { return H * W; }
  std::size_t frame() const { return C * H * W; }
  std::size_t item() const { return F * C * H * W; }
};

VideoDims video_dims(const Tensor& x, const char* op) {
  if (x.rank() != 5) {
    throw ShapeError(std::string(op) + ": expected [B,F,C,H,W] input, got " + shape_str(x.shape()));
  }
  const auto& s = x.shape();
  return {s[0], s[1], s[2], s[3], s[4]};
}

void expect_shape(const Parameter& p, const Shape& want, const char* op) {
  if (p.value.shape() != want) {
    throw ShapeError(std::string(op) + ": parameter " + p.name + " has shape " +
                     shape_str(p.value.shape()) + ", expected " + shape_str(want));
  }
}

std::optional<NodeId> prospective(const Tape& tape, bool record) {
  if (record) return tape.size();
  return std::nullopt;
}

std::string where(std::optional<NodeId> id) {
  return id ? "tape node " + std::to_string(*id) : std::string("unrecorded op");
}

/// Shared epilogue: finite check, tracing, and node construction.
Tensor finish(Tape& tape, OpKind kind, std::vector<const Tensor*> inputs,
              std::vector<const Parameter*> params, bool record, Tensor out,
              std::vector<Tensor> saved, VjpFn vjp) {
  if (!out.all_finite()) {
    throw NumericError(std::string(to_string(kind)) + " produced a non-finite value at " +
                           where(prospective(tape, record)),
                       prospective(tape, record));
  }
  if (tape.recording()) {
    for (const auto* p : params) tape.note_param(*p);
    TraceEntry e;
    e.kind = kind;
    e.recorded = record;
    for (const auto* t : inputs) {
      if (t->trace_id()) e.inputs.push_back(*t->trace_id());
    }
    out.set_trace_id(tape.append_trace(std::move(e)));
  }
  if (record) {
    TapeNode n;
    n.kind = kind;
    for (const auto* t : inputs) n.input_slots.push_back(t->node());
    n.params = std::move(params);
    n.saved = std::move(saved);
    n.output = out.detached();
    n.vjp = std::move(vjp);
    out.set_node(tape.append(std::move(n)));
  }
  return out;
}

/// Adds a per-item partial into the accumulator. Param gradients are summed
/// item by item so a batch of b gives the same bits as b accumulated steps.
void flush(std::span<double> acc, std::vector<double>& scratch) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += scratch[i];
  std::fill(scratch.begin(), scratch.end(), 0.0);
}

// ---------------------------------------------------------------- kernels

/// e^x for x <= 0 without branches, so softmax loops vectorize. Cody-Waite
/// reduction by ln 2 and a degree-13 Taylor polynomial; within a few ulp of
/// std::exp. Arguments below -708 are clamped.
inline double exp_nonpositive(double x) {
  x = x < -708.0 ? -708.0 : x;
  constexpr double kShift = 0x1.8p52;
  const double k = (x * 1.4426950408889634 + kShift) - kShift;
  const double r = (x - k * 0x1.62e42fee00000p-1) - k * 0x1.a39ef35793c76p-33;
  double p = 1.0 / 6227020800.0;
  p = p * r + 1.0 / 479001600.0;
  p = p * r + 1.0 / 39916800.0;
  p = p * r + 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;
  const auto bits = static_cast<std::uint64_t>(static_cast<std::int64_t>(k) + 1023) << 52;
  return p * std::bit_cast<double>(bits);
}

/// out[j] += sum_r a[r * a_step] * m[r * m_step + j] for j < len. The sum over
/// r runs in order for every j; columns are held in register blocks.
void accumulate_rows(const double* a, std::size_t a_step, const double* m, std::size_t m_step,
                     std::size_t rows, double* out, std::size_t len) {
  std::size_t j = 0;
  for (; j + 16 <= len; j += 16) {
    double acc[16];
    for (std::size_t t = 0; t < 16; ++t) acc[t] = out[j + t];
    for (std::size_t r = 0; r < rows; ++r) {
      const double av = a[r * a_step];
      const double* mr = m + r * m_step + j;
      for (std::size_t t = 0; t < 16; ++t) acc[t] += av * mr[t];
    }
    for (std::size_t t = 0; t < 16; ++t) out[j + t] = acc[t];
  }
  for (; j + 4 <= len; j += 4) {
    double acc[4];
    for (std::size_t t = 0; t < 4; ++t) acc[t] = out[j + t];
    for (std::size_t r = 0; r < rows; ++r) {
      const double av = a[r * a_step];
      const double* mr = m + r * m_step + j;
      for (std::size_t t = 0; t < 4; ++t) acc[t] += av * mr[t];
    }
    for (std::size_t t = 0; t < 4; ++t) out[j + t] = acc[t];
  }
  for (; j < len; ++j) {
    double acc = out[j];
    for (std::size_t r = 0; r < rows; ++r) acc += a[r * a_step] * m[r * m_step + j];
    out[j] = acc;
  }
}

bool all_finite(const double* v, std::size_t n) {
  bool ok = true;
  for (std::size_t i = 0; i < n; ++i) ok &= std::isfinite(v[i]);
  return ok;
}

/// Max over finite values via independent lanes; exact regardless of order.
double row_max(const double* v, std::size_t n) {
  double lane[8];
  for (std::size_t t = 0; t < 8; ++t) lane[t] = v[0];
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t t = 0; t < 8; ++t) lane[t] = lane[t] < v[i + t] ? v[i + t] : lane[t];
  }
  double mx = lane[0];
  for (std::size_t t = 1; t < 8; ++t) mx = mx < lane[t] ? lane[t] : mx;
  for (; i < n; ++i) mx = mx < v[i] ? v[i] : mx;
  return mx;
}

/// Sum in a fixed 8-lane order.
double row_sum(const double* v, std::size_t n) {
  double lane[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t t = 0; t < 8; ++t) lane[t] += v[i + t];
  }
  double z = 0.0;
  for (std::size_t t = 0; t < 8; ++t) z += lane[t];
  for (; i < n; ++i) z += v[i];
  return z;
}

/// Neumaier-compensated running sum.
struct CompensatedSum {
  double s = 0.0;
  double c = 0.0;
  void add(double v) {
    const double t = s + v;
    c += std::abs(s) >= std::abs(v) ? (s - t) + v : (v - t) + s;
    s = t;
  }
  double value() const { return s + c; }
};

// ---------------------------------------------------------------- conv2d

/// One frame. `padded` is scratch for the zero-padded input planes.
void conv2d_image(const double* in, double* out, const double* w, const double* b,
                  std::size_t ci_n, std::size_t co_n, std::size_t H, std::size_t W,
                  std::size_t k, std::vector<double>& padded) {
  const std::size_t pad = k / 2;
  const std::size_t PW = W + 2 * pad, PH = H + 2 * pad;
  padded.assign(ci_n * PH * PW, 0.0);
  for (std::size_t ci = 0; ci < ci_n; ++ci) {
    for (std::size_t y = 0; y < H; ++y) {
      std::copy_n(in + (ci * H + y) * W, W, padded.data() + (ci * PH + y + pad) * PW + pad);
    }
  }
  // Taps accumulate in (ci, ky, kx) order onto the bias.
  const std::size_t taps = ci_n * k * k;
  std::vector<std::size_t> offset(taps);
  for (std::size_t ci = 0; ci < ci_n; ++ci) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) offset[(ci * k + ky) * k + kx] = (ci * PH + ky) * PW + kx;
    }
  }
  for (std::size_t co = 0; co < co_n; ++co) {
    const double* wc = w + co * taps;
    for (std::size_t y = 0; y < H; ++y) {
      double* orow = out + (co * H + y) * W;
      const double* base = padded.data() + y * PW;
      std::size_t x = 0;
      for (; x + 8 <= W; x += 8) {
        double acc[8];
        for (std::size_t t = 0; t < 8; ++t) acc[t] = b[co];
        for (std::size_t i = 0; i < taps; ++i) {
          const double wv = wc[i];
          const double* src = base + offset[i] + x;
          for (std::size_t t = 0; t < 8; ++t) acc[t] += wv * src[t];
        }
        for (std::size_t t = 0; t < 8; ++t) orow[x + t] = acc[t];
      }
      for (; x < W; ++x) {
        double acc = b[co];
        for (std::size_t i = 0; i < taps; ++i) acc += wc[i] * base[offset[i] + x];
        orow[x] = acc;
      }
    }
  }
}

void conv2d_image_backward(const double* in, const double* gout, const double* w,
                           double* gin, double* gw, double* gb, std::size_t ci_n,
                           std::size_t co_n, std::size_t H, std::size_t W, std::size_t k) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t hw = H * W;
  for (std::size_t co = 0; co < co_n; ++co) {
    const double* g = gout + co * hw;
    if (gb) {
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += g[i];
      gb[co] += s;
    }
    for (std::size_t ci = 0; ci < ci_n; ++ci) {
      const double* src = in + ci * hw;
      double* gsrc = gin ? gin + ci * hw : nullptr;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::size_t widx = ((co * ci_n + ci) * k + ky) * k + kx;
          const double wv = w[widx];
          const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
          const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
          const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
          const std::size_t x1 = dx > 0 ? W - static_cast<std::size_t>(dx) : W;
          double acc = 0.0;
          for (std::size_t y = 0; y < H; ++y) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y) + dy;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            const double* grow = g + y * W;
            const std::size_t off = static_cast<std::size_t>(iy) * W;
            if (gw) {
              const double* irow = src + off + dx;
              for (std::size_t x = x0; x < x1; ++x) acc += grow[x] * irow[x];
            }
            if (gsrc && wv != 0.0) {
              double* girow = gsrc + off + dx;
              for (std::size_t x = x0; x < x1; ++x) girow[x] += wv * grow[x];
            }
          }
          if (gw) gw[widx] += acc;
        }
      }
    }
  }
}

Tensor conv2d_op(Tape& tape, const Tensor& x, const Conv2dParams& p, OpKind kind) {
  const char* name = kind == OpKind::fuse_conv ? "fuse_conv" : "conv_spatial";
  auto d = video_dims(x, name);
  const auto& ws = p.weight->value.shape();
  if (ws.size() != 4 || ws[2] != ws[3] || (ws[2] != 3 && ws[2] != 1)) {
    throw ShapeError(std::string(name) + ": weight " + p.weight->name + " must be [Co,Ci,3,3] or [Co,Ci,1,1], got " +
                     shape_str(ws));
  }
  if (ws[1] != d.C) {
    throw ShapeError(std::string(name) + ": input " + shape_str(x.shape()) +
                     " has channel count incompatible with weight " + shape_str(ws));
  }
  const std::size_t co_n = ws[0], k = ws[2];
  expect_shape(*p.bias, {co_n}, name);

  Tensor out({d.B, d.F, co_n, d.H, d.W});
  auto o = out.mutable_data();
  auto in = x.data();
  const double* w = p.weight->value.data().data();
  const double* b = p.bias->value.data().data();
  const std::size_t out_frame = co_n * d.hw();
  std::vector<double> padded;
  for (std::size_t bf = 0; bf < d.B * d.F; ++bf) {
    conv2d_image(in.data() + bf * d.frame(), o.data() + bf * out_frame, w, b, d.C, co_n, d.H,
                 d.W, k, padded);
  }

  std::vector<const Parameter*> params{p.weight, p.bias};
  bool record = tape.needs_node(std::vector<const Tensor*>{&x}, params);
  VjpFn vjp = [d, co_n, k](const TapeNode& node, const Tensor& gout, VjpContext& ctx) {
    const Tensor& input = node.saved[0];
    auto gin = ctx.input_grad(0);
    auto gw = ctx.param_grad(0);
    auto gb = ctx.param_grad(1);
    const double* w = node.params[0]->value.data().data();
    std::vector<double> sw(gw.size(), 0.0), sb(gb.size(), 0.0);
    const std::size_t out_frame = co_n * d.hw();
    for (std::size_t bi = 0; bi < d.B; ++bi) {
      for (std::size_t f = 0; f < d.F; ++f) {
        const std::size_t bf = bi * d.F + f;
        conv2d_image_backward(input.data().data() + bf * d.frame(),
                              gout.data().data() + bf * out_frame, w,
                              gin.empty() ? nullptr : gin.data() + bf * d.frame(),
                              gw.empty() ? nullptr : sw.data(), gb.empty() ? nullptr : sb.data(),
                              d.C, co_n, d.H, d.W, k);
      }
      if (!gw.empty()) flush(gw, sw);
      if (!gb.empty()) flush(gb, sb);
    }
  };
  std::vector<Tensor> saved;
  if (record) saved.push_back(x.detached());
  return finish(tape, kind, {&x}, std::move(params), record, std::move(out), std::move(saved),
                std::move(vjp));
}

// ---------------------------------------------------------------- attention

/// Scratch for one attention instance over channel-major [C][N] tokens.
struct AttnBuffers {
  std::vector<double> q, k, v, kt, vt, at, a;
  void resize(std::size_t C, std::size_t N) {
    q.assign(C * N, 0.0);
    k.assign(C * N, 0.0);
    v.assign(C * N, 0.0);
    kt.assign(N * C, 0.0);
    vt.assign(N * C, 0.0);
    at.assign(N * C, 0.0);
    a.assign(C * N, 0.0);
  }
};

struct AttnWeights {
  const double *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
};

AttnWeights attn_weights(const AttentionParams& p) {
  return {p.q_weight->value.data().data(),  p.q_bias->value.data().data(),
          p.k_weight->value.data().data(),  p.k_bias->value.data().data(),
          p.v_weight->value.data().data(),  p.v_bias->value.data().data(),
          p.out_weight->value.data().data(), p.out_bias->value.data().data()};
}

AttnWeights attn_weights(const TapeNode& node) {
  const auto& ps = node.params;
  return {ps[0]->value.data().data(), ps[1]->value.data().data(), ps[2]->value.data().data(),
          ps[3]->value.data().data(), ps[4]->value.data().data(), ps[5]->value.data().data(),
          ps[6]->value.data().data(), ps[7]->value.data().data()};
}

/// out[o][n] = b[o] + sum_c w[o][c] in[c][n]
void project(const double* w, const double* b, const double* in, double* out, std::size_t C,
             std::size_t N) {
  for (std::size_t o = 0; o < C; ++o) {
    double* orow = out + o * N;
    std::fill(orow, orow + N, b[o]);
    accumulate_rows(w + o * C, 1, in, N, C, orow, N);
  }
}

void transpose(const double* in, double* out, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = in[r * cols + c];
  }
}

/// Forward for one token set. `x` and `y` are channel-major [C][N]; `probs`
/// receives the post-softmax matrix [N][N]. Returns false if a score is
/// non-finite.
bool attention_forward(const AttnWeights& wt, const double* x, double* y, double* probs,
                       std::size_t C, std::size_t N, AttnBuffers& buf) {
  project(wt.wq, wt.bq, x, buf.q.data(), C, N);
  project(wt.wk, wt.bk, x, buf.k.data(), C, N);
  project(wt.wv, wt.bv, x, buf.v.data(), C, N);
  const double scale = 1.0 / std::sqrt(static_cast<double>(C));
  for (auto& qv : buf.q) qv *= scale;
  for (std::size_t n = 0; n < N; ++n) {
    double* srow = probs + n * N;
    std::fill(srow, srow + N, 0.0);
    accumulate_rows(buf.q.data() + n, N, buf.k.data(), N, C, srow, N);
    if (!all_finite(srow, N)) return false;
    const double mx = row_max(srow, N);
    for (std::size_t m = 0; m < N; ++m) srow[m] = exp_nonpositive(srow[m] - mx);
    const double z = row_sum(srow, N);
    const double inv = 1.0 / z;
    for (std::size_t m = 0; m < N; ++m) srow[m] *= inv;
  }
  // at[n][c] = sum_m P[n][m] v[c][m]
  transpose(buf.v.data(), buf.vt.data(), C, N);
  std::fill(buf.at.begin(), buf.at.end(), 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    accumulate_rows(probs + n * N, 1, buf.vt.data(), C, N, buf.at.data() + n * C, C);
  }
  transpose(buf.at.data(), buf.a.data(), N, C);
  project(wt.wo, wt.bo, buf.a.data(), y, C, N);
  return true;
}

struct AttnGradScratch {
  std::vector<double> ga, gp, gv, gq, gqt, gk;
  std::vector<double> wq, bq, wk, bk, wv, bv, wo, bo;
  void resize(std::size_t C, std::size_t N, bool params) {
    ga.assign(C * N, 0.0);
    gp.assign(N * N, 0.0);
    gv.assign(C * N, 0.0);
    gq.assign(C * N, 0.0);
    gqt.assign(N * C, 0.0);
    gk.assign(C * N, 0.0);
    if (params) {
      for (auto* w : {&wq, &wk, &wv, &wo}) w->assign(C * C, 0.0);
      for (auto* b : {&bq, &bk, &bv, &bo}) b->assign(C, 0.0);
    }
  }
};

/// dW[o][c] += sum_n g[o][n] in[c][n]; db[o] += sum_n g[o][n]
void project_param_grad(const double* g, const double* in, double* dw, double* db, std::size_t C,
                        std::size_t N) {
  for (std::size_t o = 0; o < C; ++o) {
    const double* grow = g + o * N;
    double s = 0.0;
    for (std::size_t n = 0; n < N; ++n) s += grow[n];
    db[o] += s;
    for (std::size_t c = 0; c < C; ++c) {
      const double* irow = in + c * N;
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n) acc += grow[n] * irow[n];
      dw[o * C + c] += acc;
    }
  }
}

/// gin[c][n] += sum_o w[o][c] g[o][n]
void project_input_grad(const double* w, const double* g, double* gin, std::size_t C,
                        std::size_t N) {
  for (std::size_t c = 0; c < C; ++c) accumulate_rows(w + c, C, g, N, C, gin + c * N, N);
}

/// Backward for one token set; recomputes q/k/v from the saved input.
void attention_backward(const AttnWeights& wt, const double* x, const double* probs,
                        const double* gy, double* gx, bool want_params, std::size_t C,
                        std::size_t N, AttnBuffers& buf, AttnGradScratch& gs) {
  project(wt.wq, wt.bq, x, buf.q.data(), C, N);
  project(wt.wk, wt.bk, x, buf.k.data(), C, N);
  project(wt.wv, wt.bv, x, buf.v.data(), C, N);
  transpose(buf.v.data(), buf.vt.data(), C, N);
  std::fill(buf.at.begin(), buf.at.end(), 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    accumulate_rows(probs + n * N, 1, buf.vt.data(), C, N, buf.at.data() + n * C, C);
  }
  transpose(buf.at.data(), buf.a.data(), N, C);

  if (want_params) project_param_grad(gy, buf.a.data(), gs.wo.data(), gs.bo.data(), C, N);
  std::fill(gs.ga.begin(), gs.ga.end(), 0.0);
  project_input_grad(wt.wo, gy, gs.ga.data(), C, N);

  // gp[n][m] = sum_c ga[c][n] v[c][m];  gv[c][m] = sum_n P[n][m] ga[c][n]
  std::fill(gs.gp.begin(), gs.gp.end(), 0.0);
  std::fill(gs.gv.begin(), gs.gv.end(), 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    accumulate_rows(gs.ga.data() + n, N, buf.v.data(), N, C, gs.gp.data() + n * N, N);
  }
  for (std::size_t c = 0; c < C; ++c) {
    accumulate_rows(gs.ga.data() + c * N, 1, probs, N, N, gs.gv.data() + c * N, N);
  }
  // Softmax VJP folded with the score scale; gp becomes gs (scores).
  const double scale = 1.0 / std::sqrt(static_cast<double>(C));
  for (std::size_t n = 0; n < N; ++n) {
    double* row = gs.gp.data() + n * N;
    const double* prow = probs + n * N;
    double dot = 0.0;
    for (std::size_t m = 0; m < N; ++m) dot += row[m] * prow[m];
    for (std::size_t m = 0; m < N; ++m) row[m] = prow[m] * (row[m] - dot) * scale;
  }
  // gq[c][n] = sum_m gs[n][m] k[c][m]  (via gqt[n][c]);  gk[c][m] = sum_n gs[n][m] q[c][n]
  transpose(buf.k.data(), buf.kt.data(), C, N);
  std::fill(gs.gqt.begin(), gs.gqt.end(), 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    accumulate_rows(gs.gp.data() + n * N, 1, buf.kt.data(), C, N, gs.gqt.data() + n * C, C);
  }
  transpose(gs.gqt.data(), gs.gq.data(), N, C);
  std::fill(gs.gk.begin(), gs.gk.end(), 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    accumulate_rows(buf.q.data() + c * N, 1, gs.gp.data(), N, N, gs.gk.data() + c * N, N);
  }
  if (want_params) {
    project_param_grad(gs.gq.data(), x, gs.wq.data(), gs.bq.data(), C, N);
    project_param_grad(gs.gk.data(), x, gs.wk.data(), gs.bk.data(), C, N);
    project_param_grad(gs.gv.data(), x, gs.wv.data(), gs.bv.data(), C, N);
  }
  if (gx) {
    project_input_grad(wt.wq, gs.gq.data(), gx, C, N);
    project_input_grad(wt.wk, gs.gk.data(), gx, C, N);
    project_input_grad(wt.wv, gs.gv.data(), gx, C, N);
  }
}

std::vector<const Parameter*> attn_param_list(const AttentionParams& p) {
  return {p.q_weight, p.q_bias, p.k_weight, p.k_bias, p.v_weight, p.v_bias, p.out_weight, p.out_bias};
}

void check_attn_params(const AttentionParams& p, std::size_t C, const char* op) {
  for (const Parameter* w : {p.q_weight, p.k_weight, p.v_weight, p.out_weight}) expect_shape(*w, {C, C}, op);
  for (const Parameter* b : {p.q_bias, p.k_bias, p.v_bias, p.out_bias}) expect_shape(*b, {C}, op);
}

/// Flushes per-item attention param partials in parameter order.
void flush_attn_params(VjpContext& ctx, AttnGradScratch& gs) {
  std::vector<double>* parts[] = {&gs.wq, &gs.bq, &gs.wk, &gs.bk, &gs.wv, &gs.bv, &gs.wo, &gs.bo};
  for (std::size_t i = 0; i < 8; ++i) {
    auto g = ctx.param_grad(i);
    if (!g.empty()) flush(g, *parts[i]);
  }
}

bool any_param_grad(VjpContext& ctx, std::size_t count) {
  bool any = false;
  for (std::size_t i = 0; i < count; ++i) any = any || !ctx.param_grad(i).empty();
  return any;
}

}  // namespace

// ------------------------------------------------------------------ public ops

Tensor conv_spatial(Tape& tape, const Tensor& x, const Conv2dParams& p) {
  return conv2d_op(tape, x, p, OpKind::conv_spatial);
}

Tensor fuse_conv(Tape& tape, const Tensor& x, const Conv2dParams& p) {
  return conv2d_op(tape, x, p, OpKind::fuse_conv);
}

Tensor conv_temporal(Tape& tape, const Tensor& x, const TemporalConvParams& p) {
  auto d = video_dims(x, "conv_temporal");
  expect_shape(*p.weight, {d.C, 3}, "conv_temporal");
  expect_shape(*p.bias, {d.C}, "conv_temporal");
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto in = x.data();
  const double* w = p.weight->value.data().data();
  const double* b = p.bias->value.data().data();
  const std::size_t hw = d.hw();
  for (std::size_t bi = 0; bi < d.B; ++bi) {
    for (std::size_t f = 0; f < d.F; ++f) {
      for (std::size_t c = 0; c < d.C; ++c) {
        double* orow = o.data() + ((bi * d.F + f) * d.C + c) * hw;
        std::fill(orow, orow + hw, b[c]);
        for (std::size_t tap = 0; tap < 3; ++tap) {
          const std::ptrdiff_t src_f = static_cast<std::ptrdiff_t>(f) + static_cast<std::ptrdiff_t>(tap) - 1;
          if (src_f < 0 || src_f >= static_cast<std::ptrdiff_t>(d.F)) continue;
          const double wv = w[c * 3 + tap];
          const double* irow = in.data() + ((bi * d.F + static_cast<std::size_t>(src_f)) * d.C + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) orow[i] += wv * irow[i];
        }
      }
    }
  }
  std::vector<const Parameter*> params{p.weight, p.bias};
  bool record = tape.needs_node(std::vector<const Tensor*>{&x}, params);
  VjpFn vjp = [d](const TapeNode& node, const Tensor& gout, VjpContext& ctx) {
    const double* in = node.saved[0].data().data();
    const double* g = gout.data().data();
    const double* w = node.params[0]->value.data().data();
    auto gin = ctx.input_grad(0);
    auto gw = ctx.param_grad(0);
    auto gb = ctx.param_grad(1);
    std::vector<double> sw(gw.size(), 0.0), sb(gb.size(), 0.0);
    const std::size_t hw = d.hw();
    for (std::size_t bi = 0; bi < d.B; ++bi) {
      for (std::size_t f = 0; f < d.F; ++f) {
        for (std::size_t c = 0; c < d.C; ++c) {
          const double* grow = g + ((bi * d.F + f) * d.C + c) * hw;
          if (!gb.empty()) {
            double s = 0.0;
            for (std::size_t i = 0; i < hw; ++i) s += grow[i];
            sb[c] += s;
          }
          for (std::size_t tap = 0; tap < 3; ++tap) {
            const std::ptrdiff_t src_f = static_cast<std::ptrdiff_t>(f) + static_cast<std::ptrdiff_t>(tap) - 1;
            if (src_f < 0 || src_f >= static_cast<std::ptrdiff_t>(d.F)) continue;
            const std::size_t off = ((bi * d.F + static_cast<std::size_t>(src_f)) * d.C + c) * hw;
            if (!gw.empty()) {
              double acc = 0.0;
              for (std::size_t i = 0; i < hw; ++i) acc += grow[i] * in[off + i];
              sw[c * 3 + tap] += acc;
            }
            if (!gin.empty()) {
              const double wv = w[c * 3 + tap];
              double* girow = gin.data() + off;
              for (std::size_t i = 0; i < hw; ++i) girow[i] += wv * grow[i];
            }
          }
        }
      }
      if (!gw.empty()) flush(gw, sw);
      if (!gb.empty()) flush(gb, sb);
    }
  };
  std::vector<Tensor> saved;
  if (record) saved.push_back(x.detached());
  return finish(tape, OpKind::conv_temporal, {&x}, std::move(params), record, std::move(out),
                std::move(saved), std::move(vjp));
}

Tensor attn_spatial(Tape& tape, const Tensor& x, const AttentionParams& p) {
  auto d = video_dims(x, "attn_spatial");
  check_attn_params(p, d.C, "attn_spatial");
  auto params = attn_param_list(p);
  bool record = tape.needs_node(std::vector<const Tensor*>{&x}, params);
  const std::size_t N = d.hw();
  Tensor out(x.shape());
  // Post-softmax matrices are kept only when the node is recorded.
  Tensor probs;
  std::vector<double> probs_frame;
  if (record) {
    probs = Tensor({d.B, d.F, N, N});
  } else {
    probs_frame.assign(N * N, 0.0);
  }
  auto o = out.mutable_data();
  auto in = x.data();
  double* pall = record ? probs.mutable_data().data() : nullptr;
  AttnBuffers buf;
  buf.resize(d.C, N);
  const AttnWeights wt = attn_weights(p);
  for (std::size_t bf = 0; bf < d.B * d.F; ++bf) {
    double* pr = record ? pall + bf * N * N : probs_frame.data();
    if (!attention_forward(wt, in.data() + bf * d.frame(), o.data() + bf * d.frame(), pr, d.C, N,
                           buf)) {
      auto id = prospective(tape, record);
      throw NumericError("attn_spatial: non-finite softmax input at " + where(id), id);
    }
  }
  VjpFn vjp = [d](const TapeNode& node, const Tensor& gout, VjpContext& ctx) {
    const std::size_t N = d.hw();
    const double* in = node.saved[0].data().data();
    const double* pr = node.saved[1].data().data();
    const double* g = gout.data().data();
    auto gin = ctx.input_grad(0);
    const bool want_params = any_param_grad(ctx, 8);
    const AttnWeights wt = attn_weights(node);
    AttnBuffers buf;
    buf.resize(d.C, N);
    AttnGradScratch gs;
    gs.resize(d.C, N, true);
    for (std::size_t bi = 0; bi < d.B; ++bi) {
      for (std::size_t f = 0; f < d.F; ++f) {
        const std::size_t bf = bi * d.F + f;
        attention_backward(wt, in + bf * d.frame(), pr + bf * N * N, g + bf * d.frame(),
                           gin.empty() ? nullptr : gin.data() + bf * d.frame(), want_params, d.C,
                           N, buf, gs);
      }
      if (want_params) flush_attn_params(ctx, gs);
    }
  };
  std::vector<Tensor> saved;
  if (record) {
    saved.push_back(x.detached());
    saved.push_back(probs);
  }
  return finish(tape, OpKind::attn_spatial, {&x}, std::move(params), record, std::move(out),
                std::move(saved), std::move(vjp));
}

Tensor attn_temporal(Tape& tape, const Tensor& x, const AttentionParams& p) {
  auto d = video_dims(x, "attn_temporal");
  check_attn_params(p, d.C, "attn_temporal");
  auto params = attn_param_list(p);
  bool record = tape.needs_node(std::vector<const Tensor*>{&x}, params);
  const std::size_t N = d.F;
  const std::size_t hw = d.hw();
  Tensor out(x.shape());
  Tensor probs;
  std::vector<double> probs_pixel;
  if (record) {
    probs = Tensor({d.B, hw, N, N});
  } else {
    probs_pixel.assign(N * N, 0.0);
  }
  auto o = out.mutable_data();
  auto in = x.data();
  double* pall = record ? probs.mutable_data().data() : nullptr;
  AttnBuffers buf;
  buf.resize(d.C, N);
  const AttnWeights wt = attn_weights(p);
  std::vector<double> xs(d.C * N), ys(d.C * N);
  for (std::size_t bi = 0; bi < d.B; ++bi) {
    const std::size_t base = bi * d.item();
    for (std::size_t px = 0; px < hw; ++px) {
      for (std::size_t f = 0; f < N; ++f) {
        for (std::size_t c = 0; c < d.C; ++c) xs[c * N + f] = in[base + (f * d.C + c) * hw + px];
      }
      double* pr = record ? pall + (bi * hw + px) * N * N : probs_pixel.data();
      if (!attention_forward(wt, xs.data(), ys.data(), pr, d.C, N, buf)) {
        auto id = prospective(tape, record);
        throw NumericError("attn_temporal: non-finite softmax input at " + where(id), id);
      }
      for (std::size_t f = 0; f < N; ++f) {
        for (std::size_t c = 0; c < d.C; ++c) o[base + (f * d.C + c) * hw + px] = ys[c * N + f];
      }
    }
  }
  VjpFn vjp = [d](const TapeNode& node, const Tensor& gout, VjpContext& ctx) {
    const std::size_t N = d.F;
    const std::size_t hw = d.hw();
    const double* in = node.saved[0].data().data();
    const double* pr = node.saved[1].data().data();
    const double* g = gout.data().data();
    auto gin = ctx.input_grad(0);
    const bool want_params = any_param_grad(ctx, 8);
    const AttnWeights wt = attn_weights(node);
    AttnBuffers buf;
    buf.resize(d.C, N);
    AttnGradScratch gs;
    gs.resize(d.C, N, true);
    std::vector<double> xs(d.C * N), gys(d.C * N), gxs(d.C * N);
    for (std::size_t bi = 0; bi < d.B; ++bi) {
      const std::size_t base = bi * d.item();
      for (std::size_t px = 0; px < hw; ++px) {
        for (std::size_t f = 0; f < N; ++f) {
          for (std::size_t c = 0; c < d.C; ++c) {
            const std::size_t idx = base + (f * d.C + c) * hw + px;
            xs[c * N + f] = in[idx];
            gys[c * N + f] = g[idx];
          }
        }
        std::fill(gxs.begin(), gxs.end(), 0.0);
        attention_backward(wt, xs.data(), pr + (bi * hw + px) * N * N, gys.data(),
                           gin.empty() ? nullptr : gxs.data(), want_params, d.C, N, buf, gs);
        if (!gin.empty()) {
          for (std::size_t f = 0; f < N; ++f) {
            for (std::size_t c = 0; c < d.C; ++c) gin[base + (f * d.C + c) * hw + px] += gxs[c * N + f];
          }
        }
      }
      if (want_params) flush_attn_params(ctx, gs);
    }
  };
  std::vector<Tensor> saved;
  if (record) {
    saved.push_back(x.detached());
    saved.push_back(probs);
  }
  return finish(tape, OpKind::attn_temporal, {&x}, std::move(params), record, std::move(out),
                std::move(saved), std::move(vjp));
}

Tensor linear(Tape& tape, const Tensor& x, const LinearParams& p) {
  const auto& ws = p.weight->value.shape();
  if (ws.size() != 2) throw ShapeError("linear: weight " + p.weight->name + " must be rank 2");
  const std::size_t out_n = ws[0], in_n = ws[1];
  expect_shape(*p.bias, {out_n}, "linear");
  // Both layouts reduce to: items x [in][len] -> items x [out][len].
  std::size_t items, groups, len;
  Shape out_shape;
  if (x.rank() == 2) {
    if (x.dim(1) != in_n) {
      throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(ws));
    }
    items = x.dim(0);
    groups = 1;
    len = 1;
    out_shape = {items, out_n};
  } else if (x.rank() == 5) {
    auto d = video_dims(x, "linear");
    if (d.C != in_n) {
      throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(ws));
    }
    items = d.B;
    groups = d.F;
    len = d.hw();
    out_shape = {d.B, d.F, out_n, d.H, d.W};
  } else {
    throw ShapeError("linear: unsupported input rank " + shape_str(x.shape()));
  }
  Tensor out(out_shape);
  auto o = out.mutable_data();
  auto in = x.data();
  const double* w = p.weight->value.data().data();
  const double* b = p.bias->value.data().data();
  for (std::size_t ig = 0; ig < items * groups; ++ig) {
    const double* src = in.data() + ig * in_n * len;
    double* dst = o.data() + ig * out_n * len;
    for (std::size_t r = 0; r < out_n; ++r) {
      double* orow = dst + r * len;
      std::fill(orow, orow + len, b[r]);
      for (std::size_t c = 0; c < in_n; ++c) {
        const double wv = w[r * in_n + c];
        const double* irow = src + c * len;
        for (std::size_t i = 0; i < len; ++i) orow[i] += wv * irow[i];
      }
    }
  }
  std::vector<const Parameter*> params{p.weight, p.bias};
  bool record = tape.needs_node(std::vector<const Tensor*>{&x}, params);
  VjpFn vjp = [items, groups, len, in_n, out_n](const TapeNode& node, const Tensor& gout,
                                               VjpContext& ctx) {
    const double* in = node.saved[0].data().data();
    const double* g = gout.data().data();
    const double* w = node.params[0]->value.data().data();
    auto gin = ctx.input_grad(0);
    auto gw = ctx.param_grad(0);
    auto gb = ctx.param_grad(1);
    std::vector<double> sw(gw.size(), 0.0), sb(gb.size(), 0.0);
    for (std::size_t it = 0; it < items; ++it) {
      for (std::size_t gr = 0; gr < groups; ++gr) {
        const std::size_t ig = it * groups + gr;
        const double* src = in + ig * in_n * len;
        const double* gsrc = g + ig * out_n * len;
        for (std::size_t r = 0; r < out_n; ++r) {
          const double* grow = gsrc + r * len;
          if (!gb.empty()) {
            double s = 0.0;
            for (std::size_t i = 0; i < len; ++i) s += grow[i];
            sb[r] += s;
          }
          for (std::size_t c = 0; c < in_n; ++c) {
            if (!gw.empty()) {
              const double* irow = src + c * len;
              double acc = 0.0;
              for (std::size_t i = 0; i < len; ++i) acc += grow[i] * irow[i];
              sw[r * in_n + c] += acc;
            }
            if (!gin.empty()) {
              const double wv = w[r * in_n + c];
              double* girow = gin.data() + ig * in_n * len + c * len;
              for (std::size_t i = 0; i < len; ++i) girow[i] += wv * grow[i];
            }
          }
        }
      }
      if (!gw.empty()) flush(gw, sw);
      if (!gb.empty()) flush(gb, sb);
    }
  };
  std::vector<Tensor> saved;
  if (record) saved.push_back(x.detached());
  return finish(tape, OpKind::linear, {&x}, std::move(params), record, std::move(out),
                std::move(saved), std::move(vjp));
}

Tensor group_norm(Tape& tape, const Tensor& x, const NormParams& p, std::size_t groups) {
  auto d = video_dims(x, "group_norm");
  if (groups == 0 || d.C % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(d.C) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  expect_shape(*p.gamma, {d.C}, "group_norm");
  expect_shape(*p.beta, {d.C}, "group_norm");
  constexpr double kEps = 1e-5;
  const std::size_t cg = d.C / groups;
  const std::size_t span_len = cg * d.hw();
  Tensor out(x.shape());
  Tensor mean({d.B, d.F, groups});
  Tensor inv_std({d.B, d.F, groups});
  auto o = out.mutable_data();
  auto mu = mean.mutable_data();
  auto is = inv_std.mutable_data();
  auto in = x.data();
  const double* gamma = p.gamma->value.data().data();
  const double* beta = p.beta->value.data().data();
  for (std::size_t bf = 0; bf < d.B * d.F; ++bf) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t off = bf * d.frame() + gi * span_len;
      const double* src = in.data() + off;
      // Group statistics shift every element of the span together, so their
      // rounding does not average out downstream.
      CompensatedSum s;
      for (std::size_t i = 0; i < span_len; ++i) s.add(src[i]);
      const double m = s.value() / static_cast<double>(span_len);
      CompensatedSum vs;
      for (std::size_t i = 0; i < span_len; ++i) vs.add((src[i] - m) * (src[i] - m));
      const double v = vs.value() / static_cast<double>(span_len);
      const double r = 1.0 / std::sqrt(v + kEps);
      mu[bf * groups + gi] = m;
      is[bf * groups + gi] = r;
      for (std::size_t cc = 0; cc < cg; ++cc) {
        const std::size_t c = gi * cg + cc;
        const double* xr = src + cc * d.hw();
        double* yr = o.data() + off + cc * d.hw();
        for (std::size_t i = 0; i < d.hw(); ++i) yr[i] = (xr[i] - m) * r * gamma[c] + beta[c];
      }
    }
  }
  std::vector<const Parameter*> params{p.gamma, p.beta};
  bool record = tape.needs_node(std::vector<const Tensor*>{&x}, params);
  VjpFn vjp = [d, groups, cg, span_len](const TapeNode& node, const Tensor& gout, VjpContext& ctx) {
    const double* in = node.saved[0].data().data();
    const double* mu = node.saved[1].data().data();
    const double* is = node.saved[2].data().data();
    const double* g = gout.data().data();
    const double* gamma = node.params[0]->value.data().data();
    auto gin = ctx.input_grad(0);
    auto ggamma = ctx.param_grad(0);
    auto gbeta = ctx.param_grad(1);
    std::vector<double> sg(ggamma.size(), 0.0), sb(gbeta.size(), 0.0);
    const std::size_t hw = d.hw();
    const double M = static_cast<double>(span_len);
    for (std::size_t bi = 0; bi < d.B; ++bi) {
      for (std::size_t f = 0; f < d.F; ++f) {
        const std::size_t bf = bi * d.F + f;
        for (std::size_t gi = 0; gi < groups; ++gi) {
          const std::size_t off = bf * d.frame() + gi * span_len;
          const double m = mu[bf * groups + gi];
          const double r = is[bf * groups + gi];
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (std::size_t cc = 0; cc < cg; ++cc) {
            const std::size_t c = gi * cg + cc;
            const double* xr = in + off + cc * hw;
            const double* gr = g + off + cc * hw;
            double sgc = 0.0, sbc = 0.0, sd = 0.0, sdx = 0.0;
            for (std::size_t i = 0; i < hw; ++i) {
              const double xhat = (xr[i] - m) * r;
              sgc += gr[i] * xhat;
              sbc += gr[i];
              sd += gr[i] * gamma[c];
              sdx += gr[i] * gamma[c] * xhat;
            }
            if (!ggamma.empty()) sg[c] += sgc;
            if (!gbeta.empty()) sb[c] += sbc;
            sum_dxhat += sd;
            sum_dxhat_xhat += sdx;
          }
          if (!gin.empty()) {
            for (std::size_t cc = 0; cc < cg; ++cc) {
              const std::size_t c = gi * cg + cc;
              const double* xr = in + off + cc * hw;
              const double* gr = g + off + cc * hw;
              double* dr = gin.data() + off + cc * hw;
              for (std::size_t i = 0; i < hw; ++i) {
                const double xhat = (xr[i] - m) * r;
                const double dxhat = gr[i] * gamma[c];
                dr[i] += r / M * (M * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
              }
            }
          }
        }
      }
      if (!ggamma.empty()) flush(ggamma, sg);
      if (!gbeta.empty()) flush(gbeta, sb);
    }
  };
  std::vector<Tensor> saved;
  if (record) {
    saved.push_back(x.detached());
    saved.push_back(mean);
    saved.push_back(inv_std);
  }
  return finish(tape, OpKind::group_norm, {&x}, std::move(params), record, std::move(out),
                std::move(saved), std::move(vjp));
}

Tensor silu(Tape& tape, const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] / (1.0 + std::exp(-in[i]));
  bool record = tape.needs_node(std::vector<const Tensor*>{&x}, {});
  VjpFn vjp = [](const TapeNode& node, const Tensor& gout, VjpContext& ctx) {
    auto gin = ctx.input_grad(0);
    if (gin.empty()) return;
    auto in = node.saved[0].data();
    auto g = gout.data();
    for (std::size_t i = 0; i < in.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-in[i]));
      gin[i] += g[i] * s * (1.0 + in[i] * (1.0 - s));
    }
  };
  std::vector<Tensor> saved;
  if (record) saved.push_back(x.detached());
  return finish(tape, OpKind::silu, {&x}, {}, record, std::move(out), std::move(saved),
                std::move(vjp));
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  bool broadcast = false;
  std::size_t B = 0, F = 0, C = 0, hw = 0;
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < x.size(); ++i) o[i] = x[i] + y[i];
  } else if (a.rank() == 5 && b.rank() == 2 && b.dim(0) == a.dim(0) && b.dim(1) == a.dim(2)) {
    broadcast = true;
    B = a.dim(0);
    F = a.dim(1);
    C = a.dim(2);
    hw = a.dim(3) * a.dim(4);
    for (std::size_t bi = 0; bi < B; ++bi) {
      for (std::size_t f = 0; f < F; ++f) {
        for (std::size_t c = 0; c < C; ++c) {
          const double bv = y[bi * C + c];
          const std::size_t off = ((bi * F + f) * C + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) o[off + i] = x[off + i] + bv;
        }
      }
    }
  } else {
    throw ShapeError("add: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  bool record = tape.needs_node(std::vector<const Tensor*>{&a, &b}, {});
  VjpFn vjp = [broadcast, B, F, C, hw](const TapeNode&, const Tensor& gout, VjpContext& ctx) {
    auto g = gout.data();
    auto ga = ctx.input_grad(0);
    if (!ga.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    auto gb = ctx.input_grad(1);
    if (gb.empty()) return;
    if (!broadcast) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      return;
    }
    for (std::size_t bi = 0; bi < B; ++bi) {
      for (std::size_t f = 0; f < F; ++f) {
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t off = ((bi * F + f) * C + c) * hw;
          double s = 0.0;
          for (std::size_t i = 0; i < hw; ++i) s += g[off + i];
          gb[bi * C + c] += s;
        }
      }
    }
  };
  return finish(tape, OpKind::add, {&a, &b}, {}, record, std::move(out), {}, std::move(vjp));
}

Tensor concat(Tape& tape, const Tensor& a, const Tensor& b) {
  auto da = video_dims(a, "concat");
  auto db = video_dims(b, "concat");
  if (da.B != db.B || da.F != db.F || da.H != db.H || da.W != db.W) {
    throw ShapeError("concat: operands " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " differ outside the channel axis");
  }
  const std::size_t C = da.C + db.C;
  Tensor out({da.B, da.F, C, da.H, da.W});
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  const std::size_t hw = da.hw();
  for (std::size_t bf = 0; bf < da.B * da.F; ++bf) {
    std::copy_n(x.data() + bf * da.C * hw, da.C * hw, o.data() + bf * C * hw);
    std::copy_n(y.data() + bf * db.C * hw, db.C * hw, o.data() + bf * C * hw + da.C * hw);
  }
  bool record = tape.needs_node(std::vector<const Tensor*>{&a, &b}, {});
  const std::size_t ca = da.C, cb = db.C, frames = da.B * da.F;
  VjpFn vjp = [ca, cb, C, hw, frames](const TapeNode&, const Tensor& gout, VjpContext& ctx) {
    auto g = gout.data();
    auto ga = ctx.input_grad(0);
    auto gb = ctx.input_grad(1);
    for (std::size_t bf = 0; bf < frames; ++bf) {
      const double* src = g.data() + bf * C * hw;
      if (!ga.empty()) {
        double* dst = ga.data() + bf * ca * hw;
        for (std::size_t i = 0; i < ca * hw; ++i) dst[i] += src[i];
      }
      if (!gb.empty()) {
        double* dst = gb.data() + bf * cb * hw;
        for (std::size_t i = 0; i < cb * hw; ++i) dst[i] += src[ca * hw + i];
      }
    }
  };
  return finish(tape, OpKind::concat, {&a, &b}, {}, record, std::move(out), {}, std::move(vjp));
}

Tensor resample(Tape& tape, const Tensor& x, ResampleMode mode) {
  auto d = video_dims(x, "resample");
  const std::size_t planes = d.B * d.F * d.C;
  Tensor out;
  std::size_t oh, ow;
  if (mode == ResampleMode::avg_pool2) {
    if (d.H % 2 || d.W % 2) {
      throw ShapeError("resample: avg_pool2 needs even height and width, got " + shape_str(x.shape()));
    }
    oh = d.H / 2;
    ow = d.W / 2;
  } else {
    oh = d.H * 2;
    ow = d.W * 2;
  }
  out = Tensor({d.B, d.F, d.C, oh, ow});
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const double* src = in.data() + pl * d.hw();
    double* dst = o.data() + pl * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        if (mode == ResampleMode::avg_pool2) {
          const double* r0 = src + (2 * y) * d.W + 2 * xx;
          const double* r1 = r0 + d.W;
          dst[y * ow + xx] = 0.25 * (r0[0] + r0[1] + r1[0] + r1[1]);
        } else {
          dst[y * ow + xx] = src[(y / 2) * d.W + xx / 2];
        }
      }
    }
  }
  bool record = tape.needs_node(std::vector<const Tensor*>{&x}, {});
  const std::size_t H = d.H, W = d.W;
  VjpFn vjp = [mode, planes, H, W, oh, ow](const TapeNode&, const Tensor& gout, VjpContext& ctx) {
    auto gin = ctx.input_grad(0);
    if (gin.empty()) return;
    auto g = gout.data();
    for (std::size_t pl = 0; pl < planes; ++pl) {
      const double* gsrc = g.data() + pl * oh * ow;
      double* dst = gin.data() + pl * H * W;
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const double gv = gsrc[y * ow + xx];
          if (mode == ResampleMode::avg_pool2) {
            double* r0 = dst + (2 * y) * W + 2 * xx;
            double* r1 = r0 + W;
            r0[0] += 0.25 * gv;
            r0[1] += 0.25 * gv;
            r1[0] += 0.25 * gv;
            r1[1] += 0.25 * gv;
          } else {
            dst[(y / 2) * W + xx / 2] += gv;
          }
        }
      }
    }
  };
  return finish(tape, OpKind::resample, {&x}, {}, record, std::move(out), {}, std::move(vjp));
}

Tensor embed(Tape& tape, const Parameter& table, const std::vector<std::size_t>& ids) {
  const auto& ts = table.value.shape();
  if (ts.size() != 2) throw ShapeError("embed: table " + table.name + " must be rank 2");
  if (ids.empty()) throw ShapeError("embed: empty id list");
  const std::size_t V = ts[0], D = ts[1];
  Tensor out({ids.size(), D});
  auto o = out.mutable_data();
  auto t = table.value.data();
  for (std::size_t n = 0; n < ids.size(); ++n) {
    if (ids[n] >= V) {
      throw std::out_of_range("embed: id " + std::to_string(ids[n]) + " outside vocabulary of " +
                              std::to_string(V));
    }
    std::copy_n(t.data() + ids[n] * D, D, o.data() + n * D);
  }
  std::vector<const Parameter*> params{&table};
  bool record = tape.needs_node({}, params);
  VjpFn vjp = [ids, D](const TapeNode&, const Tensor& gout, VjpContext& ctx) {
    auto gt = ctx.param_grad(0);
    if (gt.empty()) return;
    auto g = gout.data();
    for (std::size_t n = 0; n < ids.size(); ++n) {
      for (std::size_t j = 0; j < D; ++j) gt[ids[n] * D + j] += g[n * D + j];
    }
  };
  return finish(tape, OpKind::embed, {}, std::move(params), record, std::move(out), {},
                std::move(vjp));
}

Tensor reduce_mean_sq(Tape& tape, const Tensor& x, const Tensor& target, double scale) {
  if (x.shape() != target.shape()) {
    throw ShapeError("reduce_mean_sq: prediction " + shape_str(x.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
  Tensor diff(x.shape());
  auto dd = diff.mutable_data();
  auto a = x.data();
  auto b = target.data();
  // Neumaier summation: finite-difference checks resolve loss changes far
  // below the rounding error of a plain running sum.
  CompensatedSum s;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dd[i] = a[i] - b[i];
    s.add(dd[i] * dd[i]);
  }
  Tensor out = Tensor::scalar(scale * s.value());
  bool record = tape.needs_node(std::vector<const Tensor*>{&x}, {});
  VjpFn vjp = [scale](const TapeNode& node, const Tensor& gout, VjpContext& ctx) {
    auto gin = ctx.input_grad(0);
    if (gin.empty()) return;
    const double k = 2.0 * scale * gout.item();
    auto dd = node.saved[0].data();
    for (std::size_t i = 0; i < dd.size(); ++i) gin[i] += k * dd[i];
  };
  std::vector<Tensor> saved;
  if (record) saved.push_back(diff);
  // `target` is a constant and never gets a tape slot.
  return finish(tape, OpKind::reduce_mean_sq, {&x}, {}, record, std::move(out), std::move(saved),
                std::move(vjp));
}

Tensor timestep_features(const std::vector<std::size_t>& timesteps, std::size_t dim) {
  if (dim < 2 || dim % 2) throw ShapeError("timestep_features: dim must be even and >= 2");
  if (timesteps.empty()) throw ShapeError("timestep_features: empty timestep list");
  const std::size_t half = dim / 2;
  Tensor out({timesteps.size(), dim});
  auto o = out.mutable_data();
  for (std::size_t n = 0; n < timesteps.size(); ++n) {
    const double t = static_cast<double>(timesteps[n]);
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      o[n * dim + k] = std::sin(t * freq);
      o[n * dim + half + k] = std::cos(t * freq);
    }
  }
  return out;
}

}  // namespace stp
