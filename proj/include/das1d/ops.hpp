#pragma once

// Differentiable tensor operations. Each op computes its value eagerly and,
// when any input is tracked, records a closure with the analytic
// vector-Jacobian product. Layout is row-major [batch, channel, length].
//
// The K=3 convolution paths and the reduction helpers are written with
// unrolled accumulator lanes so they vectorize without relaxed FP semantics
// (summation order is fixed, results stay bit-deterministic).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "das1d/tape.hpp"
#include "das1d/tensor.hpp"

namespace das1d {

namespace detail {

inline double sum_lanes(const double* a, long n) {
  double s[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  long i = 0;
  for (; i + 8 <= n; i += 8)
    for (int u = 0; u < 8; ++u) s[u] += a[i + u];
  double tail = 0.0;
  for (; i < n; ++i) tail += a[i];
  return ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7])) +
         tail;
}

inline double dot_lanes(const double* a, const double* b, long n) {
  double s[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  long i = 0;
  for (; i + 8 <= n; i += 8)
    for (int u = 0; u < 8; ++u) s[u] += a[i + u] * b[i + u];
  double tail = 0.0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7])) +
         tail;
}

inline void sum_sumsq_lanes(const double* a, long n, double& sum,
                            double& sumsq) {
  double s[8] = {0, 0, 0, 0, 0, 0, 0, 0}, q[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  long i = 0;
  for (; i + 8 <= n; i += 8)
    for (int u = 0; u < 8; ++u) {
      const double v = a[i + u];
      s[u] += v;
      q[u] += v * v;
    }
  for (; i < n; ++i) {
    const double v = a[i];
    s[0] += v;
    q[0] += v * v;
  }
  sum = ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]));
  sumsq = ((q[0] + q[1]) + (q[2] + q[3])) + ((q[4] + q[5]) + (q[6] + q[7]));
}

// sum(g) and sum(g*x) over one row, with g masked to zero where o <= 0.
inline void masked_sum_dot_lanes(const double* g, const double* o,
                                 const double* x, long n, double& sg,
                                 double& sgx) {
  double s[4] = {0, 0, 0, 0}, t[4] = {0, 0, 0, 0};
  long i = 0;
  for (; i + 4 <= n; i += 4)
    for (int u = 0; u < 4; ++u) {
      const double ge = o[i + u] > 0.0 ? g[i + u] : 0.0;
      s[u] += ge;
      t[u] += ge * x[i + u];
    }
  for (; i < n; ++i) {
    const double ge = o[i] > 0.0 ? g[i] : 0.0;
    s[0] += ge;
    t[0] += ge * x[i];
  }
  sg = (s[0] + s[1]) + (s[2] + s[3]);
  sgx = (t[0] + t[1]) + (t[2] + t[3]);
}

// Single-row 3-tap same-pad kernels (L >= 2). The K=3 convolutions and the
// fused conv block are assembled from these.
inline void k3_row_fwd_set(const double* x, double w0, double w1, double w2,
                           double bv, double* y, long L) {
  y[0] = bv + w1 * x[0] + w2 * x[1];
  for (long i = 1; i < L - 1; ++i)
    y[i] = bv + w0 * x[i - 1] + w1 * x[i] + w2 * x[i + 1];
  y[L - 1] = bv + w0 * x[L - 2] + w1 * x[L - 1];
}

inline void k3_row_fwd_add(const double* x, double w0, double w1, double w2,
                           double* y, long L) {
  y[0] += w1 * x[0] + w2 * x[1];
  for (long i = 1; i < L - 1; ++i)
    y[i] += w0 * x[i - 1] + w1 * x[i] + w2 * x[i + 1];
  y[L - 1] += w0 * x[L - 2] + w1 * x[L - 1];
}

// Transpose (input gradient) of the forward row: dx[j] gets the mirrored taps.
inline void k3_row_igrad_set(const double* g, double w0, double w1, double w2,
                             double* dx, long L) {
  dx[0] = w1 * g[0] + w0 * g[1];
  for (long j = 1; j < L - 1; ++j)
    dx[j] = w2 * g[j - 1] + w1 * g[j] + w0 * g[j + 1];
  dx[L - 1] = w2 * g[L - 2] + w1 * g[L - 1];
}

inline void k3_row_igrad_add(const double* g, double w0, double w1, double w2,
                             double* dx, long L) {
  dx[0] += w1 * g[0] + w0 * g[1];
  for (long j = 1; j < L - 1; ++j)
    dx[j] += w2 * g[j - 1] + w1 * g[j] + w0 * g[j + 1];
  dx[L - 1] += w2 * g[L - 2] + w1 * g[L - 1];
}

// dw[k] += sum_j g[j] * x[j+k-1] over the valid range, 8 accumulator lanes.
inline void k3_row_wgrad_add(const double* g, const double* x, long L,
                             double* dw) {
  double a0[8] = {0, 0, 0, 0, 0, 0, 0, 0}, a1[8] = {0, 0, 0, 0, 0, 0, 0, 0},
         a2[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  long i = 1;
  for (; i + 8 <= L - 1; i += 8)
    for (int u = 0; u < 8; ++u) {
      const double gi = g[i + u];
      a0[u] += gi * x[i + u - 1];
      a1[u] += gi * x[i + u];
      a2[u] += gi * x[i + u + 1];
    }
  for (; i < L - 1; ++i) {
    const double gi = g[i];
    a0[0] += gi * x[i - 1];
    a1[0] += gi * x[i];
    a2[0] += gi * x[i + 1];
  }
  a1[0] += g[0] * x[0];
  a2[0] += g[0] * x[1];
  a0[0] += g[L - 1] * x[L - 2];
  a1[0] += g[L - 1] * x[L - 1];
  dw[0] += ((a0[0] + a0[1]) + (a0[2] + a0[3])) +
           ((a0[4] + a0[5]) + (a0[6] + a0[7]));
  dw[1] += ((a1[0] + a1[1]) + (a1[2] + a1[3])) +
           ((a1[4] + a1[5]) + (a1[6] + a1[7]));
  dw[2] += ((a2[0] + a2[1]) + (a2[2] + a2[3])) +
           ((a2[4] + a2[5]) + (a2[6] + a2[7]));
}

// y[b,o,i] = bias[o] + sum_{c,k} w[o,c,k] * x[b,c,i+k-K/2], zero padded.
// Single-pass form for the K=3 blocks used everywhere in the models.
inline void conv1d_k3(const double* x, const double* w, const double* bias,
                      double* y, long B, long Ci, long Co, long L) {
  for (long b = 0; b < B; ++b) {
    for (long o = 0; o < Co; ++o) {
      double* yp = y + (b * Co + o) * L;
      const double bv = bias != nullptr ? bias[o] : 0.0;
      const double* xp = x + b * Ci * L;
      const double* wp = w + o * Ci * 3;
      k3_row_fwd_set(xp, wp[0], wp[1], wp[2], bv, yp, L);
      for (long c = 1; c < Ci; ++c)
        k3_row_fwd_add(xp + c * L, wp[c * 3], wp[c * 3 + 1], wp[c * 3 + 2], yp,
                       L);
    }
  }
}

inline void conv1d_raw(const double* x, const double* w, const double* bias,
                       double* y, long B, long Ci, long Co, long L, long K) {
  if (K == 3 && L >= 2) {
    conv1d_k3(x, w, bias, y, B, Ci, Co, L);
    return;
  }
  const long h = K / 2;
  for (long b = 0; b < B; ++b) {
    for (long o = 0; o < Co; ++o) {
      double* yp = y + (b * Co + o) * L;
      const double bv = bias != nullptr ? bias[o] : 0.0;
      for (long i = 0; i < L; ++i) yp[i] = bv;
      for (long c = 0; c < Ci; ++c) {
        const double* xp = x + (b * Ci + c) * L;
        const double* wp = w + (o * Ci + c) * K;
        for (long k = 0; k < K; ++k) {
          const double wk = wp[k];
          const long off = k - h;
          const long lo = std::max(0L, -off);
          const long hi = std::min(L, L - off);
          for (long i = lo; i < hi; ++i) yp[i] += wk * xp[i + off];
        }
      }
    }
  }
}

// dx[b,c,j] += sum_{o,k} w[o,c,k] * gy[b,o,j+K/2-k]  (transpose of forward)
inline void conv1d_input_grad(const double* gy, const double* w, double* dx,
                              long B, long Ci, long Co, long L, long K) {
  if (K == 3 && L >= 2) {
    for (long b = 0; b < B; ++b)
      for (long c = 0; c < Ci; ++c) {
        double* dxp = dx + (b * Ci + c) * L;
        for (long o = 0; o < Co; ++o) {
          const double* gp = gy + (b * Co + o) * L;
          const double* wp = w + (o * Ci + c) * 3;
          k3_row_igrad_add(gp, wp[0], wp[1], wp[2], dxp, L);
        }
      }
    return;
  }
  const long h = K / 2;
  for (long b = 0; b < B; ++b) {
    for (long c = 0; c < Ci; ++c) {
      double* dxp = dx + (b * Ci + c) * L;
      for (long o = 0; o < Co; ++o) {
        const double* gp = gy + (b * Co + o) * L;
        const double* wp = w + (o * Ci + c) * K;
        for (long k = 0; k < K; ++k) {
          const double wk = wp[k];
          const long off = h - k;
          const long lo = std::max(0L, -off);
          const long hi = std::min(L, L - off);
          for (long j = lo; j < hi; ++j) dxp[j] += wk * gp[j + off];
        }
      }
    }
  }
}

inline void conv1d_weight_grad(const double* gy, const double* x, double* dw,
                               double* db, long B, long Ci, long Co, long L,
                               long K) {
  if (K == 3 && L >= 2) {
    for (long b = 0; b < B; ++b)
      for (long o = 0; o < Co; ++o) {
        const double* gp = gy + (b * Co + o) * L;
        if (db != nullptr) db[o] += sum_lanes(gp, L);
        for (long c = 0; c < Ci; ++c)
          k3_row_wgrad_add(gp, x + (b * Ci + c) * L, L,
                           dw + (o * Ci + c) * 3);
      }
    return;
  }
  const long h = K / 2;
  for (long b = 0; b < B; ++b) {
    for (long o = 0; o < Co; ++o) {
      const double* gp = gy + (b * Co + o) * L;
      if (db != nullptr) db[o] += sum_lanes(gp, L);
      for (long c = 0; c < Ci; ++c) {
        const double* xp = x + (b * Ci + c) * L;
        double* dwp = dw + (o * Ci + c) * K;
        for (long k = 0; k < K; ++k) {
          const long off = k - h;
          const long lo = std::max(0L, -off);
          const long hi = std::min(L, L - off);
          dwp[k] += dot_lanes(gp + lo, xp + lo + off, hi - lo);
        }
      }
    }
  }
}

inline void accumulate(std::vector<double>& dst, const std::vector<double>& g,
                       double scale = 1.0) {
  double* d = dst.data();
  const double* s = g.data();
  const long n = static_cast<long>(dst.size());
  for (long i = 0; i < n; ++i) d[i] += scale * s[i];
}

}  // namespace detail

// Same-length 1D convolution with zero padding. x:[B,Ci,L] w:[Co,Ci,K] b:[Co].
inline Tensor conv1d(Tape& tape, const Tensor& x, const Tensor& w,
                     const Tensor& b) {
  if (x.shape.rank != 3 || w.shape.rank != 3 || b.shape.rank != 1)
    throw std::invalid_argument("conv1d: expected x rank 3, w rank 3, b rank 1");
  const long B = x.shape[0], Ci = x.shape[1], L = x.shape[2];
  const long Co = w.shape[0], K = w.shape[2];
  if (w.shape[1] != Ci)
    throw std::invalid_argument("conv1d: weight input channels " +
                                std::to_string(w.shape[1]) +
                                " do not match x channels " + std::to_string(Ci));
  if (b.shape[0] != Co)
    throw std::invalid_argument("conv1d: bias size does not match out channels");
  if (K % 2 == 0) throw std::invalid_argument("conv1d: kernel size must be odd");

  SharedVec out = tape.alloc(B * Co * L);
  detail::conv1d_raw(x.ptr(), w.ptr(), b.ptr(), out->data(), B, Ci, Co, L, K);
  Tensor y(Shape{B, Co, L}, out);
  if (!tape.tracking({&x, &w, &b})) return y;

  std::vector<int> parents;
  for (const Tensor* t : {&x, &w, &b})
    if (t->tracked()) parents.push_back(t->node);
  const int xn = x.node, wn = w.node, bn = b.node;
  SharedVec xd = x.data, wd = w.data;
  y.node = tape.add_node(
      y.numel(), parents,
      [=](Tape& t, const std::vector<double>& g) {
        if (xn >= 0)
          detail::conv1d_input_grad(g.data(), wd->data(),
                                    t.grad_of(xn).data(), B, Ci, Co, L, K);
        if (wn >= 0 || bn >= 0) {
          std::vector<double> dw_local;
          double* dwp = nullptr;
          if (wn >= 0) dwp = t.grad_of(wn).data();
          else { dw_local.assign(static_cast<std::size_t>(Co * Ci * K), 0.0); dwp = dw_local.data(); }
          double* dbp = bn >= 0 ? t.grad_of(bn).data() : nullptr;
          detail::conv1d_weight_grad(g.data(), xd->data(), dwp, dbp, B, Ci, Co,
                                     L, K);
        }
      });
  return y;
}

namespace detail {

// Per-channel mean and 1/sqrt(var+eps) over (batch, length), biased variance,
// traversing x in memory order.
inline void bn_stats(const double* xp, long B, long C, long L, double eps,
                     std::vector<double>& mean, std::vector<double>& inv_s) {
  const auto cs = static_cast<std::size_t>(C);
  const double m = static_cast<double>(B * L);
  std::vector<double> sum(cs, 0.0), sumsq(cs, 0.0);
  for (long b = 0; b < B; ++b)
    for (long c = 0; c < C; ++c) {
      double rs = 0.0, rq = 0.0;
      sum_sumsq_lanes(xp + (b * C + c) * L, L, rs, rq);
      sum[static_cast<std::size_t>(c)] += rs;
      sumsq[static_cast<std::size_t>(c)] += rq;
    }
  mean.resize(cs);
  inv_s.resize(cs);
  for (std::size_t c = 0; c < cs; ++c) {
    mean[c] = sum[c] / m;
    const double var = std::max(0.0, sumsq[c] / m - mean[c] * mean[c]);
    inv_s[c] = 1.0 / std::sqrt(var + eps);
  }
}

// Shared reverse pass for batchnorm and batchnorm+relu. `masked` applies the
// relu gate (upstream gradient zeroed where the saved output is <= 0). The
// per-channel reductions use sum(g*h) = inv_s * (sum(g*x) - mean*sum(g)), so
// the normalized values are never materialized.
inline void bn_backward(Tape& t, const std::vector<double>& g,
                        const SharedVec& xd, const SharedVec& od, bool masked,
                        const std::vector<double>& mean,
                        const std::vector<double>& inv_s, const SharedVec& gd,
                        long B, long C, long L, int xn, int gn, int bn) {
  const auto cs = static_cast<std::size_t>(C);
  const double m = static_cast<double>(B * L);
  std::vector<double> sg(cs, 0.0), sgx(cs, 0.0);
  const double* xp = xd->data();
  for (long b = 0; b < B; ++b)
    for (long c = 0; c < C; ++c) {
      const long off = (b * C + c) * L;
      double rs = 0.0, rt = 0.0;
      if (masked)
        masked_sum_dot_lanes(g.data() + off, od->data() + off, xp + off, L, rs,
                             rt);
      else {
        rs = sum_lanes(g.data() + off, L);
        rt = dot_lanes(g.data() + off, xp + off, L);
      }
      sg[static_cast<std::size_t>(c)] += rs;
      sgx[static_cast<std::size_t>(c)] += rt;
    }
  std::vector<double> sgh(cs);
  for (std::size_t c = 0; c < cs; ++c)
    sgh[c] = inv_s[c] * (sgx[c] - mean[c] * sg[c]);
  if (bn >= 0) {
    auto& db = t.grad_of(bn);
    for (std::size_t c = 0; c < cs; ++c) db[c] += sg[c];
  }
  if (gn >= 0) {
    auto& dg = t.grad_of(gn);
    for (std::size_t c = 0; c < cs; ++c) dg[c] += sgh[c];
  }
  if (xn < 0) return;
  // dx = k*(ge - mean(ge) - h*mean(ge*h)) with h = (x-mu)*is, folded into
  // dx[i] += c1*ge[i] + c2*x[i] + c3 so the row loop is a pair of fmas.
  std::vector<double> c1(cs), c2(cs), c3(cs);
  for (std::size_t c = 0; c < cs; ++c) {
    const double k = (*gd)[c] * inv_s[c];
    const double mg = sg[c] / m;
    const double mgh = sgh[c] / m;
    c1[c] = k;
    c2[c] = -k * inv_s[c] * mgh;
    c3[c] = -k * mg - c2[c] * mean[c];
  }
  auto& dx = t.grad_of(xn);
  for (long b = 0; b < B; ++b)
    for (long c = 0; c < C; ++c) {
      const long off = (b * C + c) * L;
      const double* grow = g.data() + off;
      const double* xrow = xp + off;
      double* drow = dx.data() + off;
      const double k1 = c1[static_cast<std::size_t>(c)];
      const double k2 = c2[static_cast<std::size_t>(c)];
      const double k3 = c3[static_cast<std::size_t>(c)];
      if (masked) {
        const double* orow = od->data() + off;
        for (long i = 0; i < L; ++i) {
          const double ge = orow[i] > 0.0 ? grow[i] : 0.0;
          drow[i] += k1 * ge + k2 * xrow[i] + k3;
        }
      } else {
        for (long i = 0; i < L; ++i)
          drow[i] += k1 * grow[i] + k2 * xrow[i] + k3;
      }
    }
}

inline void bn_check_shapes(const Tensor& x, const Tensor& gamma,
                            const Tensor& beta, const char* what) {
  if (x.shape.rank != 3 || gamma.shape.rank != 1 || beta.shape.rank != 1)
    throw std::invalid_argument(std::string(what) +
                                ": expected x rank 3, gamma/beta rank 1");
  const long C = x.shape[1];
  if (gamma.shape[0] != C || beta.shape[0] != C)
    throw std::invalid_argument(std::string(what) +
                                ": gamma/beta size must equal channels");
  if (x.shape[0] * x.shape[2] < 2)
    throw std::invalid_argument(std::string(what) +
                                ": needs at least 2 values per channel");
}

}  // namespace detail

// Batch normalization over (batch, length) per channel, biased variance.
inline Tensor batchnorm1d(Tape& tape, const Tensor& x, const Tensor& gamma,
                          const Tensor& beta, double eps = 1e-5) {
  detail::bn_check_shapes(x, gamma, beta, "batchnorm1d");
  const long B = x.shape[0], C = x.shape[1], L = x.shape[2];

  std::vector<double> mean, inv_s;
  detail::bn_stats(x.ptr(), B, C, L, eps, mean, inv_s);
  SharedVec out = tape.alloc(x.numel());
  const double* xp = x.ptr();
  const double* gp = gamma.ptr();
  const double* bp = beta.ptr();
  for (long b = 0; b < B; ++b)
    for (long c = 0; c < C; ++c) {
      const double mu = mean[static_cast<std::size_t>(c)];
      const double is = inv_s[static_cast<std::size_t>(c)];
      const double gc = gp[c], bc = bp[c];
      const double* row = xp + (b * C + c) * L;
      double* orow = out->data() + (b * C + c) * L;
      for (long i = 0; i < L; ++i) orow[i] = gc * ((row[i] - mu) * is) + bc;
    }
  Tensor y(x.shape, out);
  if (!tape.tracking({&x, &gamma, &beta})) return y;

  std::vector<int> parents;
  for (const Tensor* t : {&x, &gamma, &beta})
    if (t->tracked()) parents.push_back(t->node);
  const int xn = x.node, gn = gamma.node, bn = beta.node;
  SharedVec gd = gamma.data, xd = x.data;
  y.node = tape.add_node(
      y.numel(), parents,
      [=](Tape& t, const std::vector<double>& g) {
        detail::bn_backward(t, g, xd, nullptr, false, mean, inv_s, gd, B, C, L,
                            xn, gn, bn);
      });
  return y;
}

// batchnorm1d followed by relu as one op. The conv blocks always use the
// pair, and fusing it keeps one intermediate off the tape.
inline Tensor batchnorm_relu(Tape& tape, const Tensor& x, const Tensor& gamma,
                             const Tensor& beta, double eps = 1e-5) {
  detail::bn_check_shapes(x, gamma, beta, "batchnorm_relu");
  const long B = x.shape[0], C = x.shape[1], L = x.shape[2];

  std::vector<double> mean, inv_s;
  detail::bn_stats(x.ptr(), B, C, L, eps, mean, inv_s);
  SharedVec out = tape.alloc(x.numel());
  const double* xp = x.ptr();
  const double* gp = gamma.ptr();
  const double* bp = beta.ptr();
  for (long b = 0; b < B; ++b)
    for (long c = 0; c < C; ++c) {
      const double mu = mean[static_cast<std::size_t>(c)];
      const double is = inv_s[static_cast<std::size_t>(c)];
      const double gc = gp[c], bc = bp[c];
      const double* row = xp + (b * C + c) * L;
      double* orow = out->data() + (b * C + c) * L;
      for (long i = 0; i < L; ++i) {
        const double v = gc * ((row[i] - mu) * is) + bc;
        orow[i] = v > 0.0 ? v : 0.0;
      }
    }
  Tensor y(x.shape, out);
  if (!tape.tracking({&x, &gamma, &beta})) return y;

  std::vector<int> parents;
  for (const Tensor* t : {&x, &gamma, &beta})
    if (t->tracked()) parents.push_back(t->node);
  const int xn = x.node, gn = gamma.node, bn = beta.node;
  SharedVec gd = gamma.data, xd = x.data;
  y.node = tape.add_node(
      y.numel(), parents,
      [=](Tape& t, const std::vector<double>& g) {
        detail::bn_backward(t, g, xd, out, true, mean, inv_s, gd, B, C, L, xn,
                            gn, bn);
      });
  return y;
}

inline Tensor relu(Tape& tape, const Tensor& x) {
  SharedVec out = tape.alloc(x.numel());
  const double* xp = x.ptr();
  double* yp = out->data();
  const long n = x.numel();
  for (long i = 0; i < n; ++i) yp[i] = xp[i] > 0.0 ? xp[i] : 0.0;
  Tensor y(x.shape, out);
  if (!tape.tracking({&x})) return y;
  const int xn = x.node;
  SharedVec xd = x.data;
  int parents[] = {xn};
  y.node = tape.add_node(y.numel(), parents,
                         [=](Tape& t, const std::vector<double>& g) {
                           double* dx = t.grad_of(xn).data();
                           const double* xv = xd->data();
                           const double* gv = g.data();
                           const long nn = static_cast<long>(g.size());
                           for (long i = 0; i < nn; ++i)
                             dx[i] += xv[i] > 0.0 ? gv[i] : 0.0;
                         });
  return y;
}

namespace detail {

template <class Fwd, class Bwd>
Tensor binary_elementwise(Tape& tape, const Tensor& a, const Tensor& b,
                          const char* name, Fwd&& fwd, Bwd&& bwd) {
  check_same_shape(a, b, name);
  SharedVec out = tape.alloc(a.numel());
  fwd(a.ptr(), b.ptr(), out->data(), a.numel());
  Tensor y(a.shape, out);
  if (!tape.tracking({&a, &b})) return y;
  std::vector<int> parents;
  if (a.tracked()) parents.push_back(a.node);
  if (b.tracked()) parents.push_back(b.node);
  y.node = tape.add_node(y.numel(), parents, bwd(a, b));
  return y;
}

}  // namespace detail

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      tape, a, b, "add",
      [](const double* ap, const double* bp, double* yp, long n) {
        for (long i = 0; i < n; ++i) yp[i] = ap[i] + bp[i];
      },
      [](const Tensor& a, const Tensor& b) {
        const int an = a.node, bn = b.node;
        return [an, bn](Tape& t, const std::vector<double>& g) {
          if (an >= 0) detail::accumulate(t.grad_of(an), g);
          if (bn >= 0) detail::accumulate(t.grad_of(bn), g);
        };
      });
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      tape, a, b, "sub",
      [](const double* ap, const double* bp, double* yp, long n) {
        for (long i = 0; i < n; ++i) yp[i] = ap[i] - bp[i];
      },
      [](const Tensor& a, const Tensor& b) {
        const int an = a.node, bn = b.node;
        return [an, bn](Tape& t, const std::vector<double>& g) {
          if (an >= 0) detail::accumulate(t.grad_of(an), g);
          if (bn >= 0) detail::accumulate(t.grad_of(bn), g, -1.0);
        };
      });
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      tape, a, b, "mul",
      [](const double* ap, const double* bp, double* yp, long n) {
        for (long i = 0; i < n; ++i) yp[i] = ap[i] * bp[i];
      },
      [](const Tensor& a, const Tensor& b) {
        const int an = a.node, bn = b.node;
        SharedVec ad = a.data, bd = b.data;
        return [an, bn, ad, bd](Tape& t, const std::vector<double>& g) {
          const long n = static_cast<long>(g.size());
          if (an >= 0) {
            double* da = t.grad_of(an).data();
            const double* bv = bd->data();
            for (long i = 0; i < n; ++i) da[i] += g[static_cast<std::size_t>(i)] * bv[i];
          }
          if (bn >= 0) {
            double* db = t.grad_of(bn).data();
            const double* av = ad->data();
            for (long i = 0; i < n; ++i) db[i] += g[static_cast<std::size_t>(i)] * av[i];
          }
        };
      });
}

inline Tensor scale(Tape& tape, const Tensor& x, double c) {
  SharedVec out = tape.alloc(x.numel());
  const double* xp = x.ptr();
  double* yp = out->data();
  const long n = x.numel();
  for (long i = 0; i < n; ++i) yp[i] = c * xp[i];
  Tensor y(x.shape, out);
  if (!tape.tracking({&x})) return y;
  const int xn = x.node;
  int parents[] = {xn};
  y.node = tape.add_node(y.numel(), parents,
                         [xn, c](Tape& t, const std::vector<double>& g) {
                           detail::accumulate(t.grad_of(xn), g, c);
                         });
  return y;
}

// y = s * x where s has one element (a learnable step size).
inline Tensor scale_by(Tape& tape, const Tensor& s, const Tensor& x) {
  if (s.numel() != 1)
    throw std::invalid_argument("scale_by: scale must have one element");
  const double sv = (*s.data)[0];
  SharedVec out = tape.alloc(x.numel());
  const double* xp = x.ptr();
  double* yp = out->data();
  const long n = x.numel();
  for (long i = 0; i < n; ++i) yp[i] = sv * xp[i];
  Tensor y(x.shape, out);
  if (!tape.tracking({&s, &x})) return y;
  std::vector<int> parents;
  if (s.tracked()) parents.push_back(s.node);
  if (x.tracked()) parents.push_back(x.node);
  const int sn = s.node, xn = x.node;
  SharedVec xd = x.data;
  y.node = tape.add_node(
      y.numel(), parents, [sn, xn, sv, xd](Tape& t, const std::vector<double>& g) {
        if (sn >= 0)
          t.grad_of(sn)[0] +=
              detail::dot_lanes(g.data(), xd->data(),
                                static_cast<long>(g.size()));
        if (xn >= 0) detail::accumulate(t.grad_of(xn), g, sv);
      });
  return y;
}

// Circular shift along the length axis: y[...,i] = x[...,(i - shift) mod L].
inline Tensor circular_shift(Tape& tape, const Tensor& x, long shift) {
  if (x.shape.rank != 3)
    throw std::invalid_argument("circular_shift: expected rank 3");
  const long B = x.shape[0], C = x.shape[1], L = x.shape[2];
  const long s = ((shift % L) + L) % L;
  SharedVec out = tape.alloc(x.numel());
  const double* xp = x.ptr();
  for (long r = 0; r < B * C; ++r) {
    const double* row = xp + r * L;
    double* orow = out->data() + r * L;
    // y[0..s) = x[L-s..L), y[s..L) = x[0..L-s)
    std::copy_n(row + (L - s), s, orow);
    std::copy_n(row, L - s, orow + s);
  }
  Tensor y(x.shape, out);
  if (!tape.tracking({&x})) return y;
  const int xn = x.node;
  int parents[] = {xn};
  y.node = tape.add_node(y.numel(), parents,
                         [xn, B, C, L, s](Tape& t, const std::vector<double>& g) {
                           auto& dx = t.grad_of(xn);
                           for (long r = 0; r < B * C; ++r) {
                             const double* grow = g.data() + r * L;
                             double* drow = dx.data() + r * L;
                             for (long i = 0; i < s; ++i)
                               drow[L - s + i] += grow[i];
                             for (long i = s; i < L; ++i)
                               drow[i - s] += grow[i];
                           }
                         });
  return y;
}

// Mean squared error over all elements; returns a scalar tensor.
inline Tensor mse(Tape& tape, const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "mse");
  const long n = pred.numel();
  const double* pp = pred.ptr();
  const double* tp = target.ptr();
  double s[4] = {0, 0, 0, 0};
  long i = 0;
  for (; i + 4 <= n; i += 4)
    for (int u = 0; u < 4; ++u) {
      const double d = pp[i + u] - tp[i + u];
      s[u] += d * d;
    }
  double tail = 0.0;
  for (; i < n; ++i) {
    const double d = pp[i] - tp[i];
    tail += d * d;
  }
  const double acc = (s[0] + s[1]) + (s[2] + s[3]) + tail;
  SharedVec out = tape.alloc(1);
  (*out)[0] = acc / static_cast<double>(n);
  Tensor y(Shape{}, out);
  if (!tape.tracking({&pred, &target})) return y;
  std::vector<int> parents;
  if (pred.tracked()) parents.push_back(pred.node);
  if (target.tracked()) parents.push_back(target.node);
  const int pn = pred.node, tn = target.node;
  SharedVec pd = pred.data, td = target.data;
  y.node = tape.add_node(
      1, parents, [pn, tn, pd, td, n](Tape& t, const std::vector<double>& g) {
        const double k = 2.0 * g[0] / static_cast<double>(n);
        const double* pv = pd->data();
        const double* tv = td->data();
        if (pn >= 0) {
          double* dp = t.grad_of(pn).data();
          for (long i = 0; i < n; ++i) dp[i] += k * (pv[i] - tv[i]);
        }
        if (tn >= 0) {
          double* dt = t.grad_of(tn).data();
          for (long i = 0; i < n; ++i) dt[i] -= k * (pv[i] - tv[i]);
        }
      });
  return y;
}

// Numerically stable softmax over a rank-1 tensor.
inline Tensor softmax_vec(Tape& tape, const Tensor& logits) {
  if (logits.shape.rank != 1)
    throw std::invalid_argument("softmax_vec: expected rank 1");
  const long n = logits.numel();
  SharedVec out = tape.alloc(n);
  const double* xp = logits.ptr();
  double mx = xp[0];
  for (long i = 1; i < n; ++i) mx = std::max(mx, xp[i]);
  double z = 0.0;
  for (long i = 0; i < n; ++i) {
    const double e = std::exp(xp[i] - mx);
    (*out)[static_cast<std::size_t>(i)] = e;
    z += e;
  }
  for (long i = 0; i < n; ++i) (*out)[static_cast<std::size_t>(i)] /= z;
  Tensor y(logits.shape, out);
  if (!tape.tracking({&logits})) return y;
  const int xn = logits.node;
  int parents[] = {xn};
  y.node = tape.add_node(n, parents,
                         [xn, out, n](Tape& t, const std::vector<double>& g) {
                           double dot = 0.0;
                           for (long i = 0; i < n; ++i)
                             dot += g[static_cast<std::size_t>(i)] *
                                    (*out)[static_cast<std::size_t>(i)];
                           auto& dx = t.grad_of(xn);
                           for (long i = 0; i < n; ++i) {
                             const auto k = static_cast<std::size_t>(i);
                             dx[k] += (*out)[k] * (g[k] - dot);
                           }
                         });
  return y;
}

// y = sum_t weights[t] * terms[t]; the architecture mixing step.
inline Tensor weighted_sum(Tape& tape, const Tensor& weights,
                           const std::vector<Tensor>& terms) {
  if (weights.shape.rank != 1)
    throw std::invalid_argument("weighted_sum: weights must be rank 1");
  if (terms.empty())
    throw std::invalid_argument("weighted_sum: needs at least one term");
  if (weights.numel() != static_cast<long>(terms.size()))
    throw std::invalid_argument("weighted_sum: weight count " +
                                std::to_string(weights.numel()) +
                                " does not match term count " +
                                std::to_string(terms.size()));
  for (std::size_t t = 1; t < terms.size(); ++t)
    check_same_shape(terms[0], terms[t], "weighted_sum");

  const long n = terms[0].numel();
  const long T = weights.numel();
  SharedVec out = tape.alloc(n);
  std::fill(out->begin(), out->end(), 0.0);
  const double* wp = weights.ptr();
  for (long t = 0; t < T; ++t) {
    const double w = wp[t];
    const double* xp = terms[static_cast<std::size_t>(t)].ptr();
    double* yp = out->data();
    for (long i = 0; i < n; ++i) yp[i] += w * xp[i];
  }
  Tensor y(terms[0].shape, out);

  bool any = weights.tracked();
  for (const Tensor& t : terms) any = any || t.tracked();
  if (!tape.grad_enabled() || !any) return y;

  std::vector<int> parents;
  if (weights.tracked()) parents.push_back(weights.node);
  std::vector<int> term_nodes(terms.size());
  std::vector<SharedVec> term_data(terms.size());
  for (std::size_t t = 0; t < terms.size(); ++t) {
    term_nodes[t] = terms[t].node;
    term_data[t] = terms[t].data;
    if (terms[t].tracked()) parents.push_back(terms[t].node);
  }
  const int wn = weights.node;
  SharedVec wd = weights.data;
  y.node = tape.add_node(
      n, parents,
      [wn, wd, term_nodes, term_data, n](Tape& t,
                                         const std::vector<double>& g) {
        if (wn >= 0) {
          auto& dw = t.grad_of(wn);
          for (std::size_t k = 0; k < term_nodes.size(); ++k)
            dw[k] += detail::dot_lanes(g.data(), term_data[k]->data(), n);
        }
        for (std::size_t k = 0; k < term_nodes.size(); ++k) {
          if (term_nodes[k] < 0) continue;
          detail::accumulate(t.grad_of(term_nodes[k]), g,
                             (*wd)[k]);
        }
      });
  return y;
}

// Concatenate two tensors along the channel axis.
inline Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape.rank != 3 || b.shape.rank != 3)
    throw std::invalid_argument("concat_channels: expected rank 3");
  if (a.shape[0] != b.shape[0] || a.shape[2] != b.shape[2])
    throw std::invalid_argument("concat_channels: batch/length mismatch");
  const long B = a.shape[0], Ca = a.shape[1], Cb = b.shape[1], L = a.shape[2];
  SharedVec out = tape.alloc(B * (Ca + Cb) * L);
  for (long bb = 0; bb < B; ++bb) {
    double* dst = out->data() + bb * (Ca + Cb) * L;
    std::copy_n(a.ptr() + bb * Ca * L, Ca * L, dst);
    std::copy_n(b.ptr() + bb * Cb * L, Cb * L, dst + Ca * L);
  }
  Tensor y(Shape{B, Ca + Cb, L}, out);
  if (!tape.tracking({&a, &b})) return y;
  std::vector<int> parents;
  if (a.tracked()) parents.push_back(a.node);
  if (b.tracked()) parents.push_back(b.node);
  const int an = a.node, bn = b.node;
  y.node = tape.add_node(
      y.numel(), parents,
      [an, bn, B, Ca, Cb, L](Tape& t, const std::vector<double>& g) {
        for (long bb = 0; bb < B; ++bb) {
          const double* src = g.data() + bb * (Ca + Cb) * L;
          if (an >= 0) {
            auto& da = t.grad_of(an);
            double* dst = da.data() + bb * Ca * L;
            for (long i = 0; i < Ca * L; ++i) dst[i] += src[i];
          }
          if (bn >= 0) {
            auto& db = t.grad_of(bn);
            double* dst = db.data() + bb * Cb * L;
            for (long i = 0; i < Cb * L; ++i) dst[i] += src[Ca * L + i];
          }
        }
      });
  return y;
}

}  // namespace das1d
