#pragma once

// The candidate operations placed at every decision site, and the softmax
// mixture used while the architecture is relaxed.
//
//   LearnableGrad: u - tau * (A^T(Au - f) + n(u))   data step + learned term
//   Net:           n(u)                              pure learned mapping
//   Roll:          circular shift by floor(N/4)      harmful distractor
//   Noise:         u - tau * A^T(Au - f) + eps       gradient step + noise
//   Zero:          0                                 (cell topology only)
//
// n(u) = conv(1->16, k3) -> batchnorm -> relu -> conv(16->1, k3).

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "das1d/ops.hpp"
#include "das1d/rng.hpp"
#include "das1d/signal.hpp"
#include "das1d/tape.hpp"

namespace das1d {

enum class OperationKind { LearnableGrad, Net, Roll, Noise, Zero };

inline const char* op_mnemonic(OperationKind k) {
  switch (k) {
    case OperationKind::LearnableGrad: return "LG";
    case OperationKind::Net: return "Net";
    case OperationKind::Roll: return "Roll";
    case OperationKind::Noise: return "Noise";
    case OperationKind::Zero: return "Zero";
  }
  throw std::logic_error("unknown operation kind");
}

inline std::optional<OperationKind> op_from_mnemonic(std::string_view s) {
  if (s == "LG") return OperationKind::LearnableGrad;
  if (s == "Net") return OperationKind::Net;
  if (s == "Roll") return OperationKind::Roll;
  if (s == "Noise") return OperationKind::Noise;
  if (s == "Zero") return OperationKind::Zero;
  return std::nullopt;
}

// Roll and Noise exist to distract the search; Zero is structural.
inline bool is_benign(OperationKind k) {
  return k == OperationKind::LearnableGrad || k == OperationKind::Net;
}

struct ConvBlock {
  Parameter w1, b1, gamma, beta, w2, b2;

  bool empty() const { return w1.empty(); }

  ConvBlock clone() const {
    ConvBlock c;
    c.w1 = w1.clone();
    c.b1 = b1.clone();
    c.gamma = gamma.clone();
    c.beta = beta.clone();
    c.w2 = w2.clone();
    c.b2 = b2.clone();
    return c;
  }
};

struct OpInstance {
  OperationKind kind = OperationKind::Zero;
  int hidden = 16;
  long roll_shift = 0;
  ConvBlock net;   // LearnableGrad, Net
  Parameter tau;   // LearnableGrad, Noise
  Tensor frozen_eps;  // cached noise when the context asks for frozen noise

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    if (!net.empty()) {
      out.push_back(&net.w1);
      out.push_back(&net.b1);
      out.push_back(&net.gamma);
      out.push_back(&net.beta);
      out.push_back(&net.w2);
      out.push_back(&net.b2);
    }
    if (!tau.empty()) out.push_back(&tau);
    return out;
  }

  OpInstance clone() const {
    OpInstance o;
    o.kind = kind;
    o.hidden = hidden;
    o.roll_shift = roll_shift;
    o.net = net.clone();
    o.tau = tau.clone();
    o.frozen_eps = frozen_eps.data ? frozen_eps.clone() : Tensor{};
    return o;
  }
};

// Everything a site needs besides its input: the measurement, the operator,
// a noise stream, and the noise policy.
struct LayerContext {
  const Tensor* measurement = nullptr;   // [B, 1, m], untracked
  const DegradationOperator* op = nullptr;
  Rng* rng = nullptr;
  double noise_sigma = 0.10;
  bool frozen_noise = false;   // reuse one noise draw per instance (grad checks)
  bool track_theta = true;     // watch operation weights on the tape
};

namespace detail {

// fan-in uniform init, bound 1/sqrt(Cin*K)
inline Parameter init_conv_weight(Rng& rng, long co, long ci, long k) {
  Tensor w = Tensor::zeros(Shape{co, ci, k});
  const double bound = 1.0 / std::sqrt(static_cast<double>(ci * k));
  for (long i = 0; i < w.numel(); ++i) w.at(i) = rng.uniform(-bound, bound);
  return Parameter(std::move(w));
}

inline ConvBlock init_conv_block(Rng& rng, int hidden) {
  ConvBlock c;
  c.w1 = init_conv_weight(rng, hidden, 1, 3);
  c.b1 = Parameter(Tensor::zeros(Shape{hidden}));
  c.gamma = Parameter(Tensor::full(Shape{hidden}, 1.0));
  c.beta = Parameter(Tensor::zeros(Shape{hidden}));
  c.w2 = init_conv_weight(rng, 1, hidden, 3);
  c.b2 = Parameter(Tensor::zeros(Shape{1}));
  return c;
}

inline Tensor maybe_watch(Tape& tape, Parameter& p, bool track) {
  if (track) return tape.watch(p);
  return Tensor(p.value.shape, p.value.data);
}

// conv -> batchnorm -> relu -> conv composed from the individual ops. Kept as
// the reference for the fused version below.
inline Tensor conv_block_forward_unfused(ConvBlock& net, Tape& tape,
                                         const Tensor& u, bool track) {
  Tensor h = conv1d(tape, u, maybe_watch(tape, net.w1, track),
                    maybe_watch(tape, net.b1, track));
  h = batchnorm_relu(tape, h, maybe_watch(tape, net.gamma, track),
                     maybe_watch(tape, net.beta, track));
  return conv1d(tape, h, maybe_watch(tape, net.w2, track),
                maybe_watch(tape, net.b2, track));
}

// The same block as one fused tape node. Row temporaries stay in cache, only
// the pre-normalization activations are kept for backward, and the post-relu
// values are recomputed from them instead of stored. This is where training
// spends nearly all of its time.
inline Tensor conv_block_forward(ConvBlock& net, Tape& tape, const Tensor& u,
                                 bool track) {
  if (u.shape.rank != 3 || u.shape[1] != 1)
    throw std::invalid_argument("conv block: expected input [B,1,L]");
  const long B = u.shape[0], L = u.shape[2];
  const long H = net.w1.value.shape[0];
  if (L < 2) throw std::invalid_argument("conv block: length must be >= 2");
  if (B * L < 2)
    throw std::invalid_argument("conv block: needs at least 2 values per channel");

  const int w1n = maybe_watch(tape, net.w1, track).node;
  const int b1n = maybe_watch(tape, net.b1, track).node;
  const int gn = maybe_watch(tape, net.gamma, track).node;
  const int ben = maybe_watch(tape, net.beta, track).node;
  const int w2n = maybe_watch(tape, net.w2, track).node;
  const int b2n = maybe_watch(tape, net.b2, track).node;

  const double* up = u.ptr();
  const double* w1p = net.w1.value.ptr();
  const double* b1p = net.b1.value.ptr();
  const double* gp = net.gamma.value.ptr();
  const double* bp = net.beta.value.ptr();
  const double* w2p = net.w2.value.ptr();
  const double b2v = net.b2.value.at(0);

  // pass 1: hidden conv, folding the batch statistics into the same sweep
  SharedVec h1 = tape.alloc(B * H * L);
  const auto hs = static_cast<std::size_t>(H);
  std::vector<double> sum(hs, 0.0), sumsq(hs, 0.0);
  for (long b = 0; b < B; ++b) {
    const double* urow = up + b * L;
    for (long c = 0; c < H; ++c) {
      double* hrow = h1->data() + (b * H + c) * L;
      detail::k3_row_fwd_set(urow, w1p[c * 3], w1p[c * 3 + 1], w1p[c * 3 + 2],
                             b1p[c], hrow, L);
      double rs = 0.0, rq = 0.0;
      detail::sum_sumsq_lanes(hrow, L, rs, rq);
      sum[static_cast<std::size_t>(c)] += rs;
      sumsq[static_cast<std::size_t>(c)] += rq;
    }
  }
  const double m = static_cast<double>(B * L);
  std::vector<double> mean(hs), inv_s(hs);
  for (std::size_t c = 0; c < hs; ++c) {
    mean[c] = sum[c] / m;
    const double var = std::max(0.0, sumsq[c] / m - mean[c] * mean[c]);
    inv_s[c] = 1.0 / std::sqrt(var + 1e-5);
  }

  // pass 2: normalize + relu one row at a time, feeding the output conv
  SharedVec out = tape.alloc(B * L);
  std::vector<double> h2row(static_cast<std::size_t>(L));
  for (long b = 0; b < B; ++b) {
    double* yrow = out->data() + b * L;
    for (long i = 0; i < L; ++i) yrow[i] = b2v;
    for (long c = 0; c < H; ++c) {
      const double* hrow = h1->data() + (b * H + c) * L;
      const double mu = mean[static_cast<std::size_t>(c)];
      const double is = inv_s[static_cast<std::size_t>(c)];
      const double gc = gp[c], bc = bp[c];
      for (long i = 0; i < L; ++i) {
        const double z = gc * ((hrow[i] - mu) * is) + bc;
        h2row[static_cast<std::size_t>(i)] = z > 0.0 ? z : 0.0;
      }
      detail::k3_row_fwd_add(h2row.data(), w2p[c * 3], w2p[c * 3 + 1],
                             w2p[c * 3 + 2], yrow, L);
    }
  }
  Tensor y(u.shape, out);
  const bool params_tracked = w1n >= 0;
  if (!tape.grad_enabled() || (!u.tracked() && !params_tracked)) return y;

  std::vector<int> parents;
  if (u.tracked()) parents.push_back(u.node);
  for (int n : {w1n, b1n, gn, ben, w2n, b2n})
    if (n >= 0) parents.push_back(n);
  const int un = u.node;
  SharedVec ud = u.data;
  SharedVec w1d = net.w1.value.data, w2d = net.w2.value.data;
  SharedVec gd = net.gamma.value.data, bd = net.beta.value.data;
  y.node = tape.add_node(
      y.numel(), parents,
      [=](Tape& t, const std::vector<double>& g) {
        const double* w1v = w1d->data();
        const double* w2v = w2d->data();
        const double* gv = gd->data();
        const double* bv = bd->data();
        const double* h1p = h1->data();
        const double* uv = ud->data();
        const auto ls = static_cast<std::size_t>(L);
        std::vector<double> dh2(ls), h2(ls), dh1(ls);
        std::vector<double> sg(hs, 0.0), sgx(hs, 0.0);
        double* dw2p = w2n >= 0 ? t.grad_of(w2n).data() : nullptr;

        // pass 1: relu-gated output-conv transpose, batch-coupling sums,
        // and the output conv's weight gradient
        for (long b = 0; b < B; ++b) {
          const double* grow = g.data() + b * L;
          if (b2n >= 0) t.grad_of(b2n)[0] += detail::sum_lanes(grow, L);
          for (long c = 0; c < H; ++c) {
            const double* hrow = h1p + (b * H + c) * L;
            detail::k3_row_igrad_set(grow, w2v[c * 3], w2v[c * 3 + 1],
                                     w2v[c * 3 + 2], dh2.data(), L);
            const double mu = mean[static_cast<std::size_t>(c)];
            const double is = inv_s[static_cast<std::size_t>(c)];
            const double gc = gv[c], bc = bv[c];
            double s0 = 0.0, s1 = 0.0;
            for (long i = 0; i < L; ++i) {
              const double z = gc * ((hrow[i] - mu) * is) + bc;
              const double ge =
                  z > 0.0 ? dh2[static_cast<std::size_t>(i)] : 0.0;
              h2[static_cast<std::size_t>(i)] = z > 0.0 ? z : 0.0;
              s0 += ge;
              s1 += ge * hrow[i];
            }
            sg[static_cast<std::size_t>(c)] += s0;
            sgx[static_cast<std::size_t>(c)] += s1;
            if (dw2p != nullptr)
              detail::k3_row_wgrad_add(grow, h2.data(), L, dw2p + c * 3);
          }
        }

        std::vector<double> k1(hs), k2(hs), k3(hs);
        for (std::size_t c = 0; c < hs; ++c) {
          const double sgh = inv_s[c] * (sgx[c] - mean[c] * sg[c]);
          if (ben >= 0) t.grad_of(ben)[c] += sg[c];
          if (gn >= 0) t.grad_of(gn)[c] += sgh;
          const double k = gv[c] * inv_s[c];
          const double mg = sg[c] / m;
          const double mgh = sgh / m;
          k1[c] = k;
          k2[c] = -k * inv_s[c] * mgh;
          k3[c] = -k * mg - k2[c] * mean[c];
        }

        // pass 2: gradient through the normalization into the hidden conv
        double* dw1p = w1n >= 0 ? t.grad_of(w1n).data() : nullptr;
        double* db1p = b1n >= 0 ? t.grad_of(b1n).data() : nullptr;
        double* dup = un >= 0 ? t.grad_of(un).data() : nullptr;
        for (long b = 0; b < B; ++b) {
          const double* grow = g.data() + b * L;
          const double* urow = uv + b * L;
          double* durow = dup != nullptr ? dup + b * L : nullptr;
          for (long c = 0; c < H; ++c) {
            const double* hrow = h1p + (b * H + c) * L;
            detail::k3_row_igrad_set(grow, w2v[c * 3], w2v[c * 3 + 1],
                                     w2v[c * 3 + 2], dh2.data(), L);
            const double mu = mean[static_cast<std::size_t>(c)];
            const double is = inv_s[static_cast<std::size_t>(c)];
            const double gc = gv[c], bc = bv[c];
            const double c1 = k1[static_cast<std::size_t>(c)];
            const double c2 = k2[static_cast<std::size_t>(c)];
            const double c3 = k3[static_cast<std::size_t>(c)];
            for (long i = 0; i < L; ++i) {
              const double z = gc * ((hrow[i] - mu) * is) + bc;
              const double ge =
                  z > 0.0 ? dh2[static_cast<std::size_t>(i)] : 0.0;
              dh1[static_cast<std::size_t>(i)] = c1 * ge + c2 * hrow[i] + c3;
            }
            if (dw1p != nullptr)
              detail::k3_row_wgrad_add(dh1.data(), urow, L, dw1p + c * 3);
            if (db1p != nullptr) db1p[c] += detail::sum_lanes(dh1.data(), L);
            if (durow != nullptr)
              detail::k3_row_igrad_add(dh1.data(), w1v[c * 3], w1v[c * 3 + 1],
                                       w1v[c * 3 + 2], durow, L);
          }
        }
      });
  return y;
}

// u - tau * A^T(Au - f), shared by LearnableGrad and Noise.
inline Tensor data_gradient(Tape& tape, const Tensor& u,
                            const LayerContext& ctx) {
  Tensor au = ctx.op->forward(tape, u);
  Tensor r = sub(tape, au, *ctx.measurement);
  return ctx.op->adjoint(tape, r);
}

inline Tensor noise_draw(OpInstance& inst, Tape& tape, const Shape& shape,
                         const LayerContext& ctx) {
  if (ctx.frozen_noise) {
    if (!inst.frozen_eps.data || !(inst.frozen_eps.shape == shape)) {
      Tensor e = Tensor::zeros(shape);
      for (long i = 0; i < e.numel(); ++i)
        e.at(i) = ctx.noise_sigma * ctx.rng->normal();
      inst.frozen_eps = std::move(e);
    }
    return inst.frozen_eps;
  }
  SharedVec buf = tape.alloc(shape.numel());
  for (double& v : *buf) v = ctx.noise_sigma * ctx.rng->normal();
  return Tensor(shape, buf);
}

}  // namespace detail

inline OpInstance op_init(OperationKind kind, Rng& rng,
                          const DegradationOperator& op, int hidden = 16) {
  if (hidden < 1) throw std::invalid_argument("op_init: hidden must be >= 1");
  OpInstance inst;
  inst.kind = kind;
  inst.hidden = hidden;
  switch (kind) {
    case OperationKind::LearnableGrad: {
      inst.net = detail::init_conv_block(rng, hidden);
      const double nrm = op.norm();
      inst.tau = Parameter(Tensor::scalar(1.0 / (nrm * nrm)));
      break;
    }
    case OperationKind::Net:
      inst.net = detail::init_conv_block(rng, hidden);
      break;
    case OperationKind::Roll:
      inst.roll_shift = op.input_length() / 4;
      break;
    case OperationKind::Noise: {
      const double nrm = op.norm();
      inst.tau = Parameter(Tensor::scalar(1.0 / (nrm * nrm)));
      break;
    }
    case OperationKind::Zero:
      break;
  }
  return inst;
}

inline Tensor op_forward(OpInstance& inst, Tape& tape, const Tensor& u,
                         LayerContext& ctx) {
  if (ctx.measurement == nullptr || ctx.op == nullptr)
    throw std::invalid_argument("op_forward: context missing measurement/operator");
  switch (inst.kind) {
    case OperationKind::LearnableGrad: {
      Tensor g = detail::data_gradient(tape, u, ctx);
      Tensor n = detail::conv_block_forward(inst.net, tape, u, ctx.track_theta);
      Tensor dir = add(tape, g, n);
      Tensor t = detail::maybe_watch(tape, inst.tau, ctx.track_theta);
      return sub(tape, u, scale_by(tape, t, dir));
    }
    case OperationKind::Net:
      return detail::conv_block_forward(inst.net, tape, u, ctx.track_theta);
    case OperationKind::Roll:
      return circular_shift(tape, u, inst.roll_shift);
    case OperationKind::Noise: {
      if (ctx.rng == nullptr)
        throw std::invalid_argument("op_forward: noise op needs an rng");
      Tensor g = detail::data_gradient(tape, u, ctx);
      Tensor t = detail::maybe_watch(tape, inst.tau, ctx.track_theta);
      Tensor stepped = sub(tape, u, scale_by(tape, t, g));
      return add(tape, stepped, detail::noise_draw(inst, tape, u.shape, ctx));
    }
    case OperationKind::Zero:
      return Tensor::zeros(u.shape);
  }
  throw std::logic_error("op_forward: unknown kind");
}

// Softmax-relaxed mixture over the candidates at one site.
inline Tensor mixed_forward(Tape& tape, const Tensor& alphas,
                            std::vector<OpInstance>& ops, const Tensor& u,
                            LayerContext& ctx) {
  if (ops.empty()) throw std::invalid_argument("mixed_forward: no candidates");
  if (alphas.numel() != static_cast<long>(ops.size()))
    throw std::invalid_argument("mixed_forward: alpha count does not match ops");
  Tensor beta = softmax_vec(tape, alphas);
  std::vector<Tensor> terms;
  terms.reserve(ops.size());
  for (OpInstance& o : ops) terms.push_back(op_forward(o, tape, u, ctx));
  return weighted_sum(tape, beta, terms);
}

}  // namespace das1d
