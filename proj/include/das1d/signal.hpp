#pragma once

// Problem data: random cosine signals on a fixed grid, linear degradation
// operators (Gaussian blur, optionally with subsampling), PSNR, and a power
// iteration for the operator norm.

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "das1d/ops.hpp"
#include "das1d/rng.hpp"
#include "das1d/tape.hpp"
#include "das1d/tensor.hpp"

namespace das1d {

struct CosineConfig {
  int n = 50;                // samples on [omega_lo, omega_hi]
  double omega_lo = -std::numbers::pi / 2.0;
  double omega_hi = std::numbers::pi / 2.0;
  double freq_lo = 0.0;      // f ~ U[freq_lo, freq_hi]
  double freq_hi = 2.0 * std::numbers::pi;
  double sigma_n = 0.01;     // measurement noise level

  double grid_spacing() const {
    return (omega_hi - omega_lo) / static_cast<double>(n - 1);
  }

  void validate() const {
    if (n < 2) throw std::invalid_argument("cosine config: n must be >= 2");
    if (!(omega_hi > omega_lo))
      throw std::invalid_argument("cosine config: empty domain");
    if (!(freq_hi >= freq_lo))
      throw std::invalid_argument("cosine config: empty frequency range");
    if (sigma_n < 0.0)
      throw std::invalid_argument("cosine config: sigma_n must be >= 0");
  }
};

// x_i = cos(f * omega_i + phase) + offset on the config's grid.
inline std::vector<double> cosine_signal(const CosineConfig& cfg, double freq,
                                         double phase, double offset) {
  cfg.validate();
  std::vector<double> x(static_cast<std::size_t>(cfg.n));
  const double d = cfg.grid_spacing();
  for (int i = 0; i < cfg.n; ++i)
    x[static_cast<std::size_t>(i)] =
        std::cos(freq * (cfg.omega_lo + d * i) + phase) + offset;
  return x;
}

// Discrete Gaussian kernel sampled at grid offsets, normalized to sum 1.
inline std::vector<double> gaussian_kernel(int size, double sigma,
                                           double grid_spacing) {
  if (size < 1 || size % 2 == 0)
    throw std::invalid_argument("gaussian_kernel: size must be odd and >= 1");
  if (!(sigma > 0.0))
    throw std::invalid_argument("gaussian_kernel: sigma must be positive");
  std::vector<double> k(static_cast<std::size_t>(size));
  const int h = size / 2;
  double sum = 0.0;
  for (int j = -h; j <= h; ++j) {
    const double t = j * grid_spacing / sigma;
    const double v = std::exp(-0.5 * t * t);
    k[static_cast<std::size_t>(j + h)] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

enum class Degradation { Blur, BlurDownsample };

inline const char* degradation_name(Degradation d) {
  return d == Degradation::Blur ? "blur" : "downsample";
}

class DegradationOperator;
inline double operator_norm_estimate(const DegradationOperator& op,
                                     int iters = 100);

// y = S K x: zero-padded convolution with a fixed Gaussian kernel, followed
// (optionally) by stride subsampling. apply/adjoint are exact transposes of
// each other by construction: the adjoint runs the conv input-gradient.
class DegradationOperator {
 public:
  static DegradationOperator blur(int n, double sigma_b = 0.2,
                                  int kernel_size = 7) {
    return DegradationOperator(Degradation::Blur, n, 1, sigma_b, kernel_size);
  }

  static DegradationOperator blur_downsample(int n, double sigma_b = 0.2,
                                             int kernel_size = 7,
                                             int stride = 4) {
    return DegradationOperator(Degradation::BlurDownsample, n, stride, sigma_b,
                               kernel_size);
  }

  static DegradationOperator make(Degradation kind, int n) {
    return kind == Degradation::Blur ? blur(n) : blur_downsample(n);
  }

  Degradation kind() const { return kind_; }
  int input_length() const { return n_; }
  int output_length() const { return m_; }
  int stride() const { return stride_; }
  const std::vector<double>& kernel() const { return kernel_; }
  double norm() const { return norm_; }  // largest singular value, precomputed

  // x: [batch, n] contiguous, y: [batch, m] contiguous.
  void apply_raw(const double* x, double* y, long batch) const {
    std::vector<double> blur(static_cast<std::size_t>(n_));
    for (long b = 0; b < batch; ++b) {
      detail::conv1d_raw(x + b * n_, kernel_.data(), nullptr, blur.data(), 1,
                         1, 1, n_, static_cast<long>(kernel_.size()));
      double* yp = y + b * m_;
      for (int i = 0; i < m_; ++i) yp[i] = blur[static_cast<std::size_t>(i) * stride_];
    }
  }

  void adjoint_raw(const double* y, double* x, long batch) const {
    std::vector<double> up(static_cast<std::size_t>(n_));
    for (long b = 0; b < batch; ++b) {
      std::fill(up.begin(), up.end(), 0.0);
      const double* yp = y + b * m_;
      for (int i = 0; i < m_; ++i) up[static_cast<std::size_t>(i) * stride_] = yp[i];
      double* xp = x + b * n_;
      std::fill(xp, xp + n_, 0.0);
      detail::conv1d_input_grad(up.data(), kernel_.data(), xp, 1, 1, 1, n_,
                                static_cast<long>(kernel_.size()));
    }
  }

  // Differentiable wrappers over [B, 1, length] tensors.
  Tensor forward(Tape& tape, const Tensor& x) const {
    check_input(x, n_, "degradation forward");
    const long B = x.shape[0];
    SharedVec out = tape.alloc(B * m_);
    apply_raw(x.ptr(), out->data(), B);
    Tensor y(Shape{B, 1, m_}, out);
    if (!tape.tracking({&x})) return y;
    const int xn = x.node;
    int parents[] = {xn};
    const DegradationOperator* self = this;
    y.node = tape.add_node(y.numel(), parents,
                           [xn, B, self](Tape& t, const std::vector<double>& g) {
                             std::vector<double> dx(
                                 static_cast<std::size_t>(B * self->n_));
                             self->adjoint_raw(g.data(), dx.data(), B);
                             detail::accumulate(t.grad_of(xn), dx);
                           });
    return y;
  }

  Tensor adjoint(Tape& tape, const Tensor& y) const {
    check_input(y, m_, "degradation adjoint");
    const long B = y.shape[0];
    SharedVec out = tape.alloc(B * n_);
    adjoint_raw(y.ptr(), out->data(), B);
    Tensor x(Shape{B, 1, n_}, out);
    if (!tape.tracking({&y})) return x;
    const int yn = y.node;
    int parents[] = {yn};
    const DegradationOperator* self = this;
    x.node = tape.add_node(x.numel(), parents,
                           [yn, B, self](Tape& t, const std::vector<double>& g) {
                             std::vector<double> dy(
                                 static_cast<std::size_t>(B * self->m_));
                             self->apply_raw(g.data(), dy.data(), B);
                             detail::accumulate(t.grad_of(yn), dy);
                           });
    return x;
  }

 private:
  DegradationOperator(Degradation kind, int n, int stride, double sigma_b,
                      int kernel_size)
      : kind_(kind), n_(n), stride_(stride) {
    if (n < 2) throw std::invalid_argument("degradation: n must be >= 2");
    if (stride < 1) throw std::invalid_argument("degradation: stride must be >= 1");
    CosineConfig grid;
    grid.n = n;
    kernel_ = gaussian_kernel(kernel_size, sigma_b, grid.grid_spacing());
    m_ = (n - 1) / stride + 1;
    norm_ = operator_norm_estimate(*this);
  }

  static void check_input(const Tensor& t, int len, const char* what) {
    if (t.shape.rank != 3 || t.shape[1] != 1 || t.shape[2] != len)
      throw std::invalid_argument(std::string(what) + ": expected [B,1," +
                                  std::to_string(len) + "], got " +
                                  t.shape.str());
  }

  Degradation kind_;
  int n_;
  int m_;
  int stride_;
  std::vector<double> kernel_;
  double norm_ = 0.0;
};

// Largest singular value via power iteration on A^T A. `iters` is a floor;
// iteration continues until the Rayleigh quotient stabilizes, which this
// operator family needs to reach SVD-grade accuracy.
inline double operator_norm_estimate(const DegradationOperator& op,
                                     int iters) {
  const int n = op.input_length();
  const int m = op.output_length();
  std::vector<double> x(static_cast<std::size_t>(n),
                        1.0 / std::sqrt(static_cast<double>(n)));
  std::vector<double> y(static_cast<std::size_t>(m));
  double lambda = 0.0;
  const int cap = 100000;
  for (int it = 0; it < cap; ++it) {
    op.apply_raw(x.data(), y.data(), 1);
    std::vector<double> z(static_cast<std::size_t>(n));
    op.adjoint_raw(y.data(), z.data(), 1);
    double xz = 0.0, xx = 0.0;
    for (int i = 0; i < n; ++i) {
      xz += x[static_cast<std::size_t>(i)] * z[static_cast<std::size_t>(i)];
      xx += x[static_cast<std::size_t>(i)] * x[static_cast<std::size_t>(i)];
    }
    const double next = xz / xx;
    double norm = 0.0;
    for (double v : z) norm += v * v;
    norm = std::sqrt(norm);
    if (norm == 0.0) return 0.0;
    for (int i = 0; i < n; ++i) x[static_cast<std::size_t>(i)] = z[static_cast<std::size_t>(i)] / norm;
    if (it + 1 >= iters && std::abs(next - lambda) <= 1e-15 * std::abs(next)) {
      lambda = next;
      break;
    }
    lambda = next;
  }
  return std::sqrt(lambda);
}

struct SignalBatch {
  Tensor clean;     // [B, 1, n]
  Tensor measured;  // [B, 1, m]
};

// Per sample: draw frequency (uniform), phase and offset (normal), evaluate
// the cosine; afterwards apply the operator and add i.i.d. measurement noise.
// The draw order is part of the determinism contract.
inline SignalBatch make_batch(Rng& rng, const DegradationOperator& op,
                              const CosineConfig& cfg, long batch) {
  cfg.validate();
  if (batch < 1) throw std::invalid_argument("make_batch: batch must be >= 1");
  if (op.input_length() != cfg.n)
    throw std::invalid_argument("make_batch: operator length does not match config");
  Tensor clean = Tensor::zeros(Shape{batch, 1, cfg.n});
  for (long b = 0; b < batch; ++b) {
    const double f = rng.uniform(cfg.freq_lo, cfg.freq_hi);
    const double phase = rng.normal();
    const double offset = rng.normal();
    const double d = cfg.grid_spacing();
    double* row = clean.ptr() + b * cfg.n;
    for (int i = 0; i < cfg.n; ++i)
      row[i] = std::cos(f * (cfg.omega_lo + d * i) + phase) + offset;
  }
  Tensor measured = Tensor::zeros(Shape{batch, 1, op.output_length()});
  op.apply_raw(clean.ptr(), measured.ptr(), batch);
  if (cfg.sigma_n > 0.0) {
    double* mp = measured.ptr();
    for (long i = 0; i < measured.numel(); ++i) mp[i] += cfg.sigma_n * rng.normal();
  }
  return {std::move(clean), std::move(measured)};
}

// 10*log10(peak^2 / mse) over all elements, mse clamped below at 1e-12.
inline double psnr(const Tensor& pred, const Tensor& target,
                   double peak = 1.0) {
  check_same_shape(pred, target, "psnr");
  if (!(peak > 0.0)) throw std::invalid_argument("psnr: peak must be positive");
  const long n = pred.numel();
  double acc = 0.0;
  for (long i = 0; i < n; ++i) {
    const double d = pred.at(i) - target.at(i);
    acc += d * d;
  }
  const double m = std::max(acc / static_cast<double>(n), 1e-12);
  return 10.0 * std::log10(peak * peak / m);
}

// Mean over batch samples of per-sample PSNR; the evaluation metric.
inline double batch_mean_psnr(const Tensor& pred, const Tensor& target,
                              double peak = 1.0) {
  check_same_shape(pred, target, "psnr");
  if (pred.shape.rank != 3)
    throw std::invalid_argument("batch_mean_psnr: expected rank 3");
  const long B = pred.shape[0];
  const long per = pred.numel() / B;
  double acc = 0.0;
  for (long b = 0; b < B; ++b) {
    double s = 0.0;
    const double* pp = pred.ptr() + b * per;
    const double* tp = target.ptr() + b * per;
    for (long i = 0; i < per; ++i) {
      const double d = pp[i] - tp[i];
      s += d * d;
    }
    const double m = std::max(s / static_cast<double>(per), 1e-12);
    acc += 10.0 * std::log10(peak * peak / m);
  }
  return acc / static_cast<double>(B);
}

}  // namespace das1d
