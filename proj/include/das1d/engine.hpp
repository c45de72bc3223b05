#pragma once

// The search engine: bi-level alternation over (theta, alpha) with the
// first-order, zero-inner-iteration scheme — each step draws a fresh
// training batch for one theta update, then a fresh validation batch for one
// alpha update. Also: retraining of discrete architectures and the
// frozen-weight DAS-single variant.

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "das1d/grad_check.hpp"
#include "das1d/optim.hpp"
#include "das1d/search_space.hpp"
#include "das1d/signal.hpp"

namespace das1d {

enum class AlphaScheduler { None, Linear };

inline const char* scheduler_name(AlphaScheduler s) {
  return s == AlphaScheduler::None ? "none" : "linear";
}

inline const char* optimizer_name(OptimizerKind k) {
  return k == OptimizerKind::Adam ? "adam" : "gradient-descent";
}

inline AlphaScheduler scheduler_from_name(std::string_view s) {
  if (s == "none") return AlphaScheduler::None;
  if (s == "linear") return AlphaScheduler::Linear;
  throw std::invalid_argument("unknown alpha scheduler '" + std::string(s) +
                              "' (expected none|linear)");
}

inline OptimizerKind optimizer_from_name(std::string_view s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "gradient-descent" || s == "gd") return OptimizerKind::GradientDescent;
  throw std::invalid_argument("unknown optimizer '" + std::string(s) +
                              "' (expected adam|gradient-descent)");
}

struct HyperParams {
  double param_lr = 1e-3;
  double param_wd = 1e-8;
  bool param_warmup = false;
  double alpha_lr = 1e-3;
  double alpha_wd = 1e-3;
  bool alpha_warmup = true;
  AlphaScheduler alpha_scheduler = AlphaScheduler::Linear;
  OptimizerKind alpha_optimizer = OptimizerKind::GradientDescent;

  void validate() const {
    if (param_lr < 0.0 || alpha_lr < 0.0)
      throw std::invalid_argument("hyperparams: learning rates must be >= 0");
    if (param_wd < 0.0 || alpha_wd < 0.0)
      throw std::invalid_argument("hyperparams: weight decays must be >= 0");
  }
};

struct HpPreset {
  std::string label;
  HyperParams hp;
};

// Built-in presets: the two manual settings and the tuned settings for each
// data formation / objective / method / topology combination.
inline const std::vector<HpPreset>& hp_presets() {
  using AS = AlphaScheduler;
  using OK = OptimizerKind;
  static const std::vector<HpPreset> presets = {
      {"H1", {1e-3, 1e-8, false, 1e-3, 1e-3, true, AS::Linear, OK::GradientDescent}},
      {"H2", {1e-3, 1e-8, false, 1e-4, 1e-4, true, AS::Linear, OK::GradientDescent}},
      {"BOHB-one-shot-Blur",
       {0.0014232405, 8.616e-07, false, 0.0836808765, 5.05099e-05, false,
        AS::Linear, OK::Adam}},
      {"BOHB-one-shot-DS",
       {0.0020448382, 5.04e-08, true, 0.0100063746, 0.0058022776, true,
        AS::Linear, OK::GradientDescent}},
      {"BOHB-Blur",
       {0.0020882283, 4.4e-08, false, 8.43195e-05, 0.0127425783, true,
        AS::Linear, OK::Adam}},
      {"BOHB-DAS-single",
       {0.0014232405, 8.616e-07, false, 0.025012337102395577,
        1.390640076980444e-05, false, AS::None, OK::Adam}},
      {"BOHB-Non-Seq-one-shot-Blur",
       {0.0050969066, 2.423e-07, false, 1.32499e-05, 0.0010171142, false,
        AS::None, OK::Adam}},
      {"BOHB-Non-Seq-Blur",
       {0.0037014752, 1.4573e-06, false, 0.0012395056, 0.0002855732, false,
        AS::None, OK::Adam}},
  };
  return presets;
}

inline std::string lowercase(std::string_view s) {
  std::string out(s);
  for (char& c : out)
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline const HpPreset& hp_preset(std::string_view name) {
  const std::string key = lowercase(name);
  for (const auto& p : hp_presets())
    if (lowercase(p.label) == key) return p;
  throw std::invalid_argument("unknown hyperparameter preset '" +
                              std::string(name) + "'");
}

struct TrainSchedule {
  int epochs = 50;
  int steps_per_epoch = 19;
  int batch_size = 128;
  int warmup_epochs = 10;

  long total_steps() const {
    return static_cast<long>(epochs) * steps_per_epoch;
  }
  long warm_steps() const {
    return static_cast<long>(warmup_epochs) * steps_per_epoch;
  }

  void validate() const {
    if (epochs < 1 || steps_per_epoch < 1 || batch_size < 1)
      throw std::invalid_argument("schedule: epochs/steps/batch must be >= 1");
    if (warmup_epochs < 0)
      throw std::invalid_argument("schedule: warmup_epochs must be >= 0");
  }
};

// Warm-up ramps 0 -> base over the first warm_steps; afterwards (or from the
// start without warm-up) the linear scheduler decays base -> 0 so that the
// final step's lr is exactly 0.
inline double lr_schedule(double base, long step, long total, bool warmup,
                          AlphaScheduler scheduler, long warm_steps) {
  if (step < 0 || step >= total)
    throw std::invalid_argument("lr_schedule: step out of range");
  const long w = warmup ? std::min(warm_steps, total) : 0;
  if (warmup && step < w)
    return base * static_cast<double>(step) / static_cast<double>(w);
  if (scheduler == AlphaScheduler::Linear) {
    if (step >= total - 1) return 0.0;
    const long denom = total - 1 - w;
    if (denom <= 0) return 0.0;
    return base * (1.0 - static_cast<double>(step - w) /
                             static_cast<double>(denom));
  }
  return base;
}

// One data formation: the operator, the signal distribution, and the noise
// level used by the Noise candidate op.
struct Problem {
  DegradationOperator op = DegradationOperator::blur(50);
  CosineConfig data{};
  double noise_level = 0.10;

  static Problem make(Degradation kind, const CosineConfig& cfg = {},
                      double noise_level = 0.10) {
    return {DegradationOperator::make(kind, cfg.n), cfg, noise_level};
  }
};

// Named rng streams, split once so that consumption in one stream can never
// shift another (the theta trajectory must not depend on whether alpha
// updates happen).
struct Streams {
  Rng init, train, val, layer, eval;

  explicit Streams(const Rng& base)
      : init(base.split("init")),
        train(base.split("train-data")),
        val(base.split("val-data")),
        layer(base.split("layer-noise")),
        eval(base.split("eval-data")) {}
};

struct SearchResult {
  double one_shot_psnr = std::numeric_limits<double>::quiet_NaN();
  DiscreteArch arch;
  std::vector<std::vector<double>> final_betas;  // softmax per site at the end
  double runtime_s = 0.0;
  bool failed = false;
  std::string diagnostic;
};

struct TrainResult {
  double arch_psnr = std::numeric_limits<double>::quiet_NaN();
  double runtime_s = 0.0;
  bool failed = false;
  std::string diagnostic;
};

struct SearchOutcome {
  SearchResult result;
  RelaxedModel model;
};

struct TrainOutcome {
  TrainResult result;
  DiscreteNet net;
};

namespace detail {

inline double seconds_since(
    std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

inline bool all_finite(const Tensor& t) {
  for (long i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t.at(i))) return false;
  return true;
}

// Mean per-sample PSNR over a fresh pool of steps_per_epoch batches.
// Returns NaN if any forward produces non-finite values.
template <class Fwd>
double pool_psnr(Fwd&& forward, const Problem& prob,
                 const TrainSchedule& sched, Rng data_rng, Rng& layer_rng) {
  Tape tape;
  NoGradGuard ng(tape);
  double acc = 0.0;
  for (int s = 0; s < sched.steps_per_epoch; ++s) {
    SignalBatch batch = make_batch(data_rng, prob.op, prob.data, sched.batch_size);
    LayerContext ctx;
    ctx.measurement = &batch.measured;
    ctx.op = &prob.op;
    ctx.rng = &layer_rng;
    ctx.noise_sigma = prob.noise_level;
    Tensor out = forward(tape, batch.measured, ctx);
    if (!all_finite(out)) return std::numeric_limits<double>::quiet_NaN();
    acc += batch_mean_psnr(out, batch.clean);
    tape.reset();
  }
  return acc / static_cast<double>(sched.steps_per_epoch);
}

}  // namespace detail

inline double evaluate_relaxed_pool(RelaxedModel& model, const Problem& prob,
                                    const TrainSchedule& sched, Rng data_rng,
                                    Rng layer_rng) {
  return detail::pool_psnr(
      [&](Tape& tape, const Tensor& measured, LayerContext& ctx) {
        return forward_relaxed(model, tape, measured, ctx);
      },
      prob, sched, data_rng, layer_rng);
}

inline double evaluate_discrete_pool(DiscreteNet& net, const Problem& prob,
                                     const TrainSchedule& sched, Rng data_rng,
                                     Rng layer_rng) {
  return detail::pool_psnr(
      [&](Tape& tape, const Tensor& measured, LayerContext& ctx) {
        return forward_discrete(net, tape, measured, ctx);
      },
      prob, sched, data_rng, layer_rng);
}

// Bi-level search. Per step: theta update on a fresh training batch (alpha
// treated as constant), then, outside the alpha warm-up window, an alpha
// update on a fresh validation batch (theta treated as constant). Ends with
// a pool evaluation and argmax discretization.
inline SearchOutcome das_search_full(const SpaceSpec& space,
                                     const Problem& prob,
                                     const HyperParams& hp,
                                     const TrainSchedule& sched, Rng rng) {
  const auto t0 = std::chrono::steady_clock::now();
  space.validate();
  hp.validate();
  sched.validate();
  prob.data.validate();

  Streams st(rng);
  SearchOutcome out{SearchResult{}, build_relaxed(space, prob.op, st.init)};
  RelaxedModel& model = out.model;
  SearchResult& res = out.result;
  const auto thetas = model.theta_parameters();
  const auto alphas = model.alpha_parameters();
  const long total = sched.total_steps();
  const long warm = sched.warm_steps();

  auto fail = [&](std::string why) {
    res.failed = true;
    res.diagnostic = std::move(why);
    res.runtime_s = detail::seconds_since(t0);
  };

  Tape tape;
  for (long gs = 0; gs < total; ++gs) {
    tape.reset();
    SignalBatch tb = make_batch(st.train, prob.op, prob.data, sched.batch_size);
    LayerContext ctx;
    ctx.measurement = &tb.measured;
    ctx.op = &prob.op;
    ctx.rng = &st.layer;
    ctx.noise_sigma = prob.noise_level;
    Tensor pred = forward_relaxed(model, tape, tb.measured, ctx,
                                  /*track_alpha=*/false);
    Tensor loss = mse(tape, pred, tb.clean);
    if (!std::isfinite(loss.item())) {
      fail("non-finite training loss at step " + std::to_string(gs));
      return out;
    }
    tape.backward(loss);
    const double plr = lr_schedule(hp.param_lr, gs, total, hp.param_warmup,
                                   AlphaScheduler::None, warm);
    optimizer_step(OptimizerKind::GradientDescent, thetas, plr, hp.param_wd);

    if (hp.alpha_warmup && gs < warm) continue;
    tape.reset();
    SignalBatch vb = make_batch(st.val, prob.op, prob.data, sched.batch_size);
    LayerContext vctx;
    vctx.measurement = &vb.measured;
    vctx.op = &prob.op;
    vctx.rng = &st.layer;
    vctx.noise_sigma = prob.noise_level;
    vctx.track_theta = false;
    Tensor vpred = forward_relaxed(model, tape, vb.measured, vctx);
    Tensor vloss = mse(tape, vpred, vb.clean);
    if (!std::isfinite(vloss.item())) {
      fail("non-finite validation loss at step " + std::to_string(gs));
      return out;
    }
    tape.backward(vloss);
    const long w = hp.alpha_warmup ? warm : 0;
    const double alr = lr_schedule(hp.alpha_lr, gs - w, total - w, false,
                                   hp.alpha_scheduler, 0);
    optimizer_step(hp.alpha_optimizer, alphas, alr, hp.alpha_wd);
  }

  const double ps =
      evaluate_relaxed_pool(model, prob, sched, st.eval, st.layer);
  if (!std::isfinite(ps)) {
    fail("non-finite output during one-shot evaluation");
    return out;
  }
  res.one_shot_psnr = ps;
  res.arch = discretize(model);
  res.final_betas = model.site_betas();
  res.runtime_s = detail::seconds_since(t0);
  return out;
}

inline SearchResult das_search(const SpaceSpec& space, const Problem& prob,
                               const HyperParams& hp,
                               const TrainSchedule& sched, Rng rng) {
  return das_search_full(space, prob, hp, sched, std::move(rng)).result;
}

// Retrain a discrete architecture from scratch with the theta settings.
inline TrainOutcome train_architecture_full(const DiscreteArch& arch,
                                            const Problem& prob,
                                            const HyperParams& hp,
                                            const TrainSchedule& sched,
                                            Rng rng) {
  const auto t0 = std::chrono::steady_clock::now();
  hp.validate();
  sched.validate();
  prob.data.validate();

  Streams st(rng);
  TrainOutcome out{TrainResult{}, build_discrete(arch, prob.op, st.init)};
  DiscreteNet& net = out.net;
  TrainResult& res = out.result;
  const auto params = net.parameters();
  const long total = sched.total_steps();
  const long warm = sched.warm_steps();

  auto fail = [&](std::string why) {
    res.failed = true;
    res.diagnostic = std::move(why);
    res.runtime_s = detail::seconds_since(t0);
  };

  if (!params.empty()) {
    Tape tape;
    for (long gs = 0; gs < total; ++gs) {
      tape.reset();
      SignalBatch tb =
          make_batch(st.train, prob.op, prob.data, sched.batch_size);
      LayerContext ctx;
      ctx.measurement = &tb.measured;
      ctx.op = &prob.op;
      ctx.rng = &st.layer;
      ctx.noise_sigma = prob.noise_level;
      Tensor pred = forward_discrete(net, tape, tb.measured, ctx);
      Tensor loss = mse(tape, pred, tb.clean);
      if (!std::isfinite(loss.item())) {
        fail("non-finite training loss at step " + std::to_string(gs));
        return out;
      }
      if (!loss.tracked()) break;  // nothing trainable reaches the loss
      tape.backward(loss);
      const double plr = lr_schedule(hp.param_lr, gs, total, hp.param_warmup,
                                     AlphaScheduler::None, warm);
      optimizer_step(OptimizerKind::GradientDescent, params, plr, hp.param_wd);
    }
  }

  const double ps =
      evaluate_discrete_pool(net, prob, sched, st.eval, st.layer);
  if (!std::isfinite(ps)) {
    fail("non-finite output during evaluation");
    return out;
  }
  res.arch_psnr = ps;
  res.runtime_s = detail::seconds_since(t0);
  return out;
}

inline TrainResult train_architecture(const DiscreteArch& arch,
                                      const Problem& prob,
                                      const HyperParams& hp,
                                      const TrainSchedule& sched, Rng rng) {
  return train_architecture_full(arch, prob, hp, sched, std::move(rng)).result;
}

// DAS with pre-trained, frozen operation weights: every benign kind is
// trained as an all-that-kind network first; its layer-j weights seed site
// j's candidate. Only alpha moves during the search loop.
inline SearchOutcome das_single_search_full(const SpaceSpec& space,
                                            const Problem& prob,
                                            const HyperParams& hp,
                                            const TrainSchedule& sched,
                                            Rng rng) {
  const auto t0 = std::chrono::steady_clock::now();
  space.validate();
  if (space.topology != Topology::Sequential)
    throw std::invalid_argument(
        "das_single_search: only the sequential topology is supported");
  hp.validate();
  sched.validate();

  Streams st(rng);
  SearchOutcome out{SearchResult{}, build_relaxed(space, prob.op, st.init)};
  RelaxedModel& model = out.model;
  SearchResult& res = out.result;

  auto fail = [&](std::string why) {
    res.failed = true;
    res.diagnostic = std::move(why);
    res.runtime_s = detail::seconds_since(t0);
  };

  // Pre-train one uniform network per benign kind.
  std::map<OperationKind, DiscreteNet> pretrained;
  for (OperationKind k : space.opset) {
    if (!is_benign(k)) continue;
    DiscreteArch arch;
    arch.space = space;
    arch.choices.assign(static_cast<std::size_t>(space.site_count()), k);
    TrainOutcome t = train_architecture_full(
        arch, prob, hp, sched,
        rng.split(std::string("pretrain-") + op_mnemonic(k)));
    if (t.result.failed) {
      fail("pre-training of all-" + std::string(op_mnemonic(k)) +
           " failed: " + t.result.diagnostic);
      return out;
    }
    pretrained.emplace(k, std::move(t.net));
  }

  for (std::size_t s = 0; s < model.sites.size(); ++s) {
    auto& site = model.sites[s];
    for (std::size_t c = 0; c < site.candidates.size(); ++c) {
      const OperationKind k = model.space.opset[c];
      auto it = pretrained.find(k);
      if (it != pretrained.end())
        site.candidates[c] = it->second.ops[s].clone();
    }
  }
  model.freeze_theta();

  const auto alphas = model.alpha_parameters();
  const long total = sched.total_steps();
  const long warm = sched.warm_steps();

  Tape tape;
  for (long gs = 0; gs < total; ++gs) {
    if (hp.alpha_warmup && gs < warm) continue;
    tape.reset();
    SignalBatch vb = make_batch(st.val, prob.op, prob.data, sched.batch_size);
    LayerContext ctx;
    ctx.measurement = &vb.measured;
    ctx.op = &prob.op;
    ctx.rng = &st.layer;
    ctx.noise_sigma = prob.noise_level;
    ctx.track_theta = false;
    Tensor pred = forward_relaxed(model, tape, vb.measured, ctx);
    Tensor loss = mse(tape, pred, vb.clean);
    if (!std::isfinite(loss.item())) {
      fail("non-finite validation loss at step " + std::to_string(gs));
      return out;
    }
    tape.backward(loss);
    const long w = hp.alpha_warmup ? warm : 0;
    const double alr = lr_schedule(hp.alpha_lr, gs - w, total - w, false,
                                   hp.alpha_scheduler, 0);
    optimizer_step(hp.alpha_optimizer, alphas, alr, hp.alpha_wd);
  }

  const double ps =
      evaluate_relaxed_pool(model, prob, sched, st.eval, st.layer);
  if (!std::isfinite(ps)) {
    fail("non-finite output during one-shot evaluation");
    return out;
  }
  res.one_shot_psnr = ps;
  res.arch = discretize(model);
  res.final_betas = model.site_betas();
  res.runtime_s = detail::seconds_since(t0);
  return out;
}

inline SearchResult das_single_search(const SpaceSpec& space,
                                      const Problem& prob,
                                      const HyperParams& hp,
                                      const TrainSchedule& sched, Rng rng) {
  return das_single_search_full(space, prob, hp, sched, std::move(rng)).result;
}

}  // namespace das1d
