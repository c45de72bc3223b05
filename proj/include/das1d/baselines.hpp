#pragma once

// Comparison protocols: all-one-kind networks, random architectures, budgeted
// random search, and the evaluations-to-beat-a-threshold experiment.

#include <chrono>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "das1d/engine.hpp"

namespace das1d {

struct BudgetPolicy {
  enum class Mode { Count, WallClock };
  Mode mode = Mode::Count;
  int count = 5;           // architectures to evaluate (count mode)
  double wall_clock_s = 0; // time budget (wall-clock mode)

  static BudgetPolicy by_count(int n) { return {Mode::Count, n, 0.0}; }
  static BudgetPolicy by_wall_clock(double seconds) {
    return {Mode::WallClock, 0, seconds};
  }

  void validate() const {
    if (mode == Mode::Count && count < 1)
      throw std::invalid_argument("budget: count must be >= 1");
    if (mode == Mode::WallClock && !(wall_clock_s > 0.0))
      throw std::invalid_argument("budget: wall clock must be positive");
  }
};

inline DiscreteArch uniform_arch(const SpaceSpec& space, OperationKind kind) {
  space.validate();
  DiscreteArch arch;
  arch.space = space;
  arch.choices.assign(static_cast<std::size_t>(space.site_count()), kind);
  return arch;
}

// The "X only" table rows: train the all-kind network.
inline TrainResult fixed_op_baseline(OperationKind kind,
                                     const SpaceSpec& space,
                                     const Problem& prob,
                                     const HyperParams& hp,
                                     const TrainSchedule& sched, Rng rng) {
  if (!is_benign(kind))
    throw std::invalid_argument(
        "fixed_op_baseline: kind must be LearnableGrad or Net");
  return train_architecture(uniform_arch(space, kind), prob, hp, sched,
                            std::move(rng));
}

struct EvaluatedArch {
  DiscreteArch arch;
  TrainResult result;
};

struct RandomSearchResult {
  std::vector<EvaluatedArch> evaluated;
  long best_index = -1;  // index of the best non-failed evaluation, -1 if none

  const EvaluatedArch& best() const {
    if (best_index < 0)
      throw std::runtime_error("random_search: every evaluation failed");
    return evaluated[static_cast<std::size_t>(best_index)];
  }
};

// The training stream for an architecture is derived from the architecture
// itself, so evaluating the same architecture twice within one search gives
// the same result, and an external enumeration with the same base rng
// reproduces any drawn architecture's score exactly.
inline Rng arch_keyed_rng(const Rng& base, const DiscreteArch& arch) {
  return base.split("train").split(arch.to_string());
}

inline RandomSearchResult random_search(const SpaceSpec& space,
                                        const Problem& prob,
                                        const HyperParams& hp,
                                        const TrainSchedule& sched,
                                        const BudgetPolicy& budget, Rng rng) {
  space.validate();
  budget.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Rng arch_rng = rng.split("arch");
  RandomSearchResult out;
  double best = -std::numeric_limits<double>::infinity();
  for (int i = 0;; ++i) {
    if (budget.mode == BudgetPolicy::Mode::Count) {
      if (i >= budget.count) break;
    } else if (i > 0 && detail::seconds_since(t0) >= budget.wall_clock_s) {
      break;  // wall-clock mode always evaluates at least one
    }
    DiscreteArch arch = random_arch(space, arch_rng);
    TrainResult res =
        train_architecture(arch, prob, hp, sched, arch_keyed_rng(rng, arch));
    if (!res.failed && res.arch_psnr > best) {
      best = res.arch_psnr;
      out.best_index = i;
    }
    out.evaluated.push_back({std::move(arch), std::move(res)});
  }
  return out;
}

struct RunsToBeatResult {
  std::vector<int> counts;      // evaluations used per repetition
  std::vector<bool> censored;   // repetition hit the cap without beating
  double mean = 0.0;

  long censored_count() const {
    long c = 0;
    for (bool b : censored) c += b ? 1 : 0;
    return c;
  }
};

// How many random evaluations until one exceeds the threshold. A threshold
// of -inf is legal (every repetition stops after one evaluation).
inline RunsToBeatResult runs_to_beat(const SpaceSpec& space,
                                     const Problem& prob,
                                     const HyperParams& hp,
                                     const TrainSchedule& sched,
                                     double threshold_psnr, Rng rng,
                                     int repetitions = 10, int cap = 200) {
  if (std::isnan(threshold_psnr))
    throw std::invalid_argument("runs_to_beat: threshold must not be NaN");
  if (repetitions < 1 || cap < 1)
    throw std::invalid_argument("runs_to_beat: repetitions and cap must be >= 1");
  space.validate();
  RunsToBeatResult out;
  for (int r = 0; r < repetitions; ++r) {
    Rng rep = rng.split(static_cast<std::uint64_t>(r));
    Rng arch_rng = rep.split("arch");
    int count = 0;
    bool beaten = false;
    while (count < cap) {
      ++count;
      DiscreteArch arch = random_arch(space, arch_rng);
      TrainResult res = train_architecture(
          arch, prob, hp, sched,
          rep.split("train").split(static_cast<std::uint64_t>(count)));
      if (!res.failed && res.arch_psnr > threshold_psnr) {
        beaten = true;
        break;
      }
    }
    out.counts.push_back(count);
    out.censored.push_back(!beaten);
  }
  double acc = 0.0;
  for (int c : out.counts) acc += c;
  out.mean = acc / static_cast<double>(out.counts.size());
  return out;
}

}  // namespace das1d
