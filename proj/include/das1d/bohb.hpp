#pragma once

// Hyperparameter optimization: hyperband successive halving over epoch
// budgets, with a TPE-flavored kernel-density sampler that proposes configs
// by maximizing the good/bad density ratio once enough observations exist.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "das1d/engine.hpp"
#include "das1d/harness.hpp"

namespace das1d {

struct HPSpace {
  struct Range {
    double lo, hi;
  };
  Range param_lr{1e-5, 1.0};
  Range param_wd{1e-8, 0.1};
  Range alpha_lr{1e-5, 0.1};
  Range alpha_wd{1e-5, 0.1};
  // Categorical dims (always both values): param_warmup, alpha_warmup,
  // alpha_scheduler {none,linear}, alpha_optimizer {adam,gradient-descent}.

  std::array<Range, 4> cont_ranges() const {
    return {param_lr, param_wd, alpha_lr, alpha_wd};
  }

  void validate() const {
    for (const auto& r : cont_ranges())
      if (!(r.lo > 0.0) || !(r.hi > r.lo))
        throw std::invalid_argument("HPSpace: ranges need 0 < lo < hi");
  }

  bool contains(const HyperParams& hp) const {
    auto in = [](double v, Range r) { return v >= r.lo && v <= r.hi; };
    return in(hp.param_lr, param_lr) && in(hp.param_wd, param_wd) &&
           in(hp.alpha_lr, alpha_lr) && in(hp.alpha_wd, alpha_wd);
  }
};

struct BohbRecord {
  HyperParams config;
  int budget = 0;  // epochs
  double score = -std::numeric_limits<double>::infinity();
  int iteration = 0;  // global evaluation index
  bool failed = false;
};

namespace detail {

constexpr int kMinModelPoints = 8;
constexpr double kTopFraction = 0.15;
constexpr int kSamplerCandidates = 64;
constexpr double kUniformFraction = 1.0 / 3.0;
constexpr double kCatBandwidth = 0.2;  // Aitchison-Aitken lambda, K=2

inline std::array<double, 4> cont_log(const HyperParams& hp) {
  return {std::log(hp.param_lr), std::log(hp.param_wd),
          std::log(hp.alpha_lr), std::log(hp.alpha_wd)};
}

inline std::array<int, 4> cat_indices(const HyperParams& hp) {
  return {hp.param_warmup ? 1 : 0, hp.alpha_warmup ? 1 : 0,
          hp.alpha_scheduler == AlphaScheduler::Linear ? 1 : 0,
          hp.alpha_optimizer == OptimizerKind::Adam ? 1 : 0};
}

inline HyperParams assemble_hp(const HPSpace& space,
                               const std::array<double, 4>& logv,
                               const std::array<int, 4>& cats) {
  const auto ranges = space.cont_ranges();
  std::array<double, 4> v{};
  for (int d = 0; d < 4; ++d)
    v[static_cast<std::size_t>(d)] =
        std::clamp(std::exp(logv[static_cast<std::size_t>(d)]),
                   ranges[static_cast<std::size_t>(d)].lo,
                   ranges[static_cast<std::size_t>(d)].hi);
  HyperParams hp;
  hp.param_lr = v[0];
  hp.param_wd = v[1];
  hp.alpha_lr = v[2];
  hp.alpha_wd = v[3];
  hp.param_warmup = cats[0] == 1;
  hp.alpha_warmup = cats[1] == 1;
  hp.alpha_scheduler = cats[2] == 1 ? AlphaScheduler::Linear
                                    : AlphaScheduler::None;
  hp.alpha_optimizer = cats[3] == 1 ? OptimizerKind::Adam
                                    : OptimizerKind::GradientDescent;
  return hp;
}

// Factorized density model: per-dim Gaussian KDE in log space for the
// continuous dims, Aitchison-Aitken-smoothed frequencies for the categorical
// ones.
struct KdeModel {
  std::vector<std::array<double, 4>> cont;
  std::array<double, 4> bandwidth{};
  std::array<std::array<double, 2>, 4> cat_prob{};
};

inline KdeModel fit_kde(const std::vector<const BohbRecord*>& recs,
                        const HPSpace& space) {
  KdeModel m;
  std::vector<std::array<int, 4>> cats;
  for (const auto* r : recs) {
    m.cont.push_back(cont_log(r->config));
    cats.push_back(cat_indices(r->config));
  }
  const double n = static_cast<double>(recs.size());
  const auto ranges = space.cont_ranges();
  for (std::size_t d = 0; d < 4; ++d) {
    double mean = 0.0;
    for (const auto& v : m.cont) mean += v[d];
    mean /= n;
    double ss = 0.0;
    for (const auto& v : m.cont) ss += (v[d] - mean) * (v[d] - mean);
    const double sd = n > 1.0 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    const double span = std::log(ranges[d].hi) - std::log(ranges[d].lo);
    // Normal reference rule with a floor so identical points keep a usable
    // kernel width.
    m.bandwidth[d] = std::max(1.059 * sd * std::pow(n, -0.2), 1e-3 * span);
    double ones = 0.0;
    for (const auto& c : cats) ones += c[d];
    const double p1 = (ones / n) * (1.0 - kCatBandwidth) +
                      (1.0 - ones / n) * kCatBandwidth;
    m.cat_prob[d] = {1.0 - p1, p1};
  }
  return m;
}

inline double kde_density(const KdeModel& m, const std::array<double, 4>& lv,
                          const std::array<int, 4>& cv) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  double p = 1.0;
  for (std::size_t d = 0; d < 4; ++d) {
    double acc = 0.0;
    for (const auto& pt : m.cont) {
      const double z = (lv[d] - pt[d]) / m.bandwidth[d];
      acc += std::exp(-0.5 * z * z);
    }
    p *= acc * inv_sqrt_2pi / (m.bandwidth[d] * static_cast<double>(m.cont.size()));
  }
  for (std::size_t d = 0; d < 4; ++d)
    p *= m.cat_prob[d][static_cast<std::size_t>(cv[d])];
  return p;
}

inline void kde_draw(const KdeModel& m, const HPSpace& space, Rng& rng,
                     std::array<double, 4>& lv, std::array<int, 4>& cv) {
  const auto ranges = space.cont_ranges();
  for (std::size_t d = 0; d < 4; ++d) {
    const auto& c = m.cont[static_cast<std::size_t>(
        rng.uniform_int(static_cast<int>(m.cont.size())))];
    lv[d] = std::clamp(c[d] + m.bandwidth[d] * rng.normal(),
                       std::log(ranges[d].lo), std::log(ranges[d].hi));
  }
  for (std::size_t d = 0; d < 4; ++d)
    cv[d] = rng.uniform() < m.cat_prob[d][1] ? 1 : 0;
}

}  // namespace detail

inline HyperParams uniform_sample(const HPSpace& space, Rng& rng) {
  auto logu = [&](HPSpace::Range r) {
    return std::clamp(std::exp(rng.uniform(std::log(r.lo), std::log(r.hi))),
                      r.lo, r.hi);
  };
  HyperParams hp;
  hp.param_lr = logu(space.param_lr);
  hp.param_wd = logu(space.param_wd);
  hp.param_warmup = rng.uniform_int(2) == 1;
  hp.alpha_lr = logu(space.alpha_lr);
  hp.alpha_wd = logu(space.alpha_wd);
  hp.alpha_warmup = rng.uniform_int(2) == 1;
  hp.alpha_scheduler = rng.uniform_int(2) == 1 ? AlphaScheduler::Linear
                                               : AlphaScheduler::None;
  hp.alpha_optimizer = rng.uniform_int(2) == 1
                           ? OptimizerKind::Adam
                           : OptimizerKind::GradientDescent;
  return hp;
}

// Uniform until the largest budget accumulates kMinModelPoints successful
// observations; afterwards 2/3 of draws maximize the good/bad KDE ratio over
// kSamplerCandidates proposals from the good model, 1/3 stay uniform.
inline HyperParams sample_config(const HPSpace& space,
                                 const std::vector<BohbRecord>& history,
                                 Rng& rng) {
  space.validate();
  std::map<int, std::vector<const BohbRecord*>> by_budget;
  for (const auto& r : history)
    if (!r.failed && std::isfinite(r.score)) by_budget[r.budget].push_back(&r);
  const std::vector<const BohbRecord*>* obs = nullptr;
  for (auto it = by_budget.rbegin(); it != by_budget.rend(); ++it)
    if (static_cast<int>(it->second.size()) >= detail::kMinModelPoints) {
      obs = &it->second;
      break;
    }
  if (!obs) return uniform_sample(space, rng);
  if (rng.uniform() < detail::kUniformFraction)
    return uniform_sample(space, rng);

  std::vector<const BohbRecord*> sorted = *obs;
  std::sort(sorted.begin(), sorted.end(),
            [](const BohbRecord* a, const BohbRecord* b) {
              if (a->score != b->score) return a->score > b->score;
              return a->iteration < b->iteration;
            });
  const std::size_t n_good = std::max<std::size_t>(
      1, static_cast<std::size_t>(
             std::ceil(detail::kTopFraction * static_cast<double>(sorted.size()))));
  const std::vector<const BohbRecord*> good(sorted.begin(),
                                            sorted.begin() + static_cast<std::ptrdiff_t>(n_good));
  const std::vector<const BohbRecord*> bad(sorted.begin() + static_cast<std::ptrdiff_t>(n_good),
                                           sorted.end());
  const detail::KdeModel good_model = detail::fit_kde(good, space);
  const detail::KdeModel bad_model = detail::fit_kde(bad, space);

  double best_ratio = -1.0;
  std::array<double, 4> best_lv{};
  std::array<int, 4> best_cv{};
  for (int c = 0; c < detail::kSamplerCandidates; ++c) {
    std::array<double, 4> lv{};
    std::array<int, 4> cv{};
    detail::kde_draw(good_model, space, rng, lv, cv);
    const double ratio = detail::kde_density(good_model, lv, cv) /
                         std::max(detail::kde_density(bad_model, lv, cv), 1e-300);
    if (ratio > best_ratio) {
      best_ratio = ratio;
      best_lv = lv;
      best_cv = cv;
    }
  }
  return detail::assemble_hp(space, best_lv, best_cv);
}

struct Rung {
  int n_configs = 0;
  int budget = 0;
};

struct Bracket {
  std::vector<Rung> rungs;

  int evaluations() const {
    int n = 0;
    for (const auto& r : rungs) n += r.n_configs;
    return n;
  }
};

// Three budget levels {max/eta^2, max/eta, max} rounded to nearest integer;
// bracket s starts with ceil((s_max+1) * eta^s / (s+1)) configs and promotes
// the top ceil(k/eta) at each rung.
inline std::vector<Bracket> hyperband_brackets(int max_budget, int eta) {
  if (eta < 2) throw std::invalid_argument("hyperband_brackets: eta must be >= 2");
  if (max_budget < eta)
    throw std::invalid_argument("hyperband_brackets: max_budget must be >= eta");
  constexpr int s_max = 2;
  std::array<int, s_max + 1> budgets{};
  for (int i = 0; i <= s_max; ++i)
    budgets[static_cast<std::size_t>(i)] = std::max(
        1, static_cast<int>(std::lround(
               static_cast<double>(max_budget) / std::pow(eta, s_max - i))));
  std::vector<Bracket> out;
  for (int s = s_max; s >= 0; --s) {
    Bracket br;
    int n = static_cast<int>(std::ceil(static_cast<double>(s_max + 1) *
                                       std::pow(eta, s) /
                                       static_cast<double>(s + 1)));
    for (int i = 0; i <= s; ++i) {
      br.rungs.push_back({n, budgets[static_cast<std::size_t>(s_max - s + i)]});
      n = (n + eta - 1) / eta;
    }
    out.push_back(std::move(br));
  }
  return out;
}

enum class ObjectiveKind { OneShot, Architecture };

inline const char* objective_name(ObjectiveKind k) {
  return k == ObjectiveKind::OneShot ? "one-shot" : "architecture";
}

inline ObjectiveKind objective_from_name(std::string_view s) {
  if (s == "one-shot") return ObjectiveKind::OneShot;
  if (s == "architecture") return ObjectiveKind::Architecture;
  throw std::invalid_argument("unknown objective '" + std::string(s) +
                              "' (expected one-shot|architecture)");
}

struct BohbEval {
  double score = -std::numeric_limits<double>::infinity();
  bool failed = true;
};

// Scores one config at a budget (epochs). Any config can be scored under
// either objective, so configs tuned one-shot can be re-scored on the full
// pipeline without a new search over hyperparameters.
inline BohbEval evaluate_hp(ObjectiveKind kind, const SpaceSpec& space,
                            const Problem& prob, const TrainSchedule& base,
                            const HyperParams& hp, int budget_epochs,
                            Rng rng) {
  TrainSchedule sched = base;
  sched.epochs = budget_epochs;
  BohbEval out;
  SearchResult sr = das_search(space, prob, hp, sched, rng.split("search"));
  if (sr.failed || !std::isfinite(sr.one_shot_psnr)) return out;
  if (kind == ObjectiveKind::OneShot) {
    out.score = sr.one_shot_psnr;
    out.failed = false;
    return out;
  }
  TrainResult tr =
      train_architecture(sr.arch, prob, hp, sched, rng.split("retrain"));
  if (tr.failed || !std::isfinite(tr.arch_psnr)) return out;
  out.score = tr.arch_psnr;
  out.failed = false;
  return out;
}

struct BohbResult {
  HyperParams best;
  double best_score = -std::numeric_limits<double>::infinity();
  int best_iteration = -1;
  std::vector<BohbRecord> log;
};

// `iterations` counts bracket executions, cycling through the bracket
// schedule. Evaluations within a rung may run in parallel; the sampler only
// advances between rungs, and each evaluation's stream is keyed by its
// global iteration index, so the log is identical at any parallelism.
inline BohbResult run_bohb(const HPSpace& space, ObjectiveKind kind,
                           int iterations, const SpaceSpec& sspec,
                           const Problem& prob,
                           const TrainSchedule& base_sched, Rng rng,
                           int max_budget = 50, int eta = 3,
                           int parallelism = 1,
                           std::vector<Bracket> brackets = {}) {
  if (iterations < 1)
    throw std::invalid_argument("run_bohb: iterations must be >= 1");
  space.validate();
  sspec.validate();
  base_sched.validate();
  if (brackets.empty()) brackets = hyperband_brackets(max_budget, eta);
  int full_budget = 0;
  for (const auto& b : brackets)
    for (const auto& r : b.rungs) full_budget = std::max(full_budget, r.budget);

  Rng sampler = rng.split("sample");
  const Rng eval_base = rng.split("eval");
  BohbResult out;
  int iter_counter = 0;

  for (int it = 0; it < iterations; ++it) {
    const Bracket& br = brackets[static_cast<std::size_t>(it) % brackets.size()];
    std::vector<HyperParams> configs;
    configs.reserve(static_cast<std::size_t>(br.rungs[0].n_configs));
    for (int i = 0; i < br.rungs[0].n_configs; ++i)
      configs.push_back(sample_config(space, out.log, sampler));

    for (std::size_t ri = 0; ri < br.rungs.size(); ++ri) {
      const Rung& rung = br.rungs[ri];
      std::vector<BohbRecord> recs(configs.size());
      for (std::size_t i = 0; i < configs.size(); ++i) {
        recs[i].config = configs[i];
        recs[i].budget = rung.budget;
        recs[i].iteration = iter_counter++;
      }
      auto eval_one = [&](std::size_t i) {
        const BohbEval ev = evaluate_hp(
            kind, sspec, prob, base_sched, recs[i].config, rung.budget,
            eval_base.split(static_cast<std::uint64_t>(recs[i].iteration)));
        recs[i].score = ev.score;
        recs[i].failed = ev.failed;
      };
      const int workers =
          std::max(1, std::min<int>(parallelism, static_cast<int>(recs.size())));
      if (workers == 1) {
        for (std::size_t i = 0; i < recs.size(); ++i) eval_one(i);
      } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(workers));
        for (int w = 0; w < workers; ++w)
          pool.emplace_back([&]() {
            for (std::size_t i = next.fetch_add(1); i < recs.size();
                 i = next.fetch_add(1))
              eval_one(i);
          });
        for (auto& t : pool) t.join();
      }

      for (const auto& r : recs) {
        if (!r.failed && r.budget == full_budget && r.score > out.best_score) {
          out.best_score = r.score;
          out.best = r.config;
          out.best_iteration = r.iteration;
        }
      }
      if (ri + 1 < br.rungs.size()) {
        std::vector<std::size_t> order(recs.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::sort(order.begin(), order.end(),
                  [&](std::size_t a, std::size_t b) {
                    if (recs[a].score != recs[b].score)
                      return recs[a].score > recs[b].score;
                    return recs[a].iteration < recs[b].iteration;
                  });
        const int keep = br.rungs[ri + 1].n_configs;
        std::vector<HyperParams> next_configs;
        next_configs.reserve(static_cast<std::size_t>(keep));
        for (int k = 0; k < keep; ++k)
          next_configs.push_back(recs[order[static_cast<std::size_t>(k)]].config);
        configs = std::move(next_configs);
      }
      for (auto& r : recs) out.log.push_back(std::move(r));
    }
  }
  if (out.best_iteration < 0)
    throw std::runtime_error("run_bohb: every full-budget evaluation failed");
  return out;
}

inline nlohmann::json hp_to_json(const HyperParams& hp) {
  nlohmann::json j;
  j["param_lr"] = hp.param_lr;
  j["param_wd"] = hp.param_wd;
  j["param_warmup"] = hp.param_warmup;
  j["alpha_lr"] = hp.alpha_lr;
  j["alpha_wd"] = hp.alpha_wd;
  j["alpha_warmup"] = hp.alpha_warmup;
  j["alpha_scheduler"] = scheduler_name(hp.alpha_scheduler);
  j["alpha_optimizer"] = optimizer_name(hp.alpha_optimizer);
  return j;
}

inline HyperParams hp_from_json(const nlohmann::json& j) {
  HyperParams hp;
  hp.param_lr = j.at("param_lr").get<double>();
  hp.param_wd = j.at("param_wd").get<double>();
  hp.param_warmup = j.at("param_warmup").get<bool>();
  hp.alpha_lr = j.at("alpha_lr").get<double>();
  hp.alpha_wd = j.at("alpha_wd").get<double>();
  hp.alpha_warmup = j.at("alpha_warmup").get<bool>();
  hp.alpha_scheduler =
      scheduler_from_name(j.at("alpha_scheduler").get<std::string>());
  hp.alpha_optimizer =
      optimizer_from_name(j.at("alpha_optimizer").get<std::string>());
  return hp;
}

inline nlohmann::json bohb_record_to_json(const BohbRecord& r) {
  nlohmann::json j = hp_to_json(r.config);
  j["budget"] = r.budget;
  j["score"] = r.failed ? nlohmann::json() : nlohmann::json(r.score);
  j["iteration"] = r.iteration;
  j["failed"] = r.failed;
  return j;
}

inline BohbRecord bohb_record_from_json(const nlohmann::json& j) {
  BohbRecord r;
  r.config = hp_from_json(j);
  r.budget = j.at("budget").get<int>();
  r.failed = j.at("failed").get<bool>();
  r.score = j.at("score").is_null() ? -std::numeric_limits<double>::infinity()
                                    : j.at("score").get<double>();
  r.iteration = j.at("iteration").get<int>();
  return r;
}

inline void write_bohb_jsonl(const std::vector<BohbRecord>& log,
                             const std::string& path) {
  auto f = detail::open_out(path);
  for (const auto& r : log) f << bohb_record_to_json(r).dump() << "\n";
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::vector<BohbRecord> load_bohb_jsonl(const std::string& path) {
  auto f = detail::open_in(path);
  std::vector<BohbRecord> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(bohb_record_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

}  // namespace das1d
