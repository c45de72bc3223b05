// Baseline protocols (fixed-op, random search, runs-to-beat) and the
// hyperband/KDE hyperparameter optimizer: schedule arithmetic, sampler
// behavior, determinism at any parallelism, and the JSON log format.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <vector>

#include "das1d/baselines.hpp"
#include "das1d/bohb.hpp"

using namespace das1d;

namespace {

SpaceSpec seq_space(int depth, std::vector<OperationKind> ops) {
  SpaceSpec s;
  s.topology = Topology::Sequential;
  s.depth = depth;
  s.opset = std::move(ops);
  return s;
}

TrainSchedule tiny_schedule() {
  TrainSchedule s;
  s.epochs = 2;
  s.steps_per_epoch = 3;
  s.batch_size = 8;
  s.warmup_epochs = 0;
  return s;
}

bool hp_eq(const HyperParams& a, const HyperParams& b) {
  return a.param_lr == b.param_lr && a.param_wd == b.param_wd &&
         a.param_warmup == b.param_warmup && a.alpha_lr == b.alpha_lr &&
         a.alpha_wd == b.alpha_wd && a.alpha_warmup == b.alpha_warmup &&
         a.alpha_scheduler == b.alpha_scheduler &&
         a.alpha_optimizer == b.alpha_optimizer;
}

// Ranges where every sampled config trains stably on the tiny schedules.
HPSpace tame_space() {
  HPSpace s;
  s.param_lr = {1e-4, 1e-2};
  s.param_wd = {1e-8, 1e-6};
  s.alpha_lr = {1e-4, 1e-2};
  s.alpha_wd = {1e-5, 1e-3};
  return s;
}

}  // namespace

TEST_CASE("budget policies validate per mode") {
  REQUIRE_NOTHROW(BudgetPolicy::by_count(3).validate());
  REQUIRE_NOTHROW(BudgetPolicy::by_wall_clock(1.5).validate());
  REQUIRE_THROWS_AS(BudgetPolicy::by_count(0).validate(),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(BudgetPolicy::by_wall_clock(0.0).validate(),
                    std::invalid_argument);
}

TEST_CASE("fixed-op baselines are plain uniform-architecture trainings") {
  const Problem prob;
  const SpaceSpec space = seq_space(2, good_opset());
  const TrainSchedule sched = tiny_schedule();
  const HyperParams hp = hp_preset("H1").hp;

  TrainResult a = fixed_op_baseline(OperationKind::Net, space, prob, hp,
                                    sched, Rng(5));
  TrainResult b = train_architecture(uniform_arch(space, OperationKind::Net),
                                     prob, hp, sched, Rng(5));
  REQUIRE_FALSE(a.failed);
  REQUIRE(a.arch_psnr == b.arch_psnr);

  DiscreteArch u = uniform_arch(space, OperationKind::LearnableGrad);
  REQUIRE(u.to_string() == "seq:LG,LG");

  REQUIRE_THROWS_AS(
      fixed_op_baseline(OperationKind::Roll, space, prob, hp, sched, Rng(1)),
      std::invalid_argument);
  REQUIRE_THROWS_AS(
      fixed_op_baseline(OperationKind::Noise, space, prob, hp, sched, Rng(1)),
      std::invalid_argument);
}

TEST_CASE("random search exhausts its budget and reports the max") {
  const Problem prob;
  const SpaceSpec space = seq_space(2, good_opset());
  const TrainSchedule sched = tiny_schedule();
  const HyperParams hp = hp_preset("H1").hp;

  RandomSearchResult rs = random_search(space, prob, hp, sched,
                                        BudgetPolicy::by_count(4), Rng(13));
  REQUIRE(rs.evaluated.size() == 4);

  SECTION("best is the max over the recorded list") {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& e : rs.evaluated)
      if (!e.result.failed) best = std::max(best, e.result.arch_psnr);
    REQUIRE(rs.best().result.arch_psnr == best);
    REQUIRE(rs.evaluated[static_cast<std::size_t>(rs.best_index)]
                .result.arch_psnr == best);
  }
  SECTION("same seed reproduces every record") {
    RandomSearchResult again = random_search(
        space, prob, hp, sched, BudgetPolicy::by_count(4), Rng(13));
    for (std::size_t i = 0; i < 4; ++i) {
      REQUIRE(again.evaluated[i].arch.to_string() ==
              rs.evaluated[i].arch.to_string());
      REQUIRE(again.evaluated[i].result.arch_psnr ==
              rs.evaluated[i].result.arch_psnr);
    }
  }
  SECTION("architecture-keyed streams let any record be reproduced alone") {
    const Rng base(13);
    for (const auto& e : rs.evaluated) {
      TrainResult r = train_architecture(e.arch, prob, hp, sched,
                                         arch_keyed_rng(base, e.arch));
      REQUIRE(r.arch_psnr == e.result.arch_psnr);
    }
  }
  SECTION("count one is the single-random-architecture baseline") {
    const Rng base(29);
    RandomSearchResult one = random_search(space, prob, hp, sched,
                                           BudgetPolicy::by_count(1), base);
    REQUIRE(one.evaluated.size() == 1);
    Rng arch_rng = base.split("arch");
    DiscreteArch a0 = random_arch(space, arch_rng);
    REQUIRE(one.evaluated[0].arch.to_string() == a0.to_string());
    TrainResult tr =
        train_architecture(a0, prob, hp, sched, arch_keyed_rng(base, a0));
    REQUIRE(one.best().result.arch_psnr == tr.arch_psnr);
  }
  SECTION("tiny wall-clock budget still evaluates once") {
    RandomSearchResult wc = random_search(
        space, prob, hp, sched, BudgetPolicy::by_wall_clock(1e-9), Rng(3));
    REQUIRE(wc.evaluated.size() == 1);
  }
  SECTION("all-diverging budgets leave no best") {
    HyperParams bad = hp;
    bad.param_lr = 1e200;
    RandomSearchResult rf = random_search(space, prob, bad, sched,
                                          BudgetPolicy::by_count(2), Rng(13));
    REQUIRE(rf.evaluated.size() == 2);
    REQUIRE(rf.evaluated[0].result.failed);
    REQUIRE(rf.best_index == -1);
    REQUIRE_THROWS_AS(rf.best(), std::runtime_error);
  }
}

TEST_CASE("runs-to-beat counts evaluations and censors at the cap") {
  const Problem prob;
  const SpaceSpec space = seq_space(2, good_opset());
  const TrainSchedule sched = tiny_schedule();
  const HyperParams hp = hp_preset("H1").hp;
  const double ninf = -std::numeric_limits<double>::infinity();

  SECTION("minus-infinity threshold is beaten immediately") {
    RunsToBeatResult r =
        runs_to_beat(space, prob, hp, sched, ninf, Rng(41), 3, 5);
    REQUIRE(r.counts == std::vector<int>{1, 1, 1});
    REQUIRE(r.mean == 1.0);
    REQUIRE(r.censored_count() == 0);
  }
  SECTION("unreachable threshold censors every repetition") {
    RunsToBeatResult r =
        runs_to_beat(space, prob, hp, sched, 1e9, Rng(41), 2, 2);
    REQUIRE(r.counts == std::vector<int>{2, 2});
    REQUIRE(r.mean == 2.0);
    REQUIRE(r.censored_count() == 2);
    REQUIRE(r.censored == std::vector<bool>{true, true});
  }
  SECTION("argument validation") {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(runs_to_beat(space, prob, hp, sched, nan, Rng(1)),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(runs_to_beat(space, prob, hp, sched, 0.0, Rng(1), 0, 5),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(runs_to_beat(space, prob, hp, sched, 0.0, Rng(1), 1, 0),
                      std::invalid_argument);
  }
  SECTION("deterministic in the seed") {
    RunsToBeatResult a =
        runs_to_beat(space, prob, hp, sched, 5.0, Rng(9), 2, 3);
    RunsToBeatResult b =
        runs_to_beat(space, prob, hp, sched, 5.0, Rng(9), 2, 3);
    REQUIRE(a.counts == b.counts);
    double acc = 0.0;
    for (int c : a.counts) acc += c;
    REQUIRE(a.mean == acc / static_cast<double>(a.counts.size()));
  }
}

TEST_CASE("hyperband bracket schedule for the 50-epoch budget") {
  const auto brackets = hyperband_brackets(50, 3);
  REQUIRE(brackets.size() == 3);

  REQUIRE(brackets[0].rungs.size() == 3);
  REQUIRE(brackets[0].rungs[0].n_configs == 9);
  REQUIRE(brackets[0].rungs[0].budget == 6);
  REQUIRE(brackets[0].rungs[1].n_configs == 3);
  REQUIRE(brackets[0].rungs[1].budget == 17);
  REQUIRE(brackets[0].rungs[2].n_configs == 1);
  REQUIRE(brackets[0].rungs[2].budget == 50);
  REQUIRE(brackets[0].evaluations() == 13);

  REQUIRE(brackets[1].rungs.size() == 2);
  REQUIRE(brackets[1].rungs[0].n_configs == 5);
  REQUIRE(brackets[1].rungs[0].budget == 17);
  REQUIRE(brackets[1].rungs[1].n_configs == 2);
  REQUIRE(brackets[1].rungs[1].budget == 50);
  REQUIRE(brackets[1].evaluations() == 7);

  // the narrowest bracket is a single full-budget rung
  REQUIRE(brackets[2].rungs.size() == 1);
  REQUIRE(brackets[2].rungs[0].n_configs == 3);
  REQUIRE(brackets[2].rungs[0].budget == 50);
  REQUIRE(brackets[2].evaluations() == 3);

  REQUIRE_THROWS_AS(hyperband_brackets(50, 1), std::invalid_argument);
  REQUIRE_THROWS_AS(hyperband_brackets(2, 3), std::invalid_argument);
}

TEST_CASE("config sampler stays in range and exploits good observations") {
  HPSpace space;  // full published ranges
  REQUIRE_NOTHROW(space.validate());
  HPSpace bad = space;
  bad.param_lr = {0.0, 1.0};
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

  SECTION("preset containment") {
    REQUIRE(space.contains(hp_preset("H1").hp));
    REQUIRE(space.contains(hp_preset("BOHB-Blur").hp));
    HyperParams out = hp_preset("H1").hp;
    out.param_lr = 2.0;
    REQUIRE_FALSE(space.contains(out));
  }
  SECTION("empty history draws uniformly within bounds") {
    Rng rng(55);
    for (int i = 0; i < 10000; ++i) {
      HyperParams hp = sample_config(space, {}, rng);
      REQUIRE(space.contains(hp));
    }
    // log-uniform: about half the param_lr draws sit below the geometric
    // mean of the range
    Rng r2(56);
    int below = 0;
    const double gm = std::sqrt(1e-5 * 1.0);
    for (int i = 0; i < 10000; ++i)
      if (sample_config(space, {}, r2).param_lr < gm) ++below;
    REQUIRE(below > 4500);
    REQUIRE(below < 5500);
  }
  SECTION("deterministic in the rng state") {
    Rng a(5), b(5);
    REQUIRE(hp_eq(sample_config(space, {}, a), sample_config(space, {}, b)));
  }
  SECTION("model phase prefers the optimizer shared by the top scorers") {
    std::vector<BohbRecord> hist;
    Rng hrng(77);
    for (int i = 0; i < 20; ++i) {
      const bool strong = i < 10;
      HyperParams hp;
      hp.param_lr = 1e-3 * std::exp(0.1 * hrng.normal());
      hp.param_wd = 1e-7 * std::exp(0.1 * hrng.normal());
      hp.alpha_lr = 1e-3 * std::exp(0.1 * hrng.normal());
      hp.alpha_wd = 1e-3 * std::exp(0.1 * hrng.normal());
      hp.alpha_optimizer = strong ? OptimizerKind::Adam
                                  : OptimizerKind::GradientDescent;
      BohbRecord rec;
      rec.config = hp;
      rec.budget = 50;
      rec.score = strong ? 20.0 + i : 5.0 + 0.1 * i;
      rec.iteration = i;
      rec.failed = false;
      hist.push_back(rec);
    }
    Rng rng(88);
    int adam = 0;
    for (int i = 0; i < 1000; ++i) {
      HyperParams hp = sample_config(space, hist, rng);
      REQUIRE(space.contains(hp));
      if (hp.alpha_optimizer == OptimizerKind::Adam) ++adam;
    }
    REQUIRE(adam > 600);  // well above the uniform 0.5
  }
  SECTION("objective names round trip") {
    REQUIRE(objective_from_name(objective_name(ObjectiveKind::OneShot)) ==
            ObjectiveKind::OneShot);
    REQUIRE(objective_from_name("architecture") ==
            ObjectiveKind::Architecture);
    REQUIRE_THROWS_AS(objective_from_name("bogus"), std::invalid_argument);
  }
}

TEST_CASE("evaluate_hp scores either objective from the same streams") {
  const Problem prob;
  const SpaceSpec sspec = seq_space(2, good_opset());
  TrainSchedule base = tiny_schedule();
  base.epochs = 1;
  const HyperParams hp = hp_preset("H1").hp;

  TrainSchedule at_budget = base;
  at_budget.epochs = 2;
  const Rng rng(61);

  BohbEval one = evaluate_hp(ObjectiveKind::OneShot, sspec, prob, base, hp,
                             2, rng);
  SearchResult sr = das_search(sspec, prob, hp, at_budget, rng.split("search"));
  REQUIRE_FALSE(one.failed);
  REQUIRE(one.score == sr.one_shot_psnr);

  BohbEval arch = evaluate_hp(ObjectiveKind::Architecture, sspec, prob, base,
                              hp, 2, rng);
  TrainResult tr =
      train_architecture(sr.arch, prob, hp, at_budget, rng.split("retrain"));
  REQUIRE_FALSE(arch.failed);
  REQUIRE(arch.score == tr.arch_psnr);

  HyperParams bad = hp;
  bad.param_lr = 1e200;
  BohbEval fail = evaluate_hp(ObjectiveKind::OneShot, sspec, prob, base, bad,
                              2, rng);
  REQUIRE(fail.failed);
  REQUIRE(fail.score == -std::numeric_limits<double>::infinity());
}

TEST_CASE("run_bohb logs every evaluation and promotes by score") {
  const Problem prob;
  const SpaceSpec sspec = seq_space(2, good_opset());
  const TrainSchedule base = tiny_schedule();
  const HPSpace space = tame_space();

  SECTION("a single one-config bracket returns that config") {
    std::vector<Bracket> br(1);
    br[0].rungs = {{1, 1}};
    BohbResult res = run_bohb(space, ObjectiveKind::OneShot, 1, sspec, prob,
                              base, Rng(7), 50, 3, 1, br);
    REQUIRE(res.log.size() == 1);
    REQUIRE(res.log[0].budget == 1);
    REQUIRE(res.log[0].iteration == 0);
    REQUIRE(res.best_iteration == 0);
    REQUIRE(hp_eq(res.best, res.log[0].config));
    REQUIRE(res.best_score == res.log[0].score);

    // full composition: the config comes from the sampler stream, the score
    // from the iteration-keyed evaluation stream
    const Rng rng(7);
    Rng sampler = rng.split("sample");
    HyperParams cfg = sample_config(space, {}, sampler);
    REQUIRE(hp_eq(res.log[0].config, cfg));
    BohbEval ev =
        evaluate_hp(ObjectiveKind::OneShot, sspec, prob, base, cfg, 1,
                    rng.split("eval").split(static_cast<std::uint64_t>(0)));
    REQUIRE(res.log[0].score == ev.score);
  }
  SECTION("log length follows the bracket schedule across iterations") {
    std::vector<Bracket> br(1);
    br[0].rungs = {{2, 1}, {1, 2}};
    BohbResult res = run_bohb(space, ObjectiveKind::OneShot, 2, sspec, prob,
                              base, Rng(11), 50, 3, 1, br);
    REQUIRE(res.log.size() == 6);
    const int budgets[] = {1, 1, 2, 1, 1, 2};
    for (std::size_t i = 0; i < 6; ++i) {
      REQUIRE(res.log[i].budget == budgets[i]);
      REQUIRE(res.log[i].iteration == static_cast<int>(i));
    }
    // best equals the max score among full-budget records
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& r : res.log)
      if (!r.failed && r.budget == 2) best = std::max(best, r.score);
    REQUIRE(res.best_score == best);
  }
  SECTION("the rung survivor is the best scorer of the previous rung") {
    std::vector<Bracket> br(1);
    br[0].rungs = {{3, 1}, {1, 2}};
    BohbResult res = run_bohb(space, ObjectiveKind::OneShot, 1, sspec, prob,
                              base, Rng(19), 50, 3, 1, br);
    REQUIRE(res.log.size() == 4);
    std::size_t winner = 0;
    for (std::size_t i = 1; i < 3; ++i)
      if (res.log[i].score > res.log[winner].score) winner = i;
    REQUIRE(hp_eq(res.log[3].config, res.log[winner].config));
  }
  SECTION("parallel execution leaves the log unchanged") {
    std::vector<Bracket> br(1);
    br[0].rungs = {{4, 1}, {2, 2}};
    BohbResult seq = run_bohb(space, ObjectiveKind::OneShot, 1, sspec, prob,
                              base, Rng(23), 50, 3, 1, br);
    BohbResult par = run_bohb(space, ObjectiveKind::OneShot, 1, sspec, prob,
                              base, Rng(23), 50, 3, 4, br);
    REQUIRE(seq.log.size() == par.log.size());
    for (std::size_t i = 0; i < seq.log.size(); ++i) {
      REQUIRE(hp_eq(seq.log[i].config, par.log[i].config));
      REQUIRE(seq.log[i].score == par.log[i].score);
      REQUIRE(seq.log[i].budget == par.log[i].budget);
      REQUIRE(seq.log[i].failed == par.log[i].failed);
    }
    REQUIRE(hp_eq(seq.best, par.best));
  }
  SECTION("all-diverging space surfaces an error") {
    HPSpace doomed = space;
    doomed.param_lr = {1e150, 1e200};
    std::vector<Bracket> br(1);
    br[0].rungs = {{1, 2}};
    REQUIRE_THROWS_AS(run_bohb(doomed, ObjectiveKind::OneShot, 1, sspec, prob,
                               base, Rng(31), 50, 3, 1, br),
                      std::runtime_error);
  }
  SECTION("iteration count validation") {
    REQUIRE_THROWS_AS(run_bohb(space, ObjectiveKind::OneShot, 0, sspec, prob,
                               base, Rng(1)),
                      std::invalid_argument);
  }
}

TEST_CASE("hyperparameter JSON round trips exactly") {
  for (const auto& preset : hp_presets()) {
    HyperParams back = hp_from_json(hp_to_json(preset.hp));
    REQUIRE(hp_eq(back, preset.hp));
  }

  BohbRecord rec;
  rec.config = hp_preset("BOHB-DAS-single").hp;
  rec.budget = 17;
  rec.score = 18.25;
  rec.iteration = 42;
  rec.failed = false;
  BohbRecord back = bohb_record_from_json(bohb_record_to_json(rec));
  REQUIRE(hp_eq(back.config, rec.config));
  REQUIRE(back.budget == 17);
  REQUIRE(back.score == 18.25);
  REQUIRE(back.iteration == 42);
  REQUIRE_FALSE(back.failed);

  // a failed record serializes its score as null and restores to -inf
  rec.failed = true;
  nlohmann::json j = bohb_record_to_json(rec);
  REQUIRE(j.at("score").is_null());
  BohbRecord failed_back = bohb_record_from_json(j);
  REQUIRE(failed_back.failed);
  REQUIRE(failed_back.score == -std::numeric_limits<double>::infinity());
}

TEST_CASE("JSON-lines log files round trip") {
  std::vector<BohbRecord> log(3);
  log[0].config = hp_preset("H1").hp;
  log[0].budget = 6;
  log[0].score = 12.5;
  log[0].iteration = 0;
  log[1].config = hp_preset("H2").hp;
  log[1].budget = 17;
  log[1].score = 14.25;
  log[1].iteration = 1;
  log[2].config = hp_preset("BOHB-Blur").hp;
  log[2].budget = 50;
  log[2].iteration = 2;
  log[2].failed = true;

  const auto path = std::filesystem::temp_directory_path() /
                    "das1d_test_bohb_log.jsonl";
  write_bohb_jsonl(log, path.string());
  std::vector<BohbRecord> back = load_bohb_jsonl(path.string());
  std::filesystem::remove(path);

  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    REQUIRE(hp_eq(back[i].config, log[i].config));
    REQUIRE(back[i].budget == log[i].budget);
    REQUIRE(back[i].iteration == log[i].iteration);
    REQUIRE(back[i].failed == log[i].failed);
  }
  REQUIRE(back[1].score == 14.25);
  REQUIRE(back[2].score == -std::numeric_limits<double>::infinity());
}
