#pragma once

// Experiment configuration and command dispatch. Config resolution is
// layered: built-in defaults, then a JSON file, then key=value overrides.
// Unknown keys and out-of-range values are rejected by name before anything
// runs.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "das1d/bohb.hpp"
#include "das1d/harness.hpp"

namespace das1d {

inline constexpr const char* kOutputDirEnv = "DAS1D_OUTPUT_DIR";

struct ExperimentConfig {
  // data
  Degradation degradation = Degradation::Blur;
  CosineConfig data{};
  double layer_noise = 0.10;
  // search space
  Topology topology = Topology::Sequential;
  int depth = 10;
  int cells = 2;
  int states = 5;
  std::string opset = "all";  // good|all
  bool global_residual = true;
  // method + hyperparameters
  Method method = Method::Das;
  std::string hp_label = "H1";
  HyperParams hp;
  // schedule + study
  TrainSchedule schedule;
  int n_trials = 25;
  std::uint64_t base_seed = 0;
  std::string output_dir = ".";
  std::string study_id = "study";
  int parallelism = 1;
  // baselines
  BudgetPolicy budget = BudgetPolicy::by_count(5);
  OperationKind fixed_kind = OperationKind::Net;
  std::string arch;  // retrain verb
  // bohb
  int bohb_iterations = 128;
  ObjectiveKind objective = ObjectiveKind::OneShot;
  int bohb_max_budget = 50;
  int bohb_eta = 3;
  std::vector<Bracket> bohb_brackets;  // empty: hyperband_brackets()
  HPSpace hp_space;

  SpaceSpec space_spec() const {
    SpaceSpec s;
    s.topology = topology;
    s.depth = depth;
    s.cells = cells;
    s.states = states;
    s.opset = opset == "good" ? good_opset() : all_opset(topology);
    s.global_residual = global_residual;
    return s;
  }

  Problem problem() const {
    return Problem::make(degradation, data, layer_noise);
  }

  StudyConfig study_config() const {
    StudyConfig sc;
    sc.study_id = study_id;
    sc.method = method;
    sc.fixed_kind = fixed_kind;
    sc.budget = budget;
    sc.space = space_spec();
    sc.problem = problem();
    sc.hp = hp;
    sc.hp_label = hp_label;
    sc.sched = schedule;
    sc.n_trials = n_trials;
    sc.base_seed = base_seed;
    sc.parallelism = parallelism;
    return sc;
  }

  void validate() const {
    data.validate();
    space_spec().validate();
    hp.validate();
    schedule.validate();
    budget.validate();
    hp_space.validate();
    if (method == Method::FixedOp && !is_benign(fixed_kind))
      throw std::invalid_argument(
          "fixed_op must be a trainable operation (LG|Net)");
  }
};

namespace detail {

inline long cfg_int(const nlohmann::json& v, const std::string& key, long lo,
                    long hi) {
  if (!v.is_number_integer())
    throw std::invalid_argument("config key '" + key + "' expects an integer");
  const long x = v.get<long>();
  if (x < lo || x > hi)
    throw std::invalid_argument("config key '" + key + "' must be in [" +
                                std::to_string(lo) + ", " + std::to_string(hi) +
                                "], got " + std::to_string(x));
  return x;
}

inline double cfg_real(const nlohmann::json& v, const std::string& key,
                       double lo, double hi) {
  if (!v.is_number())
    throw std::invalid_argument("config key '" + key + "' expects a number");
  const double x = v.get<double>();
  if (!(x >= lo) || !(x <= hi)) {
    std::ostringstream msg;
    msg << "config key '" << key << "' must be in [" << lo << ", " << hi
        << "], got " << x;
    throw std::invalid_argument(msg.str());
  }
  return x;
}

inline bool cfg_bool(const nlohmann::json& v, const std::string& key) {
  if (!v.is_boolean())
    throw std::invalid_argument("config key '" + key +
                                "' expects true or false");
  return v.get<bool>();
}

inline std::string cfg_str(const nlohmann::json& v, const std::string& key) {
  if (!v.is_string())
    throw std::invalid_argument("config key '" + key + "' expects a string");
  return v.get<std::string>();
}

// "9x6,3x17,1x50;5x17,2x50" -> brackets of rungs.
inline std::vector<Bracket> parse_bracket_string(const std::string& text,
                                                 const std::string& key) {
  std::vector<Bracket> out;
  std::stringstream brackets(text);
  std::string one;
  while (std::getline(brackets, one, ';')) {
    Bracket br;
    std::stringstream rungs(one);
    std::string rung;
    while (std::getline(rungs, rung, ',')) {
      int n = 0, b = 0;
      char x = 0;
      std::istringstream rs(rung);
      if (!(rs >> n >> x >> b) || x != 'x' || n < 1 || b < 1)
        throw std::invalid_argument("config key '" + key +
                                    "' expects rungs like 9x6,3x17;3x50");
      br.rungs.push_back({n, b});
    }
    if (br.rungs.empty())
      throw std::invalid_argument("config key '" + key + "': empty bracket");
    out.push_back(std::move(br));
  }
  return out;
}

inline std::vector<Bracket> parse_brackets(const nlohmann::json& v,
                                           const std::string& key) {
  if (v.is_string()) return parse_bracket_string(v.get<std::string>(), key);
  if (!v.is_array())
    throw std::invalid_argument("config key '" + key +
                                "' expects an array of brackets");
  std::vector<Bracket> out;
  for (const auto& jb : v) {
    Bracket br;
    if (!jb.is_array() || jb.empty())
      throw std::invalid_argument("config key '" + key +
                                  "': each bracket is a non-empty array");
    for (const auto& jr : jb) {
      if (!jr.is_array() || jr.size() != 2)
        throw std::invalid_argument("config key '" + key +
                                    "': each rung is [n_configs, budget]");
      Rung r{static_cast<int>(cfg_int(jr[0], key, 1, 1000000)),
             static_cast<int>(cfg_int(jr[1], key, 1, 1000000))};
      br.rungs.push_back(r);
    }
    out.push_back(std::move(br));
  }
  return out;
}

}  // namespace detail

// Routes one dotted key to its field, with range checks that name the key
// and the accepted range. Shared by file loading and key=value overrides.
inline void config_set(ExperimentConfig& cfg, const std::string& key,
                       const nlohmann::json& v) {
  using detail::cfg_bool;
  using detail::cfg_int;
  using detail::cfg_real;
  using detail::cfg_str;

  if (key == "data.degradation" || key == "degradation") {
    const std::string s = cfg_str(v, key);
    if (s == "blur")
      cfg.degradation = Degradation::Blur;
    else if (s == "downsample")
      cfg.degradation = Degradation::BlurDownsample;
    else
      throw std::invalid_argument("config key '" + key + "': unknown value '" +
                                  s + "' (expected blur|downsample)");
  } else if (key == "data.noise_sigma" || key == "noise") {
    cfg.data.sigma_n = cfg_real(v, key, 0.0, 1e6);
  } else if (key == "data.n" || key == "n") {
    cfg.data.n = static_cast<int>(cfg_int(v, key, 8, 1000000));
  } else if (key == "data.layer_noise" || key == "layer_noise") {
    cfg.layer_noise = cfg_real(v, key, 0.0, 1e6);
  } else if (key == "space.topology" || key == "space" || key == "topology") {
    const std::string s = cfg_str(v, key);
    if (s == "sequential" || s == "seq")
      cfg.topology = Topology::Sequential;
    else if (s == "cell")
      cfg.topology = Topology::Cell;
    else
      throw std::invalid_argument("config key '" + key + "': unknown value '" +
                                  s + "' (expected sequential|cell)");
  } else if (key == "space.depth" || key == "depth") {
    cfg.depth = static_cast<int>(cfg_int(v, key, 1, 10000));
  } else if (key == "space.cells" || key == "cells") {
    cfg.cells = static_cast<int>(cfg_int(v, key, 1, 100));
  } else if (key == "space.states" || key == "states") {
    cfg.states = static_cast<int>(cfg_int(v, key, 2, 100));
  } else if (key == "space.opset" || key == "opset") {
    const std::string s = cfg_str(v, key);
    if (s != "good" && s != "all")
      throw std::invalid_argument("config key '" + key + "': unknown value '" +
                                  s + "' (expected good|all)");
    cfg.opset = s;
  } else if (key == "space.global_residual" || key == "residual") {
    cfg.global_residual = cfg_bool(v, key);
  } else if (key == "method") {
    const std::string s = cfg_str(v, key);
    const auto m = method_from_name(s);
    if (!m)
      throw std::invalid_argument(
          "config key 'method': unknown value '" + s +
          "' (expected das|das-single|random|random-search|fixed-op)");
    cfg.method = *m;
  } else if (key == "hp") {
    const HpPreset preset = hp_preset(cfg_str(v, key));
    cfg.hp = preset.hp;
    cfg.hp_label = preset.label;
  } else if (key == "hp.param_lr") {
    cfg.hp.param_lr = cfg_real(v, key, 0.0, 1e3);
    cfg.hp_label = "custom";
  } else if (key == "hp.param_wd") {
    cfg.hp.param_wd = cfg_real(v, key, 0.0, 1e3);
    cfg.hp_label = "custom";
  } else if (key == "hp.param_warmup") {
    cfg.hp.param_warmup = cfg_bool(v, key);
    cfg.hp_label = "custom";
  } else if (key == "hp.alpha_lr") {
    cfg.hp.alpha_lr = cfg_real(v, key, 0.0, 1e3);
    cfg.hp_label = "custom";
  } else if (key == "hp.alpha_wd") {
    cfg.hp.alpha_wd = cfg_real(v, key, 0.0, 1e3);
    cfg.hp_label = "custom";
  } else if (key == "hp.alpha_warmup") {
    cfg.hp.alpha_warmup = cfg_bool(v, key);
    cfg.hp_label = "custom";
  } else if (key == "hp.alpha_scheduler") {
    cfg.hp.alpha_scheduler = scheduler_from_name(cfg_str(v, key));
    cfg.hp_label = "custom";
  } else if (key == "hp.alpha_optimizer") {
    cfg.hp.alpha_optimizer = optimizer_from_name(cfg_str(v, key));
    cfg.hp_label = "custom";
  } else if (key == "schedule.epochs" || key == "epochs") {
    cfg.schedule.epochs = static_cast<int>(cfg_int(v, key, 1, 1000000));
  } else if (key == "schedule.steps_per_epoch" || key == "steps") {
    cfg.schedule.steps_per_epoch = static_cast<int>(cfg_int(v, key, 1, 1000000));
  } else if (key == "schedule.batch_size" || key == "batch") {
    cfg.schedule.batch_size = static_cast<int>(cfg_int(v, key, 1, 1000000));
  } else if (key == "schedule.warmup_epochs" || key == "warmup") {
    cfg.schedule.warmup_epochs = static_cast<int>(cfg_int(v, key, 0, 1000000));
  } else if (key == "n_trials") {
    cfg.n_trials = static_cast<int>(cfg_int(v, key, 1, 1000000));
  } else if (key == "base_seed" || key == "seed") {
    if (!v.is_number_integer())
      throw std::invalid_argument("config key '" + key +
                                  "' expects an integer");
    cfg.base_seed = v.get<std::uint64_t>();
  } else if (key == "output_dir") {
    cfg.output_dir = cfg_str(v, key);
  } else if (key == "study_id") {
    const std::string s = cfg_str(v, key);
    if (s.empty())
      throw std::invalid_argument("config key 'study_id' must be non-empty");
    cfg.study_id = s;
  } else if (key == "parallelism") {
    cfg.parallelism = static_cast<int>(cfg_int(v, key, 1, 4096));
  } else if (key == "budget" || key == "budget_count") {
    cfg.budget = BudgetPolicy::by_count(
        static_cast<int>(cfg_int(v, key, 1, 1000000)));
  } else if (key == "budget_seconds") {
    cfg.budget = BudgetPolicy::by_wall_clock(cfg_real(v, key, 1e-9, 1e9));
  } else if (key == "fixed_op") {
    const std::string s = cfg_str(v, key);
    const auto k = op_from_mnemonic(s);
    if (!k)
      throw std::invalid_argument("config key 'fixed_op': unknown value '" +
                                  s + "' (expected LG|Net|Roll|Noise|Zero)");
    cfg.fixed_kind = *k;
  } else if (key == "arch") {
    cfg.arch = cfg_str(v, key);
  } else if (key == "bohb.iterations") {
    cfg.bohb_iterations = static_cast<int>(cfg_int(v, key, 1, 1000000));
  } else if (key == "bohb.objective") {
    cfg.objective = objective_from_name(cfg_str(v, key));
  } else if (key == "bohb.max_budget") {
    cfg.bohb_max_budget = static_cast<int>(cfg_int(v, key, 2, 1000000));
  } else if (key == "bohb.eta") {
    cfg.bohb_eta = static_cast<int>(cfg_int(v, key, 2, 100));
  } else if (key == "bohb.brackets") {
    cfg.bohb_brackets = detail::parse_brackets(v, key);
  } else {
    throw std::invalid_argument("unknown config key '" + key + "'");
  }
}

inline void apply_config_json(ExperimentConfig& cfg, const nlohmann::json& j) {
  if (!j.is_object())
    throw std::invalid_argument("config file: top level must be an object");
  for (const auto& [key, value] : j.items()) {
    const bool group = key == "data" || key == "space" || key == "hp" ||
                       key == "schedule" || key == "bohb";
    if (group && value.is_object()) {
      for (const auto& [inner, iv] : value.items())
        config_set(cfg, key + "." + inner, iv);
    } else {
      config_set(cfg, key, value);
    }
  }
}

// key=value with the value parsed as JSON when it is one (numbers, bools,
// quoted strings, arrays); anything else is taken as a plain string.
inline void apply_override(ExperimentConfig& cfg, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0)
    throw std::invalid_argument("override '" + kv +
                                "' is not of the form key=value");
  const std::string key = kv.substr(0, eq);
  const std::string raw = kv.substr(eq + 1);
  nlohmann::json v =
      nlohmann::json::parse(raw, /*cb=*/nullptr, /*allow_exceptions=*/false);
  if (v.is_discarded()) v = raw;
  config_set(cfg, key, v);
}

inline ExperimentConfig load_config(
    const std::string& path, const std::vector<std::string>& overrides = {}) {
  ExperimentConfig cfg;
  if (const char* env = std::getenv(kOutputDirEnv); env && *env)
    cfg.output_dir = env;
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config file: " + path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error("config file " + path + ": " + e.what());
    }
    apply_config_json(cfg, j);
  }
  for (const auto& kv : overrides) apply_override(cfg, kv);
  return cfg;
}

namespace detail {

inline std::string artifact_base(const ExperimentConfig& cfg) {
  return (std::filesystem::path(cfg.output_dir) / cfg.study_id).string();
}

inline TrialRecord single_record(const ExperimentConfig& cfg,
                                 const char* method, const DiscreteArch& arch,
                                 const TrainResult& tr) {
  TrialRecord rec;
  rec.study = cfg.study_id;
  rec.trial = 0;
  rec.seed = derive_seed(cfg.base_seed, 0);
  rec.method = method;
  rec.hp = cfg.hp_label;
  rec.space = cfg.space_spec().summary();
  rec.arch = arch.to_string();
  if (tr.failed)
    rec.failed = true;
  else
    rec.arch_psnr = tr.arch_psnr;
  rec.runtime_s = tr.runtime_s;
  return rec;
}

inline void export_records(const std::vector<TrialRecord>& records,
                           const std::string& base, std::ostream& out) {
  write_records_csv(records, base + ".csv");
  out << "wrote " << base << ".csv\n";
  write_records_jsonl(records, base + ".jsonl");
  out << "wrote " << base << ".jsonl\n";
}

}  // namespace detail

// Verbs: search | retrain | study | baseline | bohb | report.
// Exit status: 0 success, 1 experiment error, 2 usage error. Config and verb
// validation happens before any computation.
inline int run_command(const std::string& verb, const ExperimentConfig& cfg,
                       std::ostream& out, std::ostream& err) {
  try {
    cfg.validate();
    const bool known = verb == "search" || verb == "retrain" ||
                       verb == "study" || verb == "baseline" ||
                       verb == "bohb" || verb == "report";
    if (!known)
      throw std::invalid_argument(
          "unknown verb '" + verb +
          "' (expected search|retrain|study|baseline|bohb|report)");
    if (verb == "search" &&
        !(cfg.method == Method::Das || cfg.method == Method::DasSingle))
      throw std::invalid_argument("search verb needs method das|das-single");
    if (verb == "retrain") {
      if (cfg.arch.empty())
        throw std::invalid_argument("retrain verb needs arch=<arch string>");
      parse_arch(cfg.space_spec(), cfg.arch);  // reject before computing
    }
    if (verb == "baseline" &&
        !(cfg.method == Method::Random || cfg.method == Method::RandomSearch ||
          cfg.method == Method::FixedOp))
      throw std::invalid_argument(
          "baseline verb needs method random|random-search|fixed-op");
  } catch (const std::exception& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    std::filesystem::create_directories(cfg.output_dir);
    const std::string base = detail::artifact_base(cfg);

    if (verb == "search") {
      TrialRecord rec = run_trial(cfg.study_config(), 0);
      out << kRecordCsvHeader << "\n" << record_csv_line(rec) << "\n";
      detail::export_records({rec}, base, out);
    } else if (verb == "retrain") {
      const DiscreteArch arch = parse_arch(cfg.space_spec(), cfg.arch);
      Rng rng(derive_seed(cfg.base_seed, 0));
      const TrainResult tr =
          train_architecture(arch, cfg.problem(), cfg.hp, cfg.schedule, rng);
      TrialRecord rec = detail::single_record(cfg, "retrain", arch, tr);
      out << kRecordCsvHeader << "\n" << record_csv_line(rec) << "\n";
      detail::export_records({rec}, base, out);
    } else if (verb == "study" || verb == "baseline") {
      const auto records = run_study(cfg.study_config());
      const StudySummary s = summarize(records);
      const ExportedPaths p = export_study(records, s, base);
      out << summary_to_json(s).dump(2) << "\n";
      for (const auto& path : {p.csv, p.jsonl, p.summary, p.scatter})
        out << "wrote " << path << "\n";
    } else if (verb == "bohb") {
      const BohbResult r = run_bohb(
          cfg.hp_space, cfg.objective, cfg.bohb_iterations, cfg.space_spec(),
          cfg.problem(), cfg.schedule, Rng(cfg.base_seed), cfg.bohb_max_budget,
          cfg.bohb_eta, cfg.parallelism, cfg.bohb_brackets);
      const std::string log_path = base + ".bohb.jsonl";
      write_bohb_jsonl(r.log, log_path);
      nlohmann::json best = hp_to_json(r.best);
      best["score"] = r.best_score;
      best["iteration"] = r.best_iteration;
      const std::string best_path = base + ".best.json";
      {
        auto f = detail::open_out(best_path);
        f << best.dump(2) << "\n";
      }
      out << best.dump(2) << "\n";
      out << "wrote " << log_path << "\n";
      out << "wrote " << best_path << "\n";
    } else {  // report
      const auto records = load_records_jsonl(base + ".jsonl");
      const StudySummary s = summarize(records);
      const std::string sum_path = base + ".summary.json";
      write_summary_json(s, sum_path);
      out << summary_to_json(s).dump(2) << "\n";
      out << "wrote " << sum_path << "\n";
    }
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace das1d
