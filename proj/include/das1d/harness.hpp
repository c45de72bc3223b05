#pragma once

// Multi-trial studies with deterministic per-trial seeds, summary statistics,
// and record export. Records are byte-identical across parallelism levels
// (runtimes excepted), so study outputs diff cleanly.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "das1d/baselines.hpp"
#include "das1d/engine.hpp"

namespace das1d {

enum class Method { Das, DasSingle, Random, RandomSearch, FixedOp };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::Das: return "das";
    case Method::DasSingle: return "das-single";
    case Method::Random: return "random";
    case Method::RandomSearch: return "random-search";
    case Method::FixedOp: return "fixed-op";
  }
  throw std::logic_error("unknown method");
}

inline std::optional<Method> method_from_name(std::string_view s) {
  if (s == "das") return Method::Das;
  if (s == "das-single") return Method::DasSingle;
  if (s == "random") return Method::Random;
  if (s == "random-search") return Method::RandomSearch;
  if (s == "fixed-op") return Method::FixedOp;
  return std::nullopt;
}

struct TrialRecord {
  std::string study;
  int trial = 0;
  std::uint64_t seed = 0;
  std::string method;
  std::string hp;
  std::optional<double> one_shot_psnr;
  std::optional<double> arch_psnr;
  std::string arch;
  std::string space;  // space summary; carried by the JSON export only
  double runtime_s = 0.0;
  bool failed = false;
};

struct StudyConfig {
  std::string study_id = "study";
  Method method = Method::Das;
  OperationKind fixed_kind = OperationKind::Net;  // fixed-op method
  BudgetPolicy budget = BudgetPolicy::by_count(5);  // random-search method
  SpaceSpec space;
  Problem problem;
  HyperParams hp;
  std::string hp_label = "H1";
  TrainSchedule sched;
  int n_trials = 25;
  std::uint64_t base_seed = 0;
  int parallelism = 1;
};

inline TrialRecord run_trial(const StudyConfig& cfg, int trial) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(derive_seed(cfg.base_seed, static_cast<std::uint64_t>(trial)));
  TrialRecord rec;
  rec.study = cfg.study_id;
  rec.trial = trial;
  rec.seed = rng.seed();
  rec.method = method_name(cfg.method);
  rec.hp = cfg.hp_label;
  rec.space = cfg.space.summary();

  switch (cfg.method) {
    case Method::Das:
    case Method::DasSingle: {
      SearchResult sr =
          cfg.method == Method::Das
              ? das_search(cfg.space, cfg.problem, cfg.hp, cfg.sched,
                           rng.split("search"))
              : das_single_search(cfg.space, cfg.problem, cfg.hp, cfg.sched,
                                  rng.split("search"));
      if (sr.failed) {
        rec.failed = true;
        break;
      }
      rec.one_shot_psnr = sr.one_shot_psnr;
      rec.arch = sr.arch.to_string();
      TrainResult tr = train_architecture(sr.arch, cfg.problem, cfg.hp,
                                          cfg.sched, rng.split("retrain"));
      if (tr.failed)
        rec.failed = true;
      else
        rec.arch_psnr = tr.arch_psnr;
      break;
    }
    case Method::Random:
    case Method::RandomSearch: {
      const BudgetPolicy budget = cfg.method == Method::Random
                                      ? BudgetPolicy::by_count(1)
                                      : cfg.budget;
      RandomSearchResult rs = random_search(cfg.space, cfg.problem, cfg.hp,
                                            cfg.sched, budget, rng);
      if (rs.best_index < 0) {
        rec.failed = true;
        break;
      }
      const EvaluatedArch& best = rs.best();
      rec.arch = best.arch.to_string();
      rec.arch_psnr = best.result.arch_psnr;
      break;
    }
    case Method::FixedOp: {
      DiscreteArch arch = uniform_arch(cfg.space, cfg.fixed_kind);
      rec.arch = arch.to_string();
      TrainResult tr =
          train_architecture(arch, cfg.problem, cfg.hp, cfg.sched, rng);
      if (tr.failed)
        rec.failed = true;
      else
        rec.arch_psnr = tr.arch_psnr;
      break;
    }
  }
  rec.runtime_s = detail::seconds_since(t0);
  return rec;
}

// Trial i's stream depends only on (base_seed, i), so any execution order or
// thread count produces the same records.
inline std::vector<TrialRecord> run_study(const StudyConfig& cfg) {
  if (cfg.n_trials < 1)
    throw std::invalid_argument("run_study: n_trials must be >= 1");
  cfg.space.validate();
  cfg.hp.validate();
  cfg.sched.validate();
  std::vector<TrialRecord> records(static_cast<std::size_t>(cfg.n_trials));
  const int workers = std::max(1, std::min(cfg.parallelism, cfg.n_trials));
  if (workers == 1) {
    for (int i = 0; i < cfg.n_trials; ++i) records[static_cast<std::size_t>(i)] = run_trial(cfg, i);
    return records;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&]() {
      for (int i = next.fetch_add(1); i < cfg.n_trials; i = next.fetch_add(1))
        records[static_cast<std::size_t>(i)] = run_trial(cfg, i);
    });
  for (auto& t : pool) t.join();
  return records;
}

struct LinRegResult {
  bool defined = false;
  double r = std::numeric_limits<double>::quiet_NaN();
  double slope = std::numeric_limits<double>::quiet_NaN();
  double intercept = std::numeric_limits<double>::quiet_NaN();
};

// Textbook sample Pearson correlation and least-squares line.
inline LinRegResult pearson_linreg(std::span<const double> xs,
                                   std::span<const double> ys) {
  if (xs.size() != ys.size())
    throw std::invalid_argument("pearson_linreg: length mismatch");
  const std::size_t n = xs.size();
  if (n < 2) throw std::invalid_argument("pearson_linreg: needs n >= 2");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  LinRegResult out;
  if (sxx == 0.0 || syy == 0.0) return out;  // zero variance: undefined
  out.defined = true;
  out.r = sxy / std::sqrt(sxx * syy);
  out.slope = sxy / sxx;
  out.intercept = my - out.slope * mx;
  return out;
}

struct StudySummary {
  long n = 0;  // trials contributing an arch PSNR
  double max = std::numeric_limits<double>::quiet_NaN();
  double mean = std::numeric_limits<double>::quiet_NaN();
  double median = std::numeric_limits<double>::quiet_NaN();
  double std_dev = std::numeric_limits<double>::quiet_NaN();
  LinRegResult correlation;  // of (one_shot_psnr, arch_psnr) pairs
  long failures = 0;
};

// The (one_shot, arch) pairs entering the correlation: both present, trial
// not failed. The scatter export writes exactly these.
inline void correlation_pairs(const std::vector<TrialRecord>& records,
                              std::vector<double>& xs,
                              std::vector<double>& ys) {
  xs.clear();
  ys.clear();
  for (const auto& r : records) {
    if (r.failed || !r.one_shot_psnr || !r.arch_psnr) continue;
    xs.push_back(*r.one_shot_psnr);
    ys.push_back(*r.arch_psnr);
  }
}

inline StudySummary summarize(const std::vector<TrialRecord>& records) {
  if (records.empty()) throw std::invalid_argument("summarize: no records");
  StudySummary s;
  std::vector<double> vals;
  for (const auto& r : records) {
    if (r.failed) {
      s.failures += 1;
      continue;
    }
    if (r.arch_psnr) vals.push_back(*r.arch_psnr);
  }
  if (vals.empty())
    throw std::runtime_error("summarize: every trial failed");
  s.n = static_cast<long>(vals.size());
  std::sort(vals.begin(), vals.end());
  s.max = vals.back();
  double acc = 0.0;
  for (double v : vals) acc += v;
  s.mean = acc / static_cast<double>(vals.size());
  const std::size_t h = vals.size() / 2;
  s.median = vals.size() % 2 == 1 ? vals[h] : 0.5 * (vals[h - 1] + vals[h]);
  double ss = 0.0;
  for (double v : vals) ss += (v - s.mean) * (v - s.mean);
  s.std_dev = vals.size() > 1
                  ? std::sqrt(ss / static_cast<double>(vals.size() - 1))
                  : 0.0;
  std::vector<double> xs, ys;
  correlation_pairs(records, xs, ys);
  if (xs.size() >= 2) s.correlation = pearson_linreg(xs, ys);
  return s;
}

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += "\"";
  return out;
}

inline std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

inline std::string full_precision(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  return f;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for reading: " + path);
  return f;
}

// One CSV line -> fields, honoring quotes.
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline const char* kRecordCsvHeader =
    "study,trial,seed,method,hp,one_shot_psnr,arch_psnr,arch,runtime_s,failed";

inline std::string record_csv_line(const TrialRecord& r) {
  std::string line;
  line += detail::csv_field(r.study);
  line += ",";
  line += std::to_string(r.trial);
  line += ",";
  line += std::to_string(r.seed);
  line += ",";
  line += detail::csv_field(r.method);
  line += ",";
  line += detail::csv_field(r.hp);
  line += ",";
  if (r.one_shot_psnr) line += detail::fixed6(*r.one_shot_psnr);
  line += ",";
  if (r.arch_psnr) line += detail::fixed6(*r.arch_psnr);
  line += ",";
  line += detail::csv_field(r.arch);
  line += ",";
  line += detail::fixed6(r.runtime_s);
  line += ",";
  line += r.failed ? "1" : "0";
  return line;
}

inline void write_records_csv(const std::vector<TrialRecord>& records,
                              const std::string& path) {
  auto f = detail::open_out(path);
  f << kRecordCsvHeader << "\n";
  for (const auto& r : records) f << record_csv_line(r) << "\n";
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::vector<TrialRecord> load_records_csv(const std::string& path) {
  auto f = detail::open_in(path);
  std::string line;
  if (!std::getline(f, line) || line != kRecordCsvHeader)
    throw std::runtime_error("bad CSV header in " + path);
  std::vector<TrialRecord> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto fields = detail::split_csv_line(line);
    if (fields.size() != 10)
      throw std::runtime_error("bad CSV row in " + path + ": " + line);
    TrialRecord r;
    r.study = fields[0];
    r.trial = std::stoi(fields[1]);
    r.seed = std::stoull(fields[2]);
    r.method = fields[3];
    r.hp = fields[4];
    if (!fields[5].empty()) r.one_shot_psnr = std::stod(fields[5]);
    if (!fields[6].empty()) r.arch_psnr = std::stod(fields[6]);
    r.arch = fields[7];
    r.runtime_s = std::stod(fields[8]);
    r.failed = fields[9] == "1";
    out.push_back(std::move(r));
  }
  return out;
}

inline nlohmann::json record_to_json(const TrialRecord& r) {
  nlohmann::json j;
  j["study"] = r.study;
  j["trial"] = r.trial;
  j["seed"] = r.seed;
  j["method"] = r.method;
  j["hp"] = r.hp;
  j["one_shot_psnr"] =
      r.one_shot_psnr ? nlohmann::json(*r.one_shot_psnr) : nlohmann::json();
  j["arch_psnr"] =
      r.arch_psnr ? nlohmann::json(*r.arch_psnr) : nlohmann::json();
  j["arch"] = r.arch;
  j["space"] = r.space;
  j["runtime_s"] = r.runtime_s;
  j["failed"] = r.failed;
  return j;
}

inline TrialRecord record_from_json(const nlohmann::json& j) {
  TrialRecord r;
  r.study = j.at("study").get<std::string>();
  r.trial = j.at("trial").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.method = j.at("method").get<std::string>();
  r.hp = j.at("hp").get<std::string>();
  if (!j.at("one_shot_psnr").is_null())
    r.one_shot_psnr = j.at("one_shot_psnr").get<double>();
  if (!j.at("arch_psnr").is_null())
    r.arch_psnr = j.at("arch_psnr").get<double>();
  r.arch = j.at("arch").get<std::string>();
  r.space = j.value("space", std::string{});
  r.runtime_s = j.at("runtime_s").get<double>();
  r.failed = j.at("failed").get<bool>();
  return r;
}

inline void write_records_jsonl(const std::vector<TrialRecord>& records,
                                const std::string& path) {
  auto f = detail::open_out(path);
  for (const auto& r : records) f << record_to_json(r).dump() << "\n";
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::vector<TrialRecord> load_records_jsonl(const std::string& path) {
  auto f = detail::open_in(path);
  std::vector<TrialRecord> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(record_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

inline nlohmann::json summary_to_json(const StudySummary& s) {
  nlohmann::json j;
  j["n"] = s.n;
  j["max"] = s.max;
  j["mean"] = s.mean;
  j["median"] = s.median;
  j["std"] = s.std_dev;
  j["pearson_r"] =
      s.correlation.defined ? nlohmann::json(s.correlation.r) : nlohmann::json();
  j["slope"] = s.correlation.defined ? nlohmann::json(s.correlation.slope)
                                     : nlohmann::json();
  j["intercept"] = s.correlation.defined
                       ? nlohmann::json(s.correlation.intercept)
                       : nlohmann::json();
  j["failures"] = s.failures;
  return j;
}

inline void write_summary_json(const StudySummary& s,
                               const std::string& path) {
  auto f = detail::open_out(path);
  f << summary_to_json(s).dump(2) << "\n";
  if (!f) throw std::runtime_error("write failed: " + path);
}

// (one_shot, arch) pairs at full precision; r is recomputable from this file.
inline void write_scatter_csv(const std::vector<TrialRecord>& records,
                              const std::string& path) {
  std::vector<double> xs, ys;
  correlation_pairs(records, xs, ys);
  auto f = detail::open_out(path);
  f << "one_shot_psnr,arch_psnr\n";
  for (std::size_t i = 0; i < xs.size(); ++i)
    f << detail::full_precision(xs[i]) << ","
      << detail::full_precision(ys[i]) << "\n";
  if (!f) throw std::runtime_error("write failed: " + path);
}

struct ExportedPaths {
  std::string csv, jsonl, summary, scatter;
};

inline ExportedPaths export_study(const std::vector<TrialRecord>& records,
                                  const StudySummary& summary,
                                  const std::string& base_path) {
  ExportedPaths p{base_path + ".csv", base_path + ".jsonl",
                  base_path + ".summary.json", base_path + ".scatter.csv"};
  write_records_csv(records, p.csv);
  write_records_jsonl(records, p.jsonl);
  write_summary_json(summary, p.summary);
  write_scatter_csv(records, p.scatter);
  return p;
}

// Equality check used by determinism tests; runtimes are machine-dependent.
inline bool records_equal_ignoring_runtime(const std::vector<TrialRecord>& a,
                                           const std::vector<TrialRecord>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    TrialRecord x = a[i], y = b[i];
    x.runtime_s = 0.0;
    y.runtime_s = 0.0;
    if (record_to_json(x) != record_to_json(y)) return false;
  }
  return true;
}

}  // namespace das1d
