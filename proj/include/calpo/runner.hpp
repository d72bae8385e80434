#pragma once

// Experiment configuration, orchestration and run-directory output.
//
//   <output_dir>/<timestamp>-<experiment>/
//     config.json  manifest.json  checkpoints/  reports/

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "calpo/errors.hpp"
#include "calpo/evaluation.hpp"
#include "calpo/gradcheck.hpp"
#include "calpo/io.hpp"
#include "calpo/metrics.hpp"
#include "calpo/policy.hpp"
#include "calpo/robustness.hpp"
#include "calpo/selection.hpp"
#include "calpo/synthdata.hpp"
#include "calpo/training.hpp"

namespace calpo {

inline constexpr const char* kVersion = "0.1.0";

using nlohmann::json;

enum class Experiment { drift, contamination, confat_k, gradcheck, metrics_suite, train };

inline const char* experiment_name(Experiment e) {
  switch (e) {
    case Experiment::drift: return "drift";
    case Experiment::contamination: return "contamination";
    case Experiment::confat_k: return "confat_k";
    case Experiment::gradcheck: return "gradcheck";
    case Experiment::metrics_suite: return "metrics_suite";
    case Experiment::train: return "train";
  }
  return "?";
}

inline Experiment experiment_from_name(const std::string& s) {
  for (auto e : {Experiment::drift, Experiment::contamination, Experiment::confat_k, Experiment::gradcheck,
                 Experiment::metrics_suite, Experiment::train}) {
    if (s == experiment_name(e)) return e;
  }
  throw InvalidInput("unknown experiment '" + s + "'");
}

struct OptimizerConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double step_size = 1.0;
  ScheduleKind schedule = ScheduleKind::constant;
};

struct ContaminationConfig {
  std::vector<double> alphas{0.05, 0.1, 0.25};
  std::vector<double> Ms{10.0, 100.0, 1000.0};
  double B = 1.0;
  double z = 0.0;
  CleanFamily family = CleanFamily::uniform;
  std::size_t n = 100000;
  std::size_t num_seeds = 20;
  std::size_t dkw_n = 10000;
  std::size_t dkw_trials = 1000;
  double dkw_rho = 0.05;
  std::size_t band_trials = 200;
};

struct SelectionConfig {
  std::vector<std::size_t> k{4, 8};
  std::size_t trials = 20;
};

struct RunConfig {
  Experiment experiment = Experiment::drift;
  std::uint64_t master_seed = 0;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::size_t bins = 20;
  std::string output_dir = "run";
  TaskSpec task{};
  OptimizerConfig sft{40, 8, 5.0, ScheduleKind::constant};
  OptimizerConfig preference{10, 8, 2.0, ScheduleKind::constant};
  double beta = 0.1;
  double lambda = 0.1;
  double label_smoothing = 0.1;
  Objective objective = Objective::dpo_bpc;  // used by the single-run `train` experiment
  ContaminationConfig contamination{};
  SelectionConfig selection{};
};

// ---------------------------------------------------------------------------
// Strict JSON config

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  require(j.is_object(), where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    require(allowed.count(key) == 1, "unknown key '" + key + "' in " + where);
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline ScheduleKind schedule_from_name(const std::string& s) {
  if (s == "constant") return ScheduleKind::constant;
  if (s == "diminishing") return ScheduleKind::diminishing;
  throw InvalidInput("unknown schedule '" + s + "'");
}

inline const char* schedule_name(ScheduleKind k) {
  return k == ScheduleKind::constant ? "constant" : "diminishing";
}

inline OptimizerConfig optimizer_from_json(const json& j, OptimizerConfig o, const std::string& where) {
  reject_unknown(j, {"epochs", "batch_size", "step_size", "schedule"}, where);
  read_opt(j, "epochs", o.epochs);
  read_opt(j, "batch_size", o.batch_size);
  read_opt(j, "step_size", o.step_size);
  if (j.contains("schedule")) o.schedule = schedule_from_name(j.at("schedule").get<std::string>());
  return o;
}

inline json optimizer_to_json(const OptimizerConfig& o) {
  return json{{"epochs", o.epochs},
              {"batch_size", o.batch_size},
              {"step_size", o.step_size},
              {"schedule", schedule_name(o.schedule)}};
}

}  // namespace detail

inline void validate_run_config(const RunConfig& c) {
  require(!c.seeds.empty(), "seeds must be nonempty");
  require(c.bins >= 1, "bins must be at least 1");
  require(!c.output_dir.empty(), "output_dir must be set");
  validate_spec(c.task);
  require(c.beta > 0.0, "beta must be positive");
  require(c.lambda >= 0.0, "lambda must be non-negative");
  require(c.label_smoothing >= 0.0 && c.label_smoothing < 1.0, "label_smoothing must lie in [0,1)");
  for (const auto* o : {&c.sft, &c.preference}) {
    require(o->epochs >= 1 && o->batch_size >= 1 && o->step_size > 0.0, "invalid optimizer settings");
  }
  require(!c.selection.k.empty() && c.selection.trials >= 1, "invalid selection settings");
  for (auto k : c.selection.k) require(k >= 1, "k must be at least 1");
  const auto& ct = c.contamination;
  require(!ct.alphas.empty() && !ct.Ms.empty() && ct.num_seeds >= 1 && ct.n >= 1, "invalid contamination grid");
  for (double a : ct.alphas) require(a >= 0.0 && a < 0.5, "contamination alpha must lie in [0, 0.5)");
  require(ct.B > 0.0, "contamination B must be positive");
}

inline RunConfig config_from_json(const json& j) {
  try {
    RunConfig c;
    detail::reject_unknown(j, {"experiment", "master_seed", "seeds", "bins", "output_dir", "task", "sft",
                               "preference", "beta", "lambda", "label_smoothing", "objective",
                               "contamination", "selection"},
                           "config");
    if (j.contains("experiment")) c.experiment = experiment_from_name(j.at("experiment").get<std::string>());
    detail::read_opt(j, "master_seed", c.master_seed);
    detail::read_opt(j, "seeds", c.seeds);
    detail::read_opt(j, "bins", c.bins);
    detail::read_opt(j, "output_dir", c.output_dir);
    detail::read_opt(j, "beta", c.beta);
    detail::read_opt(j, "lambda", c.lambda);
    detail::read_opt(j, "label_smoothing", c.label_smoothing);
    if (j.contains("objective")) c.objective = objective_from_name(j.at("objective").get<std::string>());
    if (j.contains("task")) {
      const auto& t = j.at("task");
      detail::reject_unknown(t, {"num_prompts", "num_options", "stub_length", "stub_vocab", "ambiguity",
                                 "sft_per_prompt", "pairs_per_prompt", "train_fraction", "validation_fraction"},
                             "task");
      detail::read_opt(t, "num_prompts", c.task.num_prompts);
      detail::read_opt(t, "num_options", c.task.num_options);
      detail::read_opt(t, "stub_length", c.task.stub_length);
      detail::read_opt(t, "stub_vocab", c.task.stub_vocab);
      detail::read_opt(t, "ambiguity", c.task.ambiguity);
      detail::read_opt(t, "sft_per_prompt", c.task.sft_per_prompt);
      detail::read_opt(t, "pairs_per_prompt", c.task.pairs_per_prompt);
      detail::read_opt(t, "train_fraction", c.task.train_fraction);
      detail::read_opt(t, "validation_fraction", c.task.validation_fraction);
    }
    if (j.contains("sft")) c.sft = detail::optimizer_from_json(j.at("sft"), c.sft, "sft");
    if (j.contains("preference")) {
      c.preference = detail::optimizer_from_json(j.at("preference"), c.preference, "preference");
    }
    if (j.contains("contamination")) {
      const auto& t = j.at("contamination");
      auto& ct = c.contamination;
      detail::reject_unknown(t, {"alphas", "Ms", "B", "z", "family", "n", "num_seeds", "dkw_n", "dkw_trials",
                                 "dkw_rho", "band_trials"},
                             "contamination");
      detail::read_opt(t, "alphas", ct.alphas);
      detail::read_opt(t, "Ms", ct.Ms);
      detail::read_opt(t, "B", ct.B);
      detail::read_opt(t, "z", ct.z);
      if (t.contains("family")) ct.family = family_from_name(t.at("family").get<std::string>());
      detail::read_opt(t, "n", ct.n);
      detail::read_opt(t, "num_seeds", ct.num_seeds);
      detail::read_opt(t, "dkw_n", ct.dkw_n);
      detail::read_opt(t, "dkw_trials", ct.dkw_trials);
      detail::read_opt(t, "dkw_rho", ct.dkw_rho);
      detail::read_opt(t, "band_trials", ct.band_trials);
    }
    if (j.contains("selection")) {
      const auto& t = j.at("selection");
      detail::reject_unknown(t, {"k", "trials"}, "selection");
      detail::read_opt(t, "k", c.selection.k);
      detail::read_opt(t, "trials", c.selection.trials);
    }
    validate_run_config(c);
    return c;
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("config: ") + e.what());
  }
}

inline RunConfig load_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw InvalidInput("config is not valid JSON: " + std::string(e.what()));
  }
  return config_from_json(j);
}

inline json config_to_json(const RunConfig& c) {
  const auto& t = c.task;
  const auto& ct = c.contamination;
  return json{{"experiment", experiment_name(c.experiment)},
              {"master_seed", c.master_seed},
              {"seeds", c.seeds},
              {"bins", c.bins},
              {"output_dir", c.output_dir},
              {"task",
               {{"num_prompts", t.num_prompts},
                {"num_options", t.num_options},
                {"stub_length", t.stub_length},
                {"stub_vocab", t.stub_vocab},
                {"ambiguity", t.ambiguity},
                {"sft_per_prompt", t.sft_per_prompt},
                {"pairs_per_prompt", t.pairs_per_prompt},
                {"train_fraction", t.train_fraction},
                {"validation_fraction", t.validation_fraction}}},
              {"sft", detail::optimizer_to_json(c.sft)},
              {"preference", detail::optimizer_to_json(c.preference)},
              {"beta", c.beta},
              {"lambda", c.lambda},
              {"label_smoothing", c.label_smoothing},
              {"objective", objective_name(c.objective)},
              {"contamination",
               {{"alphas", ct.alphas},
                {"Ms", ct.Ms},
                {"B", ct.B},
                {"z", ct.z},
                {"family", family_name(ct.family)},
                {"n", ct.n},
                {"num_seeds", ct.num_seeds},
                {"dkw_n", ct.dkw_n},
                {"dkw_trials", ct.dkw_trials},
                {"dkw_rho", ct.dkw_rho},
                {"band_trials", ct.band_trials}}},
              {"selection", {{"k", c.selection.k}, {"trials", c.selection.trials}}}};
}

// ---------------------------------------------------------------------------
// Tables: every report is emitted as CSV and as JSON (array of row objects).

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<json>> rows;

  void add(std::vector<json> row) {
    require(row.size() == columns.size(), "table row has the wrong width");
    rows.push_back(std::move(row));
  }

  static std::string cell(const json& v) {
    if (v.is_null()) return "";
    if (v.is_number_float()) return io::fmt_double(v.get<double>());
    if (v.is_string()) return v.get<std::string>();
    return v.dump();
  }

  std::string csv() const {
    std::string out = io::join_csv(columns) + "\n";
    for (const auto& r : rows) {
      std::vector<std::string> f;
      for (const auto& v : r) f.push_back(cell(v));
      out += io::join_csv(f) + "\n";
    }
    return out;
  }

  json to_json() const {
    json arr = json::array();
    for (const auto& r : rows) {
      json o = json::object();
      for (std::size_t i = 0; i < columns.size(); ++i) o[columns[i]] = r[i];
      arr.push_back(o);
    }
    return arr;
  }
};

inline Table reliability_table(const BinnedReliability& rel) {
  Table t{{"bin_lower", "bin_upper", "count", "mean_confidence", "accuracy", "gap"}, {}};
  for (const auto& b : rel.bins) {
    const bool empty = b.count == 0;
    t.add({b.lower, b.upper, b.count, empty ? json() : json(b.mean_confidence), empty ? json() : json(b.accuracy),
           b.gap});
  }
  return t;
}

/// Records every file written so the manifest can list it.
class RunDirectory {
 public:
  RunDirectory(const std::filesystem::path& base, const std::string& experiment) {
    std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
    std::filesystem::path dir = base / (std::string(stamp) + "-" + experiment);
    for (int i = 1; std::filesystem::exists(dir); ++i) {
      dir = base / (std::string(stamp) + "-" + experiment + "-" + std::to_string(i));
    }
    std::filesystem::create_directories(dir / "checkpoints");
    std::filesystem::create_directories(dir / "reports");
    root_ = dir;
  }

  const std::filesystem::path& root() const { return root_; }

  void write(const std::string& relative, std::string_view content) {
    io::write_file_atomic(root_ / relative, content);
    files_.push_back(relative);
  }
  void write_table(const std::string& stem, const Table& t) {
    write(stem + ".csv", t.csv());
    write(stem + ".json", t.to_json().dump(2) + "\n");
  }
  void time(const std::string& what, double seconds) { timings_[what] = seconds; }

  void finish(const RunConfig& cfg) {
    write("config.json", config_to_json(cfg).dump(2) + "\n");
    json m{{"version", kVersion}, {"config", config_to_json(cfg)}, {"files", files_}, {"timings_seconds", timings_}};
    // The manifest lists itself last so it is complete.
    m["files"].push_back("manifest.json");
    io::write_file_atomic(root_ / "manifest.json", m.dump(2) + "\n");
  }

 private:
  std::filesystem::path root_;
  std::vector<std::string> files_;
  std::map<std::string, double> timings_;
};

namespace detail {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline TrainConfig make_train_config(const OptimizerConfig& o, Objective obj, const RunConfig& c,
                                     std::uint64_t seed) {
  TrainConfig t;
  t.objective = obj;
  t.beta = c.beta;
  t.lambda = c.lambda;
  t.epsilon_smooth = c.label_smoothing;
  t.schedule = StepSchedule{o.schedule, o.step_size};
  t.epochs = o.epochs;
  t.batch_size = o.batch_size;
  t.seed = seed;
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Drift experiment: SFT, then every method branched from the same SFT checkpoint.

struct MethodOutcome {
  std::string method;
  std::uint64_t seed = 0;
  TabularPolicy policy;
  double temperature = 1.0;
  std::size_t selected_epoch = 0;
  PolicyEvaluation eval;
};

struct SeedOutcome {
  std::uint64_t seed = 0;
  GeneratedDataset dataset;
  std::vector<MethodOutcome> methods;

  const MethodOutcome& method(const std::string& name) const {
    for (const auto& m : methods) {
      if (m.method == name) return m;
    }
    throw InvalidInput("no method " + name);
  }
};

inline const std::vector<std::string>& drift_methods() {
  static const std::vector<std::string> m{"sft",    "dpo",  "dpo_bce", "dpo_bpc", "dpo_bpc_lambda0",
                                          "sft_ls", "sft_ts"};
  return m;
}

inline SeedOutcome train_all_methods(const RunConfig& cfg, std::uint64_t seed) {
  SeedOutcome out;
  out.seed = seed;
  TaskSpec spec = cfg.task;
  spec.seed = Rng::derive(cfg.master_seed, "run/task", seed).next();
  out.dataset = generate_tasks(spec);
  const auto& ds = out.dataset;
  const auto train = ds.sft_split(Split::train);
  const auto val = ds.sft_split(Split::validation);
  const auto pairs = ds.pair_split(Split::train);
  require(!train.empty() && !val.empty() && !pairs.empty(), "task too small for train/validation splits");
  const std::uint64_t train_seed = Rng::derive(cfg.master_seed, "run/train", seed).next();

  const auto nll_score = [&](const TabularPolicy& p) { return mean_nll(p, val); };
  const auto ece_score = [&](const TabularPolicy& p) {
    return ece_binned(prediction_records(p, ds, Split::validation), cfg.bins);
  };
  auto record = [&](std::string name, const TabularPolicy& p, std::size_t epoch, double tau) {
    MethodOutcome m;
    m.method = std::move(name);
    m.seed = seed;
    m.policy = p;
    m.selected_epoch = epoch;
    m.temperature = tau;
    m.eval = evaluate_policy(p, ds, cfg.bins);
    out.methods.push_back(std::move(m));
  };

  const TabularPolicy init(spec.num_prompts, spec.vocab_size());
  const auto sft = train_sft(init, train, detail::make_train_config(cfg.sft, Objective::sft, cfg, train_seed),
                             nll_score);
  record("sft", sft.policy, sft.selected_epoch, 1.0);

  auto pref = [&](Objective obj, double lambda) {
    auto tc = detail::make_train_config(cfg.preference, obj, cfg, train_seed);
    tc.lambda = lambda;
    return train_preference(sft.policy, sft.policy, pairs, tc, ece_score);
  };
  const auto dpo = pref(Objective::dpo, cfg.lambda);
  record("dpo", dpo.policy, dpo.selected_epoch, 1.0);
  const auto bce = pref(Objective::dpo_bce, cfg.lambda);
  record("dpo_bce", bce.policy, bce.selected_epoch, 1.0);
  const auto bpc = pref(Objective::dpo_bpc, cfg.lambda);
  record("dpo_bpc", bpc.policy, bpc.selected_epoch, 1.0);
  const auto bpc0 = pref(Objective::dpo_bpc, 0.0);
  record("dpo_bpc_lambda0", bpc0.policy, bpc0.selected_epoch, 1.0);

  auto ls_cfg = detail::make_train_config(cfg.sft, Objective::sft_label_smooth, cfg, train_seed);
  ls_cfg.epochs = cfg.preference.epochs;
  const auto ls = train_sft(sft.policy, train, ls_cfg, ece_score);
  record("sft_ls", ls.policy, ls.selected_epoch, 1.0);

  const double tau = temperature_scale(sft.policy, val, default_tau_grid());
  record("sft_ts", sft.policy.scaled(tau), sft.selected_epoch, tau);
  return out;
}

struct MethodSummary {
  std::string method;
  double accuracy = 0.0;
  double exact_ece = 0.0;
  double binned_ece = 0.0;
};

struct DriftResult {
  std::vector<SeedOutcome> seeds;
  std::vector<MethodSummary> summary;  // means over seeds, drift_methods() order
  bool lambda0_equals_dpo = true;
  std::filesystem::path run_dir;

  const MethodSummary& mean(const std::string& name) const {
    for (const auto& m : summary) {
      if (m.method == name) return m;
    }
    throw InvalidInput("no method " + name);
  }
};

namespace detail {

inline Table drift_summary_table(const std::vector<SeedOutcome>& seeds) {
  Table t{{"method", "seed", "accuracy", "exact_ece", "binned_ece", "l1_risk", "selected_epoch", "temperature"}, {}};
  for (const auto& s : seeds) {
    for (const auto& m : s.methods) {
      t.add({m.method, s.seed, m.eval.accuracy, m.eval.exact_ece, m.eval.binned_ece, m.eval.l1_risk,
             m.selected_epoch, m.temperature});
    }
  }
  return t;
}

inline Table drift_mean_table(const std::vector<MethodSummary>& summary) {
  Table t{{"method", "mean_accuracy_pct", "mean_exact_ece_pct", "mean_binned_ece_pct"}, {}};
  for (const auto& m : summary) t.add({m.method, 100.0 * m.accuracy, 100.0 * m.exact_ece, 100.0 * m.binned_ece});
  return t;
}

}  // namespace detail

/// Runs the drift experiment; writes a run directory unless `write` is false.
inline DriftResult run_drift_experiment(const RunConfig& cfg, bool write = true) {
  validate_run_config(cfg);
  DriftResult res;
  std::optional<RunDirectory> dir;
  if (write) dir.emplace(cfg.output_dir, "drift");
  detail::Stopwatch total;
  for (auto seed : cfg.seeds) {
    detail::Stopwatch sw;
    res.seeds.push_back(train_all_methods(cfg, seed));
    const auto& so = res.seeds.back();
    if (!(so.method("dpo_bpc_lambda0").policy == so.method("dpo").policy)) res.lambda0_equals_dpo = false;
    if (dir) {
      dir->time("seed_" + std::to_string(seed), sw.seconds());
      const std::string tag = "seed" + std::to_string(seed);
      dir->write("reports/dataset_" + tag + ".json", dataset_to_json(so.dataset).dump() + "\n");
      for (const auto& m : so.methods) {
        dir->write("checkpoints/" + m.method + "_" + tag + ".csv", checkpoint_to_csv(m.policy));
        dir->write_table("reports/reliability_" + m.method + "_" + tag, reliability_table(m.eval.reliability));
      }
    }
  }
  for (const auto& name : drift_methods()) {
    MethodSummary ms;
    ms.method = name;
    for (const auto& s : res.seeds) {
      const auto& e = s.method(name).eval;
      ms.accuracy += e.accuracy;
      ms.exact_ece += e.exact_ece;
      ms.binned_ece += e.binned_ece;
    }
    const double n = static_cast<double>(res.seeds.size());
    ms.accuracy /= n;
    ms.exact_ece /= n;
    ms.binned_ece /= n;
    res.summary.push_back(ms);
  }
  if (dir) {
    dir->write_table("reports/summary", detail::drift_summary_table(res.seeds));
    dir->write_table("reports/summary_mean", detail::drift_mean_table(res.summary));
    Table checks{{"check", "value"}, {}};
    checks.add({"lambda0_equals_dpo", res.lambda0_equals_dpo});
    dir->write_table("reports/checks", checks);
    dir->time("total", total.seconds());
    dir->finish(cfg);
    res.run_dir = dir->root();
  }
  return res;
}

// ---------------------------------------------------------------------------
// Single-objective training run

inline std::filesystem::path run_train(const RunConfig& cfg) {
  validate_run_config(cfg);
  RunDirectory dir(cfg.output_dir, "train");
  const std::uint64_t seed = cfg.seeds.front();
  TaskSpec spec = cfg.task;
  spec.seed = Rng::derive(cfg.master_seed, "run/task", seed).next();
  const auto ds = generate_tasks(spec);
  const auto train = ds.sft_split(Split::train);
  const auto val = ds.sft_split(Split::validation);
  const std::uint64_t train_seed = Rng::derive(cfg.master_seed, "run/train", seed).next();
  const TabularPolicy init(spec.num_prompts, spec.vocab_size());
  auto result = train_sft(init, train, detail::make_train_config(cfg.sft, Objective::sft, cfg, train_seed),
                          [&](const TabularPolicy& p) { return mean_nll(p, val); });
  const TabularPolicy sft = result.policy;
  const auto ece_score = [&](const TabularPolicy& p) {
    return ece_binned(prediction_records(p, ds, Split::validation), cfg.bins);
  };
  if (is_preference(cfg.objective)) {
    result = train_preference(sft, sft, ds.pair_split(Split::train),
                              detail::make_train_config(cfg.preference, cfg.objective, cfg, train_seed), ece_score);
  } else if (cfg.objective == Objective::sft_label_smooth) {
    auto tc = detail::make_train_config(cfg.sft, Objective::sft_label_smooth, cfg, train_seed);
    tc.epochs = cfg.preference.epochs;
    result = train_sft(sft, train, tc, ece_score);
  }
  const auto ev = evaluate_policy(result.policy, ds, cfg.bins);
  Table hist{{"epoch", "train_loss", "selection_score"}, {}};
  for (const auto& h : result.history) hist.add({h.epoch, h.train_loss, h.selection_score});
  Table ev_t{{"objective", "seed", "accuracy", "exact_ece", "binned_ece", "l1_risk", "selected_epoch"}, {}};
  ev_t.add({objective_name(cfg.objective), seed, ev.accuracy, ev.exact_ece, ev.binned_ece, ev.l1_risk,
            result.selected_epoch});
  dir.write("checkpoints/sft.csv", checkpoint_to_csv(sft));
  dir.write(std::string("checkpoints/") + objective_name(cfg.objective) + ".csv", checkpoint_to_csv(result.policy));
  dir.write("reports/dataset.json", dataset_to_json(ds).dump() + "\n");
  dir.write_table("reports/history", hist);
  dir.write_table("reports/evaluation", ev_t);
  dir.write_table("reports/reliability", reliability_table(ev.reliability));
  dir.write("reports/records.csv", records_to_csv(ev.records));
  dir.finish(cfg);
  return dir.root();
}

// ---------------------------------------------------------------------------
// Contamination experiment

struct ContaminationChecks {
  std::vector<EstimatorReport> rows;
  std::map<double, double> slope_by_alpha;
  std::map<double, double> median_spread_by_alpha;  // max - min of per-seed-mean medians over M
  MedianStabilityResult stability;
  double breakdown_median = 0.0;
  DkwResult dkw;
  MeanBandResult band;
  std::filesystem::path run_dir;
};

inline ContaminationChecks run_contamination_experiment(const RunConfig& cfg, bool write = true) {
  validate_run_config(cfg);
  const auto& ct = cfg.contamination;
  ContaminationChecks out;
  ContaminationModel base;
  base.z = ct.z;
  base.B = ct.B;
  base.family = ct.family;
  base.seed = Rng::derive(cfg.master_seed, "run/contamination").next();
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < ct.num_seeds; ++s) seeds.push_back(s);
  out.rows = verify_contamination_theorem(base, ct.alphas, ct.Ms, ct.n, seeds);

  for (double a : ct.alphas) {
    std::vector<EstimatorReport> rows;
    std::map<double, double> med_sum;
    for (const auto& r : out.rows) {
      if (r.alpha != a) continue;
      rows.push_back(r);
      med_sum[r.M] += r.empirical_median;
    }
    if (ct.Ms.size() >= 2) out.slope_by_alpha[a] = mean_slope(rows);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& [M, s] : med_sum) {
      lo = std::min(lo, s / static_cast<double>(ct.num_seeds));
      hi = std::max(hi, s / static_cast<double>(ct.num_seeds));
    }
    out.median_spread_by_alpha[a] = hi - lo;
  }

  ContaminationModel m = base;
  m.alpha = ct.alphas.size() > 1 ? ct.alphas[1] : ct.alphas[0];
  m.M = ct.Ms.back();
  const std::size_t n_small = 10001;
  std::vector<std::size_t> counts;
  for (std::size_t k = 0; 2 * k < n_small; k += 250) counts.push_back(k);
  counts.push_back((n_small - 1) / 2);
  out.stability = median_stability(m, n_small, counts, 1e6);
  out.breakdown_median = breakdown_median(m, 1001, 501);
  out.dkw = dkw_check(m, ct.dkw_n, ct.dkw_trials, ct.dkw_rho);
  out.band = mean_bias_band(m, ct.dkw_n, ct.band_trials);

  if (write) {
    RunDirectory dir(cfg.output_dir, "contamination");
    Table t{{"alpha", "M", "B", "family", "n", "seed", "empirical_mean", "empirical_median", "analytic_mean",
             "analytic_median", "K"},
            {}};
    for (const auto& r : out.rows) {
      t.add({r.alpha, r.M, r.B, family_name(r.family), r.n, r.seed, r.empirical_mean, r.empirical_median,
             r.analytic_mean, r.analytic_median, r.outliers});
    }
    dir.write_table("reports/contamination", t);
    Table c{{"check", "alpha", "value", "reference"}, {}};
    for (const auto& [a, s] : out.slope_by_alpha) c.add({"mean_slope_vs_M", a, s, a});
    for (const auto& [a, s] : out.median_spread_by_alpha) c.add({"median_spread_over_M", a, s, 0.0});
    c.add({"median_stability_violations", m.alpha, out.stability.violations, 0});
    c.add({"median_stability_worst_distance", m.alpha, out.stability.worst_distance, m.B});
    c.add({"breakdown_median", 0.501, out.breakdown_median, m.z + m.M});
    c.add({"dkw_violation_frequency", m.alpha, out.dkw.frequency(), out.dkw.bound + out.dkw.slack()});
    c.add({"mean_band_fraction", m.alpha, out.band.fraction(), out.band.required});
    dir.write_table("reports/contamination_checks", c);
    Table mins{{"z", "l2_argmin", "l1_argmin_first", "l1_argmin_count", "surrogate_target", "surrogate_argmin"}, {}};
    const auto grid = unit_grid(1e-3);
    for (int i = 1; i <= 9; ++i) {
      const double z = i / 10.0;
      const auto r = pointwise_risk_minimizers(z, grid, z);
      mins.add({z, r.l2_argmin, r.l1_argmins.front(), r.l1_argmins.size(), z, r.surrogate_argmin});
    }
    dir.write_table("reports/risk_minimizers", mins);
    dir.finish(cfg);
    out.run_dir = dir.root();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Confidence@k experiment

struct ConfAtKRow {
  std::string method;
  std::size_t k = 0;
  double accuracy = 0.0;  // mean over seeds
  double stderr_ = 0.0;   // pooled
  double exact = std::numeric_limits<double>::quiet_NaN();  // oracle row only
};

struct ConfAtKResult {
  std::vector<ConfAtKRow> rows;
  std::filesystem::path run_dir;

  const ConfAtKRow& row(const std::string& method, std::size_t k) const {
    for (const auto& r : rows) {
      if (r.method == method && r.k == k) return r;
    }
    throw InvalidInput("no selection row " + method);
  }
};

inline ConfAtKResult run_confat_k_experiment(const RunConfig& cfg, bool write = true) {
  validate_run_config(cfg);
  std::optional<RunDirectory> dir;
  if (write) dir.emplace(cfg.output_dir, "confat_k");
  std::map<std::pair<std::string, std::size_t>, std::vector<SelectionResult>> all;
  std::map<std::size_t, double> exact_sum;
  for (auto seed : cfg.seeds) {
    const auto so = train_all_methods(cfg, seed);
    const auto val = so.dataset.sft_split(Split::validation);
    const auto& spec = so.dataset.spec;
    const auto& sft = so.method("sft").policy;
    for (const auto& m : so.methods) {
      if (m.method == "dpo_bpc_lambda0" || m.method == "sft_ts") continue;
      const double tau = temperature_scale(m.policy, val, default_tau_grid());
      for (auto k : cfg.selection.k) {
        const auto s = Rng::derive(cfg.master_seed, "run/selection", seed).next();
        auto r = evaluate_selection(m.policy, spec, k, tau, cfg.selection.trials, s);
        r.seed = seed;
        all[{m.method, k}].push_back(r);
      }
    }
    const double tau = temperature_scale(sft, val, default_tau_grid());
    for (auto k : cfg.selection.k) {
      const auto s = Rng::derive(cfg.master_seed, "run/selection", seed).next();
      auto o = evaluate_selection(sft, spec, k, tau, cfg.selection.trials, s, ConfidenceSource::oracle);
      o.seed = seed;
      all[{"oracle", k}].push_back(o);
      auto r = evaluate_selection(sft, spec, k, tau, cfg.selection.trials, s, ConfidenceSource::random);
      r.seed = seed;
      all[{"random", k}].push_back(r);
      exact_sum[k] += expected_oracle_selection_accuracy(sft, spec, k, tau);
    }
  }
  ConfAtKResult res;
  std::vector<std::string> order{"sft", "dpo", "dpo_bce", "dpo_bpc", "sft_ls", "oracle", "random"};
  for (const auto& method : order) {
    for (auto k : cfg.selection.k) {
      const auto& v = all.at({method, k});
      ConfAtKRow row;
      row.method = method;
      row.k = k;
      double var = 0.0;
      for (const auto& r : v) {
        row.accuracy += r.accuracy;
        var += r.stderr_ * r.stderr_;
      }
      const double n = static_cast<double>(v.size());
      row.accuracy /= n;
      row.stderr_ = std::sqrt(var) / n;
      if (method == "oracle") row.exact = exact_sum[k] / n;
      res.rows.push_back(row);
      if (dir) dir->write_table("reports/selection_" + method + "_k" + std::to_string(k), [&] {
        Table t{{"k", "temperature", "seed", "accuracy", "stderr"}, {}};
        for (const auto& r : v) t.add({r.k, r.temperature, r.seed, r.accuracy, r.stderr_});
        return t;
      }());
    }
  }
  if (dir) {
    Table t{{"method"}, {}};
    for (auto k : cfg.selection.k) t.columns.push_back("k" + std::to_string(k));
    for (const auto& method : order) {
      std::vector<json> row{method};
      for (auto k : cfg.selection.k) row.push_back(res.row(method, k).accuracy);
      t.add(row);
    }
    dir->write_table("reports/confat_k_summary", t);
    dir->finish(cfg);
    res.run_dir = dir->root();
  }
  return res;
}

// ---------------------------------------------------------------------------
// Gradient / bound suite and metric-inequality suite

struct SuiteRun {
  GradcheckReport report;
  std::filesystem::path run_dir;
};

inline SuiteRun run_gradcheck(const RunConfig& cfg, const GradcheckOptions& base = {}, bool write = true) {
  GradcheckOptions o = base;
  o.seed = Rng::derive(cfg.master_seed, "run/gradcheck").next();
  SuiteRun out;
  out.report = run_gradcheck_suite(o);
  if (write) {
    RunDirectory dir(cfg.output_dir, "gradcheck");
    dir.write("reports/gradcheck.csv", gradcheck_to_csv(out.report));
    json j = json::array();
    for (const auto& r : out.report.results) {
      j.push_back({{"invariant", r.name},
                   {"samples", r.samples},
                   {"violations", r.violations},
                   {"max_observed", r.max_observed},
                   {"bound", r.bound},
                   {"passed", r.passed()},
                   {"counterexample", r.counterexample}});
    }
    dir.write("reports/gradcheck.json", j.dump(2) + "\n");
    dir.finish(cfg);
    out.run_dir = dir.root();
  }
  return out;
}

inline SuiteRun run_metrics_suite(const RunConfig& cfg, bool write = true) {
  GradcheckOptions o;
  o.seed = Rng::derive(cfg.master_seed, "run/metrics").next();
  SuiteRun out;
  out.report.results.push_back(check_ece_l1_identity(o));
  out.report.results.push_back(check_jensen_chain(o));
  out.report.results.push_back(check_classwise_chain(o));
  out.report.results.push_back(check_weighted_bound(o));
  if (write) {
    RunDirectory dir(cfg.output_dir, "metrics_suite");
    dir.write("reports/metrics_suite.csv", gradcheck_to_csv(out.report));
    dir.finish(cfg);
    out.run_dir = dir.root();
  }
  return out;
}

}  // namespace calpo
