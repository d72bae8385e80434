#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "calpo/runner.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> bins;
  std::optional<double> lambda;
  std::optional<double> beta;
  std::optional<std::string> k;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config, "JSON run configuration");
  app->add_option("--seed", f.seed, "master seed");
  app->add_option("--out", f.out, "output directory (default: run)");
  app->add_option("--bins", f.bins, "number of ECE bins (default: 20)");
  app->add_option("--lambda", f.lambda, "calibration weight (default: 0.1)");
  app->add_option("--beta", f.beta, "DPO inverse temperature (default: 0.1)");
  app->add_option("--k", f.k, "comma-separated candidate counts (default: 4,8)");
}

calpo::RunConfig resolve(const CommonFlags& f, calpo::Experiment e) {
  calpo::RunConfig c = f.config.empty() ? calpo::RunConfig{} : calpo::load_config(f.config);
  c.experiment = e;
  if (f.seed) c.master_seed = *f.seed;
  if (f.out) c.output_dir = *f.out;
  if (f.bins) c.bins = *f.bins;
  if (f.lambda) c.lambda = *f.lambda;
  if (f.beta) c.beta = *f.beta;
  if (f.k) {
    c.selection.k.clear();
    for (const auto& s : calpo::io::split_csv_line(*f.k)) {
      c.selection.k.push_back(static_cast<std::size_t>(calpo::io::parse_int(s, "k")));
    }
  }
  calpo::validate_run_config(c);
  return c;
}

void print_table_file(const std::filesystem::path& csv) {
  const auto lines = calpo::io::read_lines(calpo::io::read_file(csv));
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> width;
  for (const auto& l : lines) {
    auto f = calpo::io::split_csv_line(l);
    for (auto& cell : f) {
      // Shorten long numbers for the terminal; the files keep full precision.
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (!cell.empty() && end && *end == '\0' && cell.find('.') != std::string::npos) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.4f", v);
        cell = buf;
      }
    }
    if (width.size() < f.size()) width.resize(f.size(), 0);
    for (std::size_t i = 0; i < f.size(); ++i) width[i] = std::max(width[i], f[i].size());
    rows.push_back(std::move(f));
  }
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      std::cout << r[i] << std::string(width[i] - r[i].size() + 2, ' ');
    }
    std::cout << '\n';
  }
}

int run(int argc, char** argv) {
  CLI::App app{"Calibration-aware preference optimization laboratory"};
  app.require_subcommand(1);

  CommonFlags train_f, drift_f, cont_f, conf_f, grad_f;
  std::string objective = "dpo_bpc";
  auto* train = app.add_subcommand("train", "train SFT then one objective on the synthetic task");
  add_common(train, train_f);
  train->add_option("--objective", objective, "sft | sft_label_smooth | dpo | dpo_bce | dpo_bpc");
  auto* drift = app.add_subcommand("drift", "SFT -> {DPO, DPO+BCE, DPO+BPC, LS, TS} calibration drift");
  add_common(drift, drift_f);
  auto* cont = app.add_subcommand("contaminate", "mean vs median under contaminated surrogates");
  add_common(cont, cont_f);
  auto* conf = app.add_subcommand("confatk", "Confidence@k selection accuracy");
  add_common(conf, conf_f);
  auto* grad = app.add_subcommand("gradcheck", "gradient, bound and identity checks");
  add_common(grad, grad_f);

  std::string records_path;
  std::size_t ece_bins = 20;
  std::optional<std::string> ece_out;
  auto* ece = app.add_subcommand("ece", "calibration metrics for a prediction-record CSV");
  ece->add_option("records", records_path, "CSV with header confidence,correct,...")->required();
  ece->add_option("--bins", ece_bins, "number of bins (default: 20)");
  ece->add_option("--out", ece_out, "write the reliability table to this CSV path");

  std::string report_dir;
  auto* report = app.add_subcommand("report", "print the summary tables of a run directory");
  report->add_option("run_dir", report_dir, "run directory")->required();

  CLI11_PARSE(app, argc, argv);

  if (*train) {
    auto c = resolve(train_f, calpo::Experiment::train);
    c.objective = calpo::objective_from_name(objective);
    std::cout << calpo::run_train(c).string() << '\n';
  } else if (*drift) {
    const auto r = calpo::run_drift_experiment(resolve(drift_f, calpo::Experiment::drift));
    std::cout << r.run_dir.string() << '\n';
    print_table_file(r.run_dir / "reports/summary_mean.csv");
  } else if (*cont) {
    const auto r = calpo::run_contamination_experiment(resolve(cont_f, calpo::Experiment::contamination));
    std::cout << r.run_dir.string() << '\n';
    print_table_file(r.run_dir / "reports/contamination_checks.csv");
  } else if (*conf) {
    const auto r = calpo::run_confat_k_experiment(resolve(conf_f, calpo::Experiment::confat_k));
    std::cout << r.run_dir.string() << '\n';
    print_table_file(r.run_dir / "reports/confat_k_summary.csv");
  } else if (*grad) {
    const auto r = calpo::run_gradcheck(resolve(grad_f, calpo::Experiment::gradcheck));
    std::cout << r.run_dir.string() << '\n';
    print_table_file(r.run_dir / "reports/gradcheck.csv");
    for (const auto& inv : r.report.results) {
      if (!inv.passed()) std::cerr << "FAILED " << inv.name << ": " << inv.counterexample << '\n';
    }
    if (!r.report.passed()) return 3;
  } else if (*ece) {
    const auto recs = calpo::records_from_csv(calpo::io::read_file(records_path));
    const auto s = calpo::summarize(recs, ece_bins);
    nlohmann::json j{{"n", recs.size()}, {"bins", ece_bins}, {"ece_binned", s.ece_binned}, {"l1_risk", s.l1_risk}};
    if (s.exact_ece) j["exact_ece"] = *s.exact_ece;
    if (s.cw_ece) j["cw_ece"] = *s.cw_ece;
    if (s.noise_term) j["noise_term"] = *s.noise_term;
    std::cout << j.dump(2) << '\n';
    if (ece_out) calpo::io::write_file_atomic(*ece_out, calpo::reliability_to_csv(calpo::reliability_diagram(recs, ece_bins)));
  } else if (*report) {
    const std::filesystem::path dir(report_dir);
    bool any = false;
    for (const char* name : {"summary_mean", "contamination_checks", "confat_k_summary", "gradcheck",
                             "metrics_suite", "evaluation"}) {
      const auto p = dir / "reports" / (std::string(name) + ".csv");
      if (!std::filesystem::exists(p)) continue;
      std::cout << "== " << name << '\n';
      print_table_file(p);
      any = true;
    }
    if (!any) throw calpo::InvalidInput("no summary tables under " + (dir / "reports").string());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const calpo::InvalidInput& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return 2;
  } catch (const calpo::InvariantViolation& e) {
    std::cerr << "invariant violated: " << e.what() << '\n';
    return 3;
  } catch (const calpo::NumericalDivergence& e) {
    std::cerr << "numerical divergence: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
