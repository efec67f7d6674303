// Command-line front end: train, verify, sweep, summarize, plot.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "qfactor/harness.hpp"
#include "qfactor/qfactor.hpp"

using namespace qfactor;
using namespace qfactor::harness;

namespace {

struct TrainArgs {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::vector<std::string> algos;
  long steps = -1;
  int workers = 0;
};

int cmd_train(const TrainArgs& a) {
  ExperimentConfig cfg = load_config(a.config);
  if (!a.seeds.empty()) cfg.seeds = a.seeds;
  if (!a.out.empty()) cfg.output_dir = a.out;
  if (!a.algos.empty()) {
    cfg.algos.clear();
    for (const auto& s : a.algos) cfg.algos.push_back(algo_from_string(s));
  }
  if (a.steps >= 0) cfg.train.total_steps = a.steps;
  cfg.train.validate();

  const auto outcomes = run_experiment(cfg, a.workers);
  int failed = 0;
  for (const auto& o : outcomes) {
    std::cout << std::left << std::setw(12) << to_string(o.algo) << " seed " << std::setw(4) << o.seed;
    if (!o.ok) {
      ++failed;
      std::cout << " FAILED: " << o.error << "\n";
      continue;
    }
    if (!o.metrics.empty()) std::cout << " final eval reward " << o.metrics.back().eval_reward_mean;
    if (!o.final_greedy.empty()) std::cout << "  greedy " << verify::joint_label(o.final_greedy, false);
    std::cout << "  -> " << o.csv_path << "\n";
  }
  return failed == 0 ? 0 : 1;
}

struct VerifyArgs {
  std::string checkpoint;
  std::string env_config;
  std::string payoff;
  std::string condition = "theorem1";
  std::string vmode = "provided";
  std::string report;
  double tol = verify::kLearnedTol;
  std::uint64_t seed = 0;
};

int cmd_verify(const VerifyArgs& a) {
  const Assembly net = load_assembly(a.checkpoint);
  EnvConfig env;
  if (!a.env_config.empty()) env = load_config(a.env_config).env;
  if (!a.payoff.empty()) {
    env.name = "matrix";
    env.payoff_file = a.payoff;
  }
  auto instance = make_env_factory(env)(a.seed);
  if (instance->n_agents() != net.n_agents() || instance->n_actions() != net.n_actions() || instance->obs_dim() != net.shape.obs_dim)
    throw ArchitectureMismatch("checkpoint does not match the environment (" + instance->tag() + ")");
  const JointObservation obs = instance->reset();

  verify::VMode mode = verify::VMode::provided_or_zero;
  if (a.vmode == "zero") mode = verify::VMode::zero;
  else if (a.vmode == "definition") mode = verify::VMode::definition;

  const auto table = verify::extract_tabular(net, obs);
  const auto rep = a.condition == "theorem2" ? verify::check_theorem2(table, a.tol, mode) : verify::check_theorem1(table, a.tol, mode);
  std::cout << "checkpoint     " << a.checkpoint << " (" << to_string(net.algo) << ", " << instance->tag() << ")\n";
  verify::print_report(std::cout, rep);

  if (env.name == "matrix" || env.name == "wide_matrix") {
    const auto payoff = env.name == "wide_matrix" ? envs::wide_matrix_payoff()
                        : env.payoff_file.empty() ? envs::penalty_payoff()
                                                  : envs::load_payoff(env.payoff_file);
    const auto truth = verify::oracle_optimal(payoff);
    std::cout << "payoff optimum " << truth.value << "  greedy is " << (truth.contains(rep.greedy) ? "optimal" : "NOT optimal")
              << " under the true payoff\n";
  }

  const std::string path = a.report.empty() ? a.checkpoint + ".report" : a.report;
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << "checkpoint = " << a.checkpoint << "\n";
  os << "algo = " << to_string(net.algo) << "\n";
  os << "env_tag = " << instance->tag() << "\n";
  verify::write_report(os, rep);
  std::cout << "report written to " << path << "\n";
  return rep.satisfied ? 0 : 2;
}

struct SweepArgs {
  int count = 30;
  long steps = 20000;
  std::uint64_t seed = 1;
  int workers = 0;
  std::string csv;
};

int cmd_sweep(const SweepArgs& a) {
  const auto s = random_matrix_study(a.count, a.steps, a.seed, a.workers);
  print_sweep(std::cout, s);
  if (!a.csv.empty()) {
    std::ofstream os(a.csv);
    if (!os) throw Error("cannot write " + a.csv);
    os << "instance,algo,greedy,reward,optimal_value,optimal\n";
    for (std::size_t k = 0; k < s.details.size(); ++k)
      for (Algo algo : study_algos()) {
        const auto& d = s.details[k];
        const auto& g = d.greedy.at(algo);
        os << k << ',' << to_string(algo) << ',' << g[0] << ' ' << g[1] << ',' << format_double(d.reward.at(algo)) << ','
           << format_double(d.oracle.value) << ',' << (d.optimal.at(algo) ? 1 : 0) << '\n';
      }
  }
  return 0;
}

int cmd_summarize(const std::string& pattern, const std::string& csv) {
  const auto rows = summarize(pattern);
  if (csv == "-") {
    write_summary_csv(std::cout, rows);
    return 0;
  }
  print_summary_table(std::cout, rows);
  if (!csv.empty()) {
    std::ofstream os(csv);
    if (!os) throw Error("cannot write " + csv);
    write_summary_csv(os, rows);
  }
  return 0;
}

int cmd_plot(const std::string& pattern, const std::string& out, const std::string& title) {
  const auto rows = summarize(pattern);
  std::ofstream os(out);
  if (!os) throw Error("cannot write " + out);
  write_svg_plot(os, rows, title);
  std::cout << "wrote " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Value-factorization MARL experiments: train, verify, sweep, summarize, plot"};
  app.require_subcommand(1);
  int rc = 0;

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train every (algo, seed) of a config");
  train->add_option("--config", ta.config, "experiment config file")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", ta.seeds, "seed(s); overrides the config list");
  train->add_option("--out", ta.out, "output directory; overrides output_dir");
  train->add_option("--algo", ta.algos, "algorithm(s); overrides the config")
      ->check(CLI::IsMember({"vdn", "qmix", "qtran-base", "qtran-alt"}));
  train->add_option("--steps", ta.steps, "override train.total_steps")->check(CLI::NonNegativeNumber);
  train->add_option("--workers", ta.workers, "parallel runs (default QFACTOR_THREADS or core count)");
  train->callback([&] { rc = cmd_train(ta); });

  VerifyArgs va;
  auto* ver = app.add_subcommand("verify", "check factorization conditions of a trained checkpoint");
  ver->add_option("--checkpoint", va.checkpoint, "checkpoint written by train")->required()->check(CLI::ExistingFile);
  auto* envopt = ver->add_option("--env-config", va.env_config, "config whose env.* keys describe the environment")
                     ->check(CLI::ExistingFile);
  auto* payopt = ver->add_option("--payoff", va.payoff, "payoff-table file (matrix game)")->check(CLI::ExistingFile);
  envopt->excludes(payopt);
  ver->add_option("--tol", va.tol, "residual tolerance")->capture_default_str();
  ver->add_option("--condition", va.condition, "theorem1 or theorem2")
      ->check(CLI::IsMember({"theorem1", "theorem2"}))
      ->capture_default_str();
  ver->add_option("--vjt", va.vmode, "V_jt source: provided (net, else 0), zero, definition")
      ->check(CLI::IsMember({"provided", "zero", "definition"}))
      ->capture_default_str();
  ver->add_option("--report", va.report, "report file (default <checkpoint>.report)");
  ver->add_option("--seed", va.seed, "environment seed for the evaluated state");
  ver->callback([&] {
    if (va.env_config.empty() && va.payoff.empty()) throw CLI::ValidationError("verify", "--env-config or --payoff is required");
    rc = cmd_verify(va);
  });

  SweepArgs sa;
  auto* sweep = app.add_subcommand("sweep", "random 3x3 matrix study");
  sweep->add_option("--random-matrices", sa.count, "number of random games")->capture_default_str()->check(CLI::PositiveNumber);
  sweep->add_option("--steps", sa.steps, "training steps per run")->capture_default_str()->check(CLI::PositiveNumber);
  sweep->add_option("--seed", sa.seed, "study seed")->capture_default_str();
  sweep->add_option("--workers", sa.workers, "parallel runs");
  sweep->add_option("--csv", sa.csv, "per-instance results file");
  sweep->callback([&] { rc = cmd_sweep(sa); });

  std::string glob, csv, out, title;
  auto* summ = app.add_subcommand("summarize", "mean and 95% interval over seeds");
  summ->add_option("--glob", glob, "metric CSV pattern")->required();
  summ->add_option("--csv", csv, "also write the summary CSV here ('-' for stdout only)");
  summ->callback([&] { rc = cmd_summarize(glob, csv); });

  auto* plot = app.add_subcommand("plot", "SVG line chart of summarized metrics");
  plot->add_option("--glob", glob, "metric CSV pattern")->required();
  plot->add_option("--out", out, "SVG output file")->required();
  plot->add_option("--title", title, "chart title");
  plot->callback([&] { rc = cmd_plot(glob, out, title); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
