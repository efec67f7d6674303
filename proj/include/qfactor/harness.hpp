#pragma once

// Experiment configuration, orchestration, metric CSVs, seed summaries,
// SVG plots and the random-matrix study.

#include <glob.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "qfactor/agents.hpp"
#include "qfactor/envs.hpp"
#include "qfactor/training.hpp"
#include "qfactor/verifier.hpp"

namespace qfactor::harness {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct EnvConfig {
  std::string name = "matrix";  // matrix | wide_matrix | gs | mgs | mpp
  std::string payoff_file;      // matrix only; empty means the 3x3 example game
  int gs_agents = 10;
  int gs_levels = 10;
  std::vector<double> gs_s;     // one value broadcasts to every agent; empty means 0.15
  std::vector<double> gs_mu;    // empty means the named preset
  std::vector<double> gs_sigma;
  int mpp_width = 5;
  int mpp_height = 5;
  int mpp_predators = 2;
  int mpp_prey = 1;
  double mpp_penalty = 1.5;
  int mpp_episode_len = 100;

  friend bool operator==(const EnvConfig&, const EnvConfig&) = default;
};

struct ExperimentConfig {
  EnvConfig env;
  std::vector<Algo> algos{Algo::qtran_base};
  TrainConfig train;
  NetConfig net;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string output_dir = "runs";

  friend bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
    auto tc = [](const TrainConfig& t) {
      return std::make_tuple(t.lr, t.batch, t.lambda_opt, t.lambda_nopt, t.gamma, t.target_update, t.total_steps, t.buffer,
                             t.eps_start, t.eps_end, t.eps_anneal, t.eval_interval, t.eval_episodes, t.checkpoint_interval);
    };
    auto nc = [](const NetConfig& n) {
      return std::make_tuple(n.agent_hidden, n.feature_width, n.joint_hidden, n.mixer_width, n.shared_agents);
    };
    return a.env == b.env && a.algos == b.algos && tc(a.train) == tc(b.train) && nc(a.net) == nc(b.net) &&
           a.seeds == b.seeds && a.output_dir == b.output_dir;
  }
};

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

template <class T>
T parse_number(const std::string& text, const std::string& source, int line, const std::string& key) {
  T v{};
  const char* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || p != end) throw ParseError(source, line, key + ": '" + text + "' is not a valid number");
  return v;
}

template <class T>
std::vector<T> parse_list(const std::string& text, const std::string& source, int line, const std::string& key) {
  std::vector<T> out;
  for (const auto& w : split_ws(text)) out.push_back(parse_number<T>(w, source, line, key));
  return out;
}

inline bool parse_bool(const std::string& text, const std::string& source, int line, const std::string& key) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ParseError(source, line, key + ": expected true or false, got '" + text + "'");
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ' ';
    if constexpr (std::is_floating_point_v<T>)
      s += format_double(v[i]);
    else
      s += std::to_string(v[i]);
  }
  return s;
}

}  // namespace detail

/// Defaults for a named environment, scaled down for a single machine.
inline ExperimentConfig preset(const std::string& env_name) {
  ExperimentConfig c;
  c.env.name = env_name;
  if (env_name == "matrix" || env_name == "wide_matrix") {
    c.train.total_steps = 20000;
    c.train.buffer = 20000;
    c.train.gamma = 0.0;
    c.train.eps_start = c.train.eps_end = 1.0;
    c.train.eps_anneal = 0;
  } else if (env_name == "gs" || env_name == "mgs") {
    c.net = NetConfig{{64, 64, 64}, 64, {64, 64}, 32, true};
    c.train.total_steps = 200000;
    c.train.buffer = 200000;
    c.train.gamma = 0.0;
    c.train.eps_start = 1.0;
    c.train.eps_end = 0.1;
    c.train.eps_anneal = 100000;
  } else if (env_name == "mpp") {
    c.net = NetConfig{{64, 64, 64}, 64, {64, 64}, 32, true};
    c.train.total_steps = 300000;
    c.train.buffer = 300000;
    c.train.gamma = 0.99;
    c.train.target_update = 10000;
    c.train.eps_start = 1.0;
    c.train.eps_end = 0.1;
    c.train.eps_anneal = 90000;
  } else {
    throw ParseError("unknown environment '" + env_name + "'");
  }
  return c;
}

/// Parses `key = value` lines; '#' starts a comment. `env.name` is applied
/// first so its preset supplies defaults for every key not given.
inline ExperimentConfig parse_config(std::istream& is, const std::string& source = "config") {
  struct Entry {
    std::string key, value;
    int line;
  };
  std::vector<Entry> entries;
  std::string raw;
  for (int line = 1; std::getline(is, raw); ++line) {
    const auto hash = raw.find('#');
    const std::string text = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ParseError(source, line, "expected 'key = value'");
    Entry e{detail::trim(text.substr(0, eq)), detail::trim(text.substr(eq + 1)), line};
    if (e.key.empty()) throw ParseError(source, line, "missing key");
    for (const auto& prev : entries)
      if (prev.key == e.key) throw ParseError(source, line, "duplicate key '" + e.key + "'");
    entries.push_back(std::move(e));
  }

  std::string env_name = "matrix";
  for (const auto& e : entries)
    if (e.key == "env.name") {
      env_name = e.value;
      try {
        (void)preset(env_name);
      } catch (const ParseError&) {
        throw ParseError(source, e.line, "env.name: unknown environment '" + e.value + "'");
      }
    }
  ExperimentConfig c = preset(env_name);

  using detail::parse_bool;
  using detail::parse_list;
  using detail::parse_number;
  for (const auto& [key, value, line] : entries) {
    auto num_d = [&] { return parse_number<double>(value, source, line, key); };
    auto num_i = [&] { return parse_number<int>(value, source, line, key); };
    auto num_l = [&] { return parse_number<long>(value, source, line, key); };
    if (key == "env.name") {
    } else if (key == "env.payoff_file") {
      c.env.payoff_file = value;
    } else if (key == "env.gs.agents") {
      c.env.gs_agents = num_i();
    } else if (key == "env.gs.levels") {
      c.env.gs_levels = num_i();
    } else if (key == "env.gs.s") {
      c.env.gs_s = parse_list<double>(value, source, line, key);
    } else if (key == "env.gs.mu") {
      c.env.gs_mu = parse_list<double>(value, source, line, key);
    } else if (key == "env.gs.sigma") {
      c.env.gs_sigma = parse_list<double>(value, source, line, key);
    } else if (key == "env.mpp.width") {
      c.env.mpp_width = num_i();
    } else if (key == "env.mpp.height") {
      c.env.mpp_height = num_i();
    } else if (key == "env.mpp.predators") {
      c.env.mpp_predators = num_i();
    } else if (key == "env.mpp.prey") {
      c.env.mpp_prey = num_i();
    } else if (key == "env.mpp.penalty") {
      c.env.mpp_penalty = num_d();
    } else if (key == "env.mpp.episode_len") {
      c.env.mpp_episode_len = num_i();
    } else if (key == "algo") {
      c.algos.clear();
      for (const auto& w : detail::split_ws(value)) {
        try {
          c.algos.push_back(algo_from_string(w));
        } catch (const Error&) {
          throw ParseError(source, line, "algo: unknown algorithm '" + w + "'");
        }
      }
      if (c.algos.empty()) throw ParseError(source, line, "algo: at least one algorithm required");
    } else if (key == "train.lr") {
      c.train.lr = num_d();
    } else if (key == "train.batch") {
      c.train.batch = num_i();
    } else if (key == "train.lambda_opt") {
      c.train.lambda_opt = num_d();
    } else if (key == "train.lambda_nopt") {
      c.train.lambda_nopt = num_d();
    } else if (key == "train.gamma") {
      c.train.gamma = num_d();
    } else if (key == "train.target_update") {
      c.train.target_update = num_l();
    } else if (key == "train.total_steps") {
      c.train.total_steps = num_l();
    } else if (key == "train.buffer") {
      c.train.buffer = num_l();
    } else if (key == "train.eps_start") {
      c.train.eps_start = num_d();
    } else if (key == "train.eps_end") {
      c.train.eps_end = num_d();
    } else if (key == "train.eps_anneal") {
      c.train.eps_anneal = num_l();
    } else if (key == "train.eval_interval") {
      c.train.eval_interval = num_l();
    } else if (key == "train.eval_episodes") {
      c.train.eval_episodes = num_i();
    } else if (key == "train.checkpoint_interval") {
      c.train.checkpoint_interval = num_l();
    } else if (key == "net.agent_hidden") {
      c.net.agent_hidden = parse_list<int>(value, source, line, key);
    } else if (key == "net.feature_width") {
      c.net.feature_width = num_i();
    } else if (key == "net.joint_hidden") {
      c.net.joint_hidden = parse_list<int>(value, source, line, key);
    } else if (key == "net.mixer_width") {
      c.net.mixer_width = num_i();
    } else if (key == "net.shared_agents") {
      c.net.shared_agents = parse_bool(value, source, line, key);
    } else if (key == "seeds") {
      c.seeds = parse_list<std::uint64_t>(value, source, line, key);
      if (c.seeds.empty()) throw ParseError(source, line, "seeds: at least one seed required");
    } else if (key == "output_dir") {
      c.output_dir = value;
    } else {
      throw ParseError(source, line, "unknown key '" + key + "'");
    }
  }
  try {
    c.train.validate();
  } catch (const Error& e) {
    throw ParseError(source + ": " + e.what());
  }
  return c;
}

inline ExperimentConfig parse_config_string(const std::string& text, const std::string& source = "config") {
  std::istringstream is(text);
  return parse_config(is, source);
}

/// Reads a config file; a relative payoff_file is resolved against the
/// config file's directory and must exist.
inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open config file");
  ExperimentConfig c = parse_config(in, path);
  if (!c.env.payoff_file.empty()) {
    fs::path p(c.env.payoff_file);
    if (p.is_relative()) p = fs::path(path).parent_path() / p;
    if (!fs::exists(p)) throw ParseError(path, 0, "env.payoff_file: '" + p.string() + "' does not exist");
    c.env.payoff_file = p.lexically_normal().string();
  }
  return c;
}

inline std::string serialize_config(const ExperimentConfig& c) {
  using detail::join;
  std::ostringstream os;
  auto kv = [&](const std::string& k, const std::string& v) { os << k << " = " << v << "\n"; };
  kv("env.name", c.env.name);
  if (!c.env.payoff_file.empty()) kv("env.payoff_file", c.env.payoff_file);
  kv("env.gs.agents", std::to_string(c.env.gs_agents));
  kv("env.gs.levels", std::to_string(c.env.gs_levels));
  if (!c.env.gs_s.empty()) kv("env.gs.s", join(c.env.gs_s));
  if (!c.env.gs_mu.empty()) kv("env.gs.mu", join(c.env.gs_mu));
  if (!c.env.gs_sigma.empty()) kv("env.gs.sigma", join(c.env.gs_sigma));
  kv("env.mpp.width", std::to_string(c.env.mpp_width));
  kv("env.mpp.height", std::to_string(c.env.mpp_height));
  kv("env.mpp.predators", std::to_string(c.env.mpp_predators));
  kv("env.mpp.prey", std::to_string(c.env.mpp_prey));
  kv("env.mpp.penalty", format_double(c.env.mpp_penalty));
  kv("env.mpp.episode_len", std::to_string(c.env.mpp_episode_len));
  std::string algos;
  for (std::size_t i = 0; i < c.algos.size(); ++i) algos += (i ? " " : "") + to_string(c.algos[i]);
  kv("algo", algos);
  kv("train.lr", format_double(c.train.lr));
  kv("train.batch", std::to_string(c.train.batch));
  kv("train.lambda_opt", format_double(c.train.lambda_opt));
  kv("train.lambda_nopt", format_double(c.train.lambda_nopt));
  kv("train.gamma", format_double(c.train.gamma));
  kv("train.target_update", std::to_string(c.train.target_update));
  kv("train.total_steps", std::to_string(c.train.total_steps));
  kv("train.buffer", std::to_string(c.train.buffer));
  kv("train.eps_start", format_double(c.train.eps_start));
  kv("train.eps_end", format_double(c.train.eps_end));
  kv("train.eps_anneal", std::to_string(c.train.eps_anneal));
  kv("train.eval_interval", std::to_string(c.train.eval_interval));
  kv("train.eval_episodes", std::to_string(c.train.eval_episodes));
  kv("train.checkpoint_interval", std::to_string(c.train.checkpoint_interval));
  kv("net.agent_hidden", join(c.net.agent_hidden));
  kv("net.feature_width", std::to_string(c.net.feature_width));
  kv("net.joint_hidden", join(c.net.joint_hidden));
  kv("net.mixer_width", std::to_string(c.net.mixer_width));
  kv("net.shared_agents", c.net.shared_agents ? "true" : "false");
  kv("seeds", join(c.seeds));
  kv("output_dir", c.output_dir);
  return os.str();
}

inline envs::GaussianSqueezeSpec gs_spec_from(const EnvConfig& e) {
  envs::GaussianSqueezeSpec spec = e.name == "mgs" ? envs::mgs_spec() : envs::gs_spec();
  spec.n_agents = e.gs_agents;
  spec.action_levels = e.gs_levels;
  if (e.gs_s.size() == 1 || e.gs_s.empty()) {
    spec.s.assign(static_cast<std::size_t>(e.gs_agents), e.gs_s.empty() ? 0.15 : e.gs_s.front());
  } else {
    spec.s = e.gs_s;
  }
  if (!e.gs_mu.empty() || !e.gs_sigma.empty()) {
    if (e.gs_mu.size() != e.gs_sigma.size()) throw ParseError("env.gs.mu and env.gs.sigma must have equal length");
    spec.domains.clear();
    for (std::size_t k = 0; k < e.gs_mu.size(); ++k) spec.domains.push_back(envs::GaussianDomain{e.gs_mu[k], e.gs_sigma[k]});
  }
  spec.validate();
  return spec;
}

inline envs::PredatorPreySpec mpp_spec_from(const EnvConfig& e) {
  envs::PredatorPreySpec s{e.mpp_width, e.mpp_height, e.mpp_predators, e.mpp_prey, e.mpp_penalty, e.mpp_episode_len, 5};
  s.validate();
  return s;
}

inline EnvFactory make_env_factory(const EnvConfig& e) {
  if (e.name == "matrix") {
    auto table = e.payoff_file.empty() ? envs::penalty_payoff() : envs::load_payoff(e.payoff_file);
    return [table](std::uint64_t) { return std::make_unique<envs::MatrixGame>(table, "matrix"); };
  }
  if (e.name == "wide_matrix") {
    auto table = envs::wide_matrix_payoff();
    return [table](std::uint64_t) { return std::make_unique<envs::MatrixGame>(table, "wide_matrix"); };
  }
  if (e.name == "gs" || e.name == "mgs") {
    auto spec = gs_spec_from(e);
    auto tag = e.name;
    return [spec, tag](std::uint64_t) { return std::make_unique<envs::GaussianSqueeze>(spec, tag); };
  }
  if (e.name == "mpp") {
    auto spec = mpp_spec_from(e);
    return [spec](std::uint64_t seed) { return std::make_unique<envs::PredatorPrey>(spec, seed); };
  }
  throw ParseError("unknown environment '" + e.name + "'");
}

// ---------------------------------------------------------------------------
// Metric CSV
// ---------------------------------------------------------------------------

inline constexpr const char* kCsvHeader = "step,seed,algo,env_tag,eval_reward_mean,loss_td,loss_opt,loss_nopt,epsilon";

struct MetricRow {
  long step = 0;
  std::uint64_t seed = 0;
  std::string algo;
  std::string env_tag;
  double eval_reward_mean = 0.0;
  double loss_td = 0.0;
  double loss_opt = 0.0;
  double loss_nopt = 0.0;
  double epsilon = 0.0;

  friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

inline MetricRow to_row(const MetricPoint& m, std::uint64_t seed, Algo algo, const std::string& env_tag) {
  return MetricRow{m.step, seed, to_string(algo), env_tag, m.eval_reward_mean, m.loss_td, m.loss_opt, m.loss_nopt, m.epsilon};
}

inline void write_csv_row(std::ostream& os, const MetricRow& r) {
  os << r.step << ',' << r.seed << ',' << r.algo << ',' << r.env_tag << ',' << format_double(r.eval_reward_mean) << ','
     << format_double(r.loss_td) << ',' << format_double(r.loss_opt) << ',' << format_double(r.loss_nopt) << ','
     << format_double(r.epsilon) << '\n';
}

inline std::vector<MetricRow> read_metrics_csv(std::istream& is, const std::string& source = "csv") {
  std::string line;
  if (!std::getline(is, line) || detail::trim(line) != kCsvHeader) throw ParseError(source, 1, "missing or unexpected CSV header");
  std::vector<MetricRow> rows;
  for (int n = 2; std::getline(is, line); ++n) {
    if (detail::trim(line).empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(detail::trim(cell));
    if (f.size() != 9) throw ParseError(source, n, "expected 9 fields, got " + std::to_string(f.size()));
    MetricRow r;
    r.step = detail::parse_number<long>(f[0], source, n, "step");
    r.seed = detail::parse_number<std::uint64_t>(f[1], source, n, "seed");
    r.algo = f[2];
    r.env_tag = f[3];
    r.eval_reward_mean = detail::parse_number<double>(f[4], source, n, "eval_reward_mean");
    r.loss_td = detail::parse_number<double>(f[5], source, n, "loss_td");
    r.loss_opt = detail::parse_number<double>(f[6], source, n, "loss_opt");
    r.loss_nopt = detail::parse_number<double>(f[7], source, n, "loss_nopt");
    r.epsilon = detail::parse_number<double>(f[8], source, n, "epsilon");
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::vector<MetricRow> read_metrics_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open CSV");
  return read_metrics_csv(in, path);
}

inline std::vector<std::string> expand_glob(const std::string& pattern) {
  glob_t g{};
  const int rc = ::glob(pattern.c_str(), 0, nullptr, &g);
  std::vector<std::string> out;
  if (rc == 0)
    for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
  globfree(&g);
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

inline int worker_count(std::size_t jobs) {
  int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("QFACTOR_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) n = v;
  }
  return std::max(1, std::min<int>(n, static_cast<int>(jobs)));
}

/// Runs fn(k) for k in [0, jobs) on a pool of worker threads.
template <class Fn>
void parallel_for(std::size_t jobs, int workers, Fn fn) {
  if (workers <= 1 || jobs <= 1) {
    for (std::size_t k = 0; k < jobs; ++k) fn(k);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t k; (k = next.fetch_add(1)) < jobs;) fn(k);
    });
  for (auto& t : pool) t.join();
}

struct RunOutcome {
  Algo algo = Algo::vdn;
  std::uint64_t seed = 0;
  std::string csv_path;
  std::string checkpoint_path;
  std::vector<MetricPoint> metrics;
  std::vector<int> final_greedy;  // greedy joint action at reset (single-state envs)
  bool ok = false;
  std::string error;
};

inline std::string run_stem(const std::string& env_tag, Algo algo, std::uint64_t seed) {
  return env_tag + "_" + to_string(algo) + "_seed" + std::to_string(seed);
}

/// One (algo, seed) run writing its CSV and final checkpoint under out_dir.
inline RunOutcome run_single(const ExperimentConfig& cfg, Algo algo, std::uint64_t seed, const std::string& out_dir) {
  RunOutcome o;
  o.algo = algo;
  o.seed = seed;
  const auto factory = make_env_factory(cfg.env);
  const std::string tag = factory(0)->tag();
  fs::create_directories(out_dir);
  const std::string stem = (fs::path(out_dir) / run_stem(tag, algo, seed)).string();
  o.csv_path = stem + ".csv";
  o.checkpoint_path = stem + ".ckpt";
  std::ofstream csv(o.csv_path);
  if (!csv) throw Error("cannot write " + o.csv_path);
  csv << kCsvHeader << '\n';
  TrainHooks hooks;
  hooks.on_metric = [&](const MetricPoint& m) {
    write_csv_row(csv, to_row(m, seed, algo, tag));
    csv.flush();
  };
  hooks.on_checkpoint = [&](long step, const Assembly& a) { save_assembly(stem + "_step" + std::to_string(step) + ".ckpt", a); };
  try {
    auto result = train(factory, algo, cfg.train, cfg.net, seed, hooks);
    save_assembly(o.checkpoint_path, result.assembly);
    auto env = factory(0);
    if (env->single_state()) o.final_greedy = greedy_joint(result.assembly, env->reset());
    o.metrics = std::move(result.metrics);
    o.ok = true;
  } catch (const Error& e) {
    o.error = e.what();
  }
  return o;
}

/// Every (algo, seed) pair of the config, spread over QFACTOR_THREADS workers.
inline std::vector<RunOutcome> run_experiment(const ExperimentConfig& cfg, int workers = 0) {
  std::vector<std::pair<Algo, std::uint64_t>> jobs;
  for (Algo a : cfg.algos)
    for (auto s : cfg.seeds) jobs.emplace_back(a, s);
  std::vector<RunOutcome> out(jobs.size());
  if (workers <= 0) workers = worker_count(jobs.size());
  parallel_for(jobs.size(), workers, [&](std::size_t k) {
    try {
      out[k] = run_single(cfg, jobs[k].first, jobs[k].second, cfg.output_dir);
    } catch (const std::exception& e) {
      out[k].algo = jobs[k].first;
      out[k].seed = jobs[k].second;
      out[k].error = e.what();
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Summaries
// ---------------------------------------------------------------------------

struct SummaryRow {
  std::string env_tag;
  std::string algo;
  long step = 0;
  int n = 0;
  double mean = 0.0;
  double stderr_ = 0.0;  // NaN with a single seed
  double ci_low = 0.0;
  double ci_high = 0.0;
};

/// Mean and normal-approximation 95% interval (mean +- 1.96 * sd / sqrt(n))
/// of eval_reward_mean over seeds, per (env_tag, algo, step).
inline std::vector<SummaryRow> summarize_rows(const std::vector<MetricRow>& rows) {
  std::map<std::tuple<std::string, std::string, long>, std::vector<double>> groups;
  for (const auto& r : rows) groups[{r.env_tag, r.algo, r.step}].push_back(r.eval_reward_mean);
  std::vector<SummaryRow> out;
  for (const auto& [key, vals] : groups) {
    SummaryRow s;
    std::tie(s.env_tag, s.algo, s.step) = key;
    s.n = static_cast<int>(vals.size());
    double sum = 0.0;
    for (double v : vals) sum += v;
    s.mean = sum / s.n;
    if (s.n >= 2) {
      double ss = 0.0;
      for (double v : vals) ss += (v - s.mean) * (v - s.mean);
      s.stderr_ = std::sqrt(ss / (s.n - 1)) / std::sqrt(static_cast<double>(s.n));
    } else {
      s.stderr_ = std::numeric_limits<double>::quiet_NaN();
    }
    s.ci_low = s.mean - 1.96 * s.stderr_;
    s.ci_high = s.mean + 1.96 * s.stderr_;
    out.push_back(s);
  }
  return out;
}

inline std::vector<SummaryRow> summarize(const std::string& pattern) {
  const auto files = expand_glob(pattern);
  if (files.empty()) throw Error("summarize: no files match '" + pattern + "'");
  std::vector<MetricRow> rows;
  for (const auto& f : files) {
    auto r = read_metrics_file(f);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return summarize_rows(rows);
}

inline constexpr const char* kSummaryHeader = "env_tag,algo,step,n,mean,stderr,ci_low,ci_high";

inline void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows) {
  os << kSummaryHeader << '\n';
  for (const auto& r : rows)
    os << r.env_tag << ',' << r.algo << ',' << r.step << ',' << r.n << ',' << format_double(r.mean) << ','
       << format_double(r.stderr_) << ',' << format_double(r.ci_low) << ',' << format_double(r.ci_high) << '\n';
}

inline void print_summary_table(std::ostream& os, const std::vector<SummaryRow>& rows) {
  os << std::left << std::setw(16) << "env" << std::setw(12) << "algo" << std::right << std::setw(10) << "step" << std::setw(5)
     << "n" << std::setw(13) << "mean" << std::setw(13) << "95% ci +-" << '\n';
  os << std::fixed << std::setprecision(4);
  for (const auto& r : rows)
    os << std::left << std::setw(16) << r.env_tag << std::setw(12) << r.algo << std::right << std::setw(10) << r.step
       << std::setw(5) << r.n << std::setw(13) << r.mean << std::setw(13) << 1.96 * r.stderr_ << '\n';
  os.unsetf(std::ios::floatfield);
}

/// Line chart of the per-algorithm mean reward with its 95% band.
inline void write_svg_plot(std::ostream& os, const std::vector<SummaryRow>& rows, const std::string& title = "") {
  const double W = 720, H = 420, ml = 70, mr = 150, mt = 40, mb = 50;
  std::map<std::string, std::vector<const SummaryRow*>> series;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& r : rows) {
    series[r.env_tag + " " + r.algo].push_back(&r);
    xmin = std::min(xmin, static_cast<double>(r.step));
    xmax = std::max(xmax, static_cast<double>(r.step));
    const double lo = std::isfinite(r.ci_low) ? r.ci_low : r.mean, hi = std::isfinite(r.ci_high) ? r.ci_high : r.mean;
    ymin = std::min(ymin, lo);
    ymax = std::max(ymax, hi);
  }
  if (rows.empty()) xmin = ymin = 0, xmax = ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (W - ml - mr); };
  auto py = [&](double y) { return H - mb - (y - ymin) / (ymax - ymin) * (H - mt - mb); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty()) os << "<text x=\"" << ml << "\" y=\"24\" font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = xmin + k * (xmax - xmin) / 4, yv = ymin + k * (ymax - ymin) / 4;
    os << "<text x=\"" << px(xv) << "\" y=\"" << H - mb + 18 << "\" text-anchor=\"middle\">" << static_cast<long>(xv) << "</text>\n";
    os << "<text x=\"" << ml - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << yv << "</text>\n";
  }
  os << "<text x=\"" << (ml + W - mr) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">step</text>\n";
  int ci = 0;
  for (const auto& [name, pts] : series) {
    const char* col = colors[ci % 8];
    std::string band, line;
    for (const auto* p : pts) {
      line += (line.empty() ? "" : " ") + format_double(px(static_cast<double>(p->step))) + "," + format_double(py(p->mean));
    }
    if (pts.size() > 1 && std::isfinite(pts.front()->ci_low)) {
      for (const auto* p : pts) band += format_double(px(static_cast<double>(p->step))) + "," + format_double(py(p->ci_high)) + " ";
      for (auto it = pts.rbegin(); it != pts.rend(); ++it)
        band += format_double(px(static_cast<double>((*it)->step))) + "," + format_double(py((*it)->ci_low)) + " ";
      os << "<polygon points=\"" << band << "\" fill=\"" << col << "\" fill-opacity=\"0.15\" stroke=\"none\"/>\n";
    }
    os << "<polyline points=\"" << line << "\" fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\"/>\n";
    os << "<text x=\"" << W - mr + 10 << "\" y=\"" << mt + 16 * ci << "\" fill=\"" << col << "\">" << name << "</text>\n";
    ++ci;
  }
  os << "</svg>\n";
  os.unsetf(std::ios::floatfield);
}

// ---------------------------------------------------------------------------
// Random-matrix study
// ---------------------------------------------------------------------------

struct StudyInstance {
  envs::PayoffTable table;
  verify::OracleResult oracle;
  std::map<Algo, std::vector<int>> greedy;
  std::map<Algo, double> reward;  // payoff at the greedy joint action
  std::map<Algo, bool> optimal;
};

struct SweepSummary {
  int instances = 0;
  std::map<Algo, int> success;
  std::map<Algo, double> mean_final_reward;
  // Four-way comparison of final rewards; anything else lands in `other`.
  int all_equal = 0;
  int qtran_beats_both_tied = 0;
  int vdn_beats_qmix = 0;
  int qmix_beats_vdn = 0;
  int other = 0;
  std::vector<StudyInstance> details;
};

inline const std::vector<Algo>& study_algos() {
  static const std::vector<Algo> a{Algo::qtran_base, Algo::vdn, Algo::qmix};
  return a;
}

inline void classify(SweepSummary& s, const StudyInstance& inst) {
  const double q = inst.reward.at(Algo::qtran_base), v = inst.reward.at(Algo::vdn), m = inst.reward.at(Algo::qmix);
  if (q == v && v == m)
    ++s.all_equal;
  else if (v == m && q > v)
    ++s.qtran_beats_both_tied;
  else if (v > m)
    ++s.vdn_beats_qmix;
  else if (m > v)
    ++s.qmix_beats_vdn;
  else
    ++s.other;
}

/// Trains QTRAN-base, VDN and QMIX on `count` random 3x3 games (full
/// exploration, `steps` steps each). `injected` tables replace the first
/// random draws.
inline SweepSummary random_matrix_study(int count, long steps, std::uint64_t seed, int workers = 0,
                                        const std::vector<envs::PayoffTable>& injected = {}) {
  if (count < 1) throw RangeError("random_matrix_study: count must be >= 1");
  Rng rng(derive_seed(seed, 100));
  std::vector<StudyInstance> inst(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    auto t = envs::random_payoff(rng);
    inst[static_cast<std::size_t>(k)].table = static_cast<std::size_t>(k) < injected.size() ? injected[static_cast<std::size_t>(k)] : t;
    inst[static_cast<std::size_t>(k)].oracle = verify::oracle_optimal(inst[static_cast<std::size_t>(k)].table);
  }
  ExperimentConfig base = preset("matrix");
  base.train.total_steps = steps;
  base.train.buffer = std::max<long>(steps, 1);
  base.train.eval_interval = std::max<long>(steps, 1);
  base.train.eval_episodes = 1;

  const auto& algos = study_algos();
  const std::size_t jobs = inst.size() * algos.size();
  std::vector<std::vector<int>> greedy(jobs);
  std::vector<std::string> errors(jobs);
  if (workers <= 0) workers = worker_count(jobs);
  parallel_for(jobs, workers, [&](std::size_t j) {
    const auto& table = inst[j / algos.size()].table;
    const Algo algo = algos[j % algos.size()];
    EnvFactory f = [&table](std::uint64_t) { return std::make_unique<envs::MatrixGame>(table); };
    try {
      auto r = train(f, algo, base.train, base.net, derive_seed(seed, 1000 + j / algos.size()));
      greedy[j] = greedy_joint(r.assembly, f(0)->reset());
    } catch (const std::exception& e) {
      errors[j] = e.what();
    }
  });
  for (const auto& e : errors)
    if (!e.empty()) throw Error("random_matrix_study: " + e);

  SweepSummary s;
  s.instances = count;
  for (Algo a : algos) s.success[a] = 0, s.mean_final_reward[a] = 0.0;
  for (std::size_t k = 0; k < inst.size(); ++k) {
    auto& in = inst[k];
    for (std::size_t a = 0; a < algos.size(); ++a) {
      const auto& g = greedy[k * algos.size() + a];
      in.greedy[algos[a]] = g;
      in.reward[algos[a]] = in.table.at(g);
      in.optimal[algos[a]] = in.oracle.contains(g);
      if (in.optimal[algos[a]]) ++s.success[algos[a]];
      s.mean_final_reward[algos[a]] += in.reward[algos[a]] / count;
    }
    classify(s, in);
  }
  s.details = std::move(inst);
  return s;
}

inline void print_sweep(std::ostream& os, const SweepSummary& s) {
  os << "instances " << s.instances << "\n";
  os << std::fixed << std::setprecision(4);
  for (Algo a : study_algos())
    os << std::left << std::setw(12) << to_string(a) << " optimal " << std::right << std::setw(4) << s.success.at(a) << " / "
       << s.instances << "   mean final reward " << s.mean_final_reward.at(a) << "\n";
  os.unsetf(std::ios::floatfield);
  os << "QTRAN=VDN=QMIX  QTRAN>VDN=QMIX  VDN>QMIX  QMIX>VDN  other\n";
  os << std::setw(14) << s.all_equal << std::setw(16) << s.qtran_beats_both_tied << std::setw(10) << s.vdn_beats_qmix
     << std::setw(10) << s.qmix_beats_vdn << std::setw(7) << s.other << "\n";
}

}  // namespace qfactor::harness
