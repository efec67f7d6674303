#pragma once

// Cooperative environments: single-state matrix games, (multi-domain)
// Gaussian Squeeze and the modified predator-prey grid world.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qfactor/error.hpp"
#include "qfactor/nn.hpp"

namespace qfactor {

/// Column i holds agent i's observation.
using JointObservation = Matrix;
using JointObsPtr = std::shared_ptr<const JointObservation>;

struct StepResult {
  double reward = 0.0;
  bool done = false;
  JointObservation next_obs;
};

class Environment {
 public:
  virtual ~Environment() = default;

  virtual int n_agents() const = 0;
  virtual int n_actions() const = 0;
  virtual int obs_dim() const = 0;
  virtual int episode_length() const = 0;
  /// True when every observation of every episode is identical.
  virtual bool single_state() const = 0;
  virtual std::string tag() const = 0;

  virtual JointObservation reset() = 0;
  virtual StepResult step(std::span<const int> actions) = 0;
};

namespace envs {

inline void check_actions(std::span<const int> u, int n_agents, int n_actions) {
  if (static_cast<int>(u.size()) != n_agents) {
    throw RangeError("expected " + std::to_string(n_agents) + " actions, got " + std::to_string(u.size()));
  }
  for (int a : u)
    if (a < 0 || a >= n_actions) throw RangeError("action " + std::to_string(a) + " out of range");
}

// ---------------------------------------------------------------------------
// Payoff tables
// ---------------------------------------------------------------------------

/// Joint-reward tensor of a single-state game, stored row-major with agent 0
/// as the most significant index.
class PayoffTable {
 public:
  PayoffTable() = default;
  PayoffTable(int n_agents, int actions, std::vector<double> rewards)
      : n_agents_(n_agents), actions_(actions), rewards_(std::move(rewards)) {
    if (n_agents <= 0 || actions <= 0) throw RangeError("payoff table needs positive agents and actions");
    double size = std::pow(static_cast<double>(actions), n_agents);
    if (size > 1e8) throw RangeError("payoff table too large");
    if (rewards_.size() != static_cast<std::size_t>(size)) {
      throw DimensionError("payoff table needs " + std::to_string(static_cast<std::size_t>(size)) +
                           " entries, got " + std::to_string(rewards_.size()));
    }
    for (double r : rewards_)
      if (!std::isfinite(r)) throw RangeError("payoff table entries must be finite");
  }

  int n_agents() const { return n_agents_; }
  int actions() const { return actions_; }
  std::size_t size() const { return rewards_.size(); }
  const std::vector<double>& rewards() const { return rewards_; }

  std::size_t index(std::span<const int> u) const {
    check_actions(u, n_agents_, actions_);
    std::size_t idx = 0;
    for (int a : u) idx = idx * static_cast<std::size_t>(actions_) + static_cast<std::size_t>(a);
    return idx;
  }

  std::vector<int> decode(std::size_t idx) const {
    std::vector<int> u(static_cast<std::size_t>(n_agents_));
    for (int i = n_agents_ - 1; i >= 0; --i) {
      u[static_cast<std::size_t>(i)] = static_cast<int>(idx % static_cast<std::size_t>(actions_));
      idx /= static_cast<std::size_t>(actions_);
    }
    return u;
  }

  double at(std::span<const int> u) const { return rewards_[index(u)]; }
  double at(std::initializer_list<int> u) const { return at(std::span<const int>(u.begin(), u.size())); }

 private:
  int n_agents_ = 0;
  int actions_ = 0;
  std::vector<double> rewards_;
};

inline double matrix_reward(const PayoffTable& table, std::span<const int> u) { return table.at(u); }

/// Two agents, actions A/B/C; optimum (A, A) = 8.
inline PayoffTable penalty_payoff() {
  return PayoffTable(2, 3, {8, -12, -12, -12, 0, 0, -12, 0, 0});
}

inline double wide_matrix_reward(int u1, int u2) {
  if (u1 < 0 || u1 > 20 || u2 < 0 || u2 > 20) throw RangeError("wide matrix game actions lie in 0..20");
  const double a = (15.0 - u1) / 3.0, b = (5.0 - u2) / 3.0;
  const double f1 = 5.0 - a * a - b * b;
  const double c = 5.0 - u1, d = 15.0 - u2;
  const double f2 = 10.0 - c * c - d * d;
  return std::max(f1, f2);
}

/// The 21 x 21 game with global maximum (5, 15) and local maximum (15, 5).
inline PayoffTable wide_matrix_payoff() {
  std::vector<double> r;
  r.reserve(21 * 21);
  for (int u1 = 0; u1 <= 20; ++u1)
    for (int u2 = 0; u2 <= 20; ++u2) r.push_back(wide_matrix_reward(u1, u2));
  return PayoffTable(2, 21, std::move(r));
}

/// I.i.d. uniform [0, 1) entries.
inline PayoffTable random_payoff(Rng& rng, int n_agents = 2, int actions = 3) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  std::size_t size = 1;
  for (int i = 0; i < n_agents; ++i) size *= static_cast<std::size_t>(actions);
  std::vector<double> r(size);
  for (auto& v : r) v = dist(rng);
  return PayoffTable(n_agents, actions, std::move(r));
}

/// Text format: first line "n_agents actions", then the rewards in row-major
/// joint-action order (any whitespace).
inline void write_payoff(std::ostream& os, const PayoffTable& t) {
  os << t.n_agents() << ' ' << t.actions() << '\n' << std::setprecision(17);
  for (std::size_t k = 0; k < t.size(); ++k) {
    os << t.rewards()[k] << ((k + 1) % static_cast<std::size_t>(t.actions()) == 0 ? '\n' : ' ');
  }
}

inline PayoffTable read_payoff(std::istream& is, const std::string& source = "payoff") {
  int n = 0, a = 0;
  if (!(is >> n >> a)) throw ParseError(source, 1, "expected 'n_agents actions'");
  if (n <= 0 || a <= 0) throw ParseError(source, 1, "n_agents and actions must be positive");
  std::vector<double> r;
  double v = 0;
  while (is >> v) r.push_back(v);
  if (!is.eof()) throw ParseError(source + ": non-numeric reward entry");
  try {
    return PayoffTable(n, a, std::move(r));
  } catch (const Error& e) {
    throw ParseError(source + ": " + e.what());
  }
}

inline PayoffTable load_payoff(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open payoff file '" + path + "'");
  return read_payoff(f, path);
}

/// Single-state matrix game. Each agent observes the constant 1.0 and the
/// episode ends after one step.
class MatrixGame final : public Environment {
 public:
  explicit MatrixGame(PayoffTable table, std::string tag = "matrix") : table_(std::move(table)), tag_(std::move(tag)) {}

  int n_agents() const override { return table_.n_agents(); }
  int n_actions() const override { return table_.actions(); }
  int obs_dim() const override { return 1; }
  int episode_length() const override { return 1; }
  bool single_state() const override { return true; }
  std::string tag() const override { return tag_; }

  JointObservation reset() override { return JointObservation::Ones(1, n_agents()); }

  StepResult step(std::span<const int> actions) override {
    return StepResult{matrix_reward(table_, actions), true, JointObservation::Ones(1, n_agents())};
  }

  const PayoffTable& table() const { return table_; }

 private:
  PayoffTable table_;
  std::string tag_;
};

// ---------------------------------------------------------------------------
// Gaussian Squeeze
// ---------------------------------------------------------------------------

struct GaussianDomain {
  double mu = 8.0;
  double sigma = 1.0;
};

struct GaussianSqueezeSpec {
  int n_agents = 10;
  int action_levels = 10;
  std::vector<double> s = std::vector<double>(10, 0.15);
  std::vector<GaussianDomain> domains = {GaussianDomain{8.0, 1.0}};

  void validate() const {
    if (n_agents <= 0 || action_levels <= 0) throw RangeError("gaussian squeeze: agents and levels must be positive");
    if (static_cast<int>(s.size()) != n_agents) throw DimensionError("gaussian squeeze: need one s_i per agent");
    for (double si : s)
      if (!(si >= 0.0 && si <= 0.2)) throw RangeError("gaussian squeeze: s_i must lie in [0, 0.2]");
    if (domains.empty()) throw RangeError("gaussian squeeze: need at least one domain");
    for (const auto& d : domains)
      if (!(d.sigma > 0.0)) throw RangeError("gaussian squeeze: sigma must be positive");
  }
};

/// K = 1, mu = 8, sigma = 1.
inline GaussianSqueezeSpec gs_spec(double s_all = 0.15) {
  GaussianSqueezeSpec spec;
  spec.s.assign(10, s_all);
  spec.domains = {GaussianDomain{8.0, 1.0}};
  return spec;
}

/// K = 2: a narrow high peak at 8 and a wide low one at 5.
inline GaussianSqueezeSpec mgs_spec(double s_all = 0.15) {
  GaussianSqueezeSpec spec;
  spec.s.assign(10, s_all);
  spec.domains = {GaussianDomain{8.0, 0.5}, GaussianDomain{5.0, 1.0}};
  return spec;
}

inline double resource_usage(const GaussianSqueezeSpec& spec, std::span<const int> u) {
  check_actions(u, spec.n_agents, spec.action_levels);
  double x = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) x += spec.s[i] * u[i];
  return x;
}

inline double gs_value_of_usage(const GaussianSqueezeSpec& spec, double x) {
  double g = 0.0;
  for (const auto& d : spec.domains) {
    const double z = (x - d.mu) / d.sigma;
    g += x * std::exp(-z * z);
  }
  return g;
}

inline double gs_reward(const GaussianSqueezeSpec& spec, std::span<const int> u) {
  return gs_value_of_usage(spec, resource_usage(spec, u));
}

struct GsOptimum {
  int total_units = 0;  // sum of u_i at the optimum
  double usage = 0.0;
  double reward = 0.0;
};

/// Exact optimum when all s_i are equal: G depends on u only through sum(u_i),
/// so enumerating the sums 0..n*(levels-1) is exhaustive.
inline GsOptimum gs_optimum_equal_s(const GaussianSqueezeSpec& spec) {
  spec.validate();
  for (double si : spec.s)
    if (si != spec.s.front()) throw RangeError("gs_optimum_equal_s: s_i are not all equal");
  GsOptimum best{0, 0.0, -std::numeric_limits<double>::infinity()};
  const int max_total = spec.n_agents * (spec.action_levels - 1);
  for (int k = 0; k <= max_total; ++k) {
    const double x = spec.s.front() * k;
    const double g = gs_value_of_usage(spec, x);
    if (g > best.reward) best = GsOptimum{k, x, g};
  }
  return best;
}

/// Fully observable single-state game. Agent i observes [s_1..s_N, onehot(i)].
class GaussianSqueeze final : public Environment {
 public:
  explicit GaussianSqueeze(GaussianSqueezeSpec spec, std::string tag = "gs") : spec_(std::move(spec)), tag_(std::move(tag)) {
    spec_.validate();
    obs_ = JointObservation::Zero(obs_dim(), spec_.n_agents);
    for (int i = 0; i < spec_.n_agents; ++i) {
      for (int k = 0; k < spec_.n_agents; ++k) obs_(k, i) = spec_.s[static_cast<std::size_t>(k)];
      obs_(spec_.n_agents + i, i) = 1.0;
    }
  }

  int n_agents() const override { return spec_.n_agents; }
  int n_actions() const override { return spec_.action_levels; }
  int obs_dim() const override { return 2 * spec_.n_agents; }
  int episode_length() const override { return 1; }
  bool single_state() const override { return true; }
  std::string tag() const override { return tag_; }

  JointObservation reset() override { return obs_; }
  StepResult step(std::span<const int> actions) override { return StepResult{gs_reward(spec_, actions), true, obs_}; }

  const GaussianSqueezeSpec& spec() const { return spec_; }

 private:
  GaussianSqueezeSpec spec_;
  std::string tag_;
  JointObservation obs_;
};

// ---------------------------------------------------------------------------
// Modified predator-prey
// ---------------------------------------------------------------------------

enum MppAction : int { kLeft = 0, kRight = 1, kUp = 2, kDown = 3, kStop = 4 };
inline constexpr int kMppActions = 5;

struct Cell {
  int x = 0;
  int y = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

struct PredatorPreySpec {
  int grid_w = 5;
  int grid_h = 5;
  int n_predators = 2;
  int n_prey = 1;
  double penalty = 1.5;
  int episode_len = 100;
  int view = 5;

  void validate() const {
    if (grid_w < 2 || grid_h < 2) throw RangeError("predator-prey grid must be at least 2x2");
    if (n_predators < 1 || n_prey < 1) throw RangeError("predator-prey needs predators and prey");
    if (!(penalty >= 0.0)) throw RangeError("predator-prey penalty must be >= 0");
    if (episode_len < 1) throw RangeError("predator-prey episode length must be positive");
    if (view < 1 || view % 2 == 0) throw RangeError("predator-prey view must be a positive odd width");
  }
};

/// 5x5 grid, 2 predators, 1 prey.
inline PredatorPreySpec mpp_small(double penalty) { return PredatorPreySpec{5, 5, 2, 1, penalty, 100, 5}; }
/// 7x7 grid, 4 predators, 2 prey.
inline PredatorPreySpec mpp_large(double penalty) { return PredatorPreySpec{7, 7, 4, 2, penalty, 100, 5}; }

struct PredatorPreyState {
  std::vector<Cell> predators;
  std::vector<Cell> prey;
  int t = 0;
};

inline Cell move_cell(Cell c, int action, const PredatorPreySpec& spec) {
  switch (action) {
    case kLeft: c.x = std::max(0, c.x - 1); break;
    case kRight: c.x = std::min(spec.grid_w - 1, c.x + 1); break;
    case kUp: c.y = std::max(0, c.y - 1); break;
    case kDown: c.y = std::min(spec.grid_h - 1, c.y + 1); break;
    case kStop: break;
    default: throw RangeError("predator-prey action " + std::to_string(action) + " out of range");
  }
  return c;
}

/// A predator catches a prey sitting in one of its four cardinal neighbours.
inline bool catches(Cell predator, Cell prey) {
  return std::abs(predator.x - prey.x) + std::abs(predator.y - prey.y) == 1;
}

inline Cell random_cell(const PredatorPreySpec& spec, Rng& rng) {
  std::uniform_int_distribution<int> dx(0, spec.grid_w - 1), dy(0, spec.grid_h - 1);
  const int x = dx(rng);
  const int y = dy(rng);
  return Cell{x, y};
}

struct MppOutcome {
  double reward = 0.0;
  int multi_catches = 0;
  int single_catches = 0;
};

/// Moves every predator and prey, then scores each prey: +1 with two or more
/// catchers (the prey respawns), -P with exactly one catcher. Rewards add
/// over prey. Does not advance the step counter.
inline MppOutcome mpp_resolve(const PredatorPreySpec& spec, PredatorPreyState& state,
                              std::span<const int> predator_actions, std::span<const int> prey_actions, Rng& rng) {
  check_actions(predator_actions, spec.n_predators, kMppActions);
  check_actions(prey_actions, spec.n_prey, kMppActions);
  for (std::size_t i = 0; i < state.predators.size(); ++i)
    state.predators[i] = move_cell(state.predators[i], predator_actions[i], spec);
  for (std::size_t k = 0; k < state.prey.size(); ++k) state.prey[k] = move_cell(state.prey[k], prey_actions[k], spec);

  MppOutcome out;
  for (auto& prey : state.prey) {
    int catchers = 0;
    for (const auto& p : state.predators) catchers += catches(p, prey) ? 1 : 0;
    if (catchers >= 2) {
      out.reward += 1.0;
      ++out.multi_catches;
      prey = random_cell(spec, rng);
    } else if (catchers == 1) {
      out.reward -= spec.penalty;
      ++out.single_catches;
    }
  }
  return out;
}

/// Per agent: [x/(w-1), y/(h-1), onehot(id) (N), then per prey (dx, dy, visible)].
/// dx, dy are raw cell offsets (y grows downward) and are zero when the prey is
/// outside the view window centred on the agent.
inline JointObservation mpp_observe(const PredatorPreySpec& spec, const PredatorPreyState& state) {
  const int n = spec.n_predators;
  const int dim = 2 + n + 3 * spec.n_prey;
  const int radius = spec.view / 2;
  JointObservation obs = JointObservation::Zero(dim, n);
  for (int i = 0; i < n; ++i) {
    const Cell me = state.predators[static_cast<std::size_t>(i)];
    obs(0, i) = static_cast<double>(me.x) / (spec.grid_w - 1);
    obs(1, i) = static_cast<double>(me.y) / (spec.grid_h - 1);
    obs(2 + i, i) = 1.0;
    for (int k = 0; k < spec.n_prey; ++k) {
      const Cell prey = state.prey[static_cast<std::size_t>(k)];
      const int dx = prey.x - me.x, dy = prey.y - me.y;
      if (std::abs(dx) <= radius && std::abs(dy) <= radius) {
        const int base = 2 + n + 3 * k;
        obs(base, i) = dx;
        obs(base + 1, i) = dy;
        obs(base + 2, i) = 1.0;
      }
    }
  }
  return obs;
}

class PredatorPrey final : public Environment {
 public:
  PredatorPrey(PredatorPreySpec spec, std::uint64_t seed) : spec_(spec), rng_(seed) {
    spec_.validate();
    reset();
  }

  int n_agents() const override { return spec_.n_predators; }
  int n_actions() const override { return kMppActions; }
  int obs_dim() const override { return 2 + spec_.n_predators + 3 * spec_.n_prey; }
  int episode_length() const override { return spec_.episode_len; }
  bool single_state() const override { return false; }
  std::string tag() const override {
    std::ostringstream os;
    os << "mpp-n" << spec_.n_predators << "-p" << spec_.penalty;
    return os.str();
  }

  JointObservation reset() override {
    state_.t = 0;
    state_.predators.assign(static_cast<std::size_t>(spec_.n_predators), Cell{});
    state_.prey.assign(static_cast<std::size_t>(spec_.n_prey), Cell{});
    for (auto& c : state_.predators) c = random_cell(spec_, rng_);
    for (auto& c : state_.prey) c = random_cell(spec_, rng_);
    return mpp_observe(spec_, state_);
  }

  StepResult step(std::span<const int> actions) override {
    check_actions(actions, spec_.n_predators, kMppActions);
    if (state_.t >= spec_.episode_len) throw Error("predator-prey: step after episode end");
    std::vector<int> prey_actions(static_cast<std::size_t>(spec_.n_prey));
    std::uniform_int_distribution<int> pick(0, kMppActions - 1);
    for (auto& a : prey_actions) a = pick(rng_);
    const MppOutcome out = mpp_resolve(spec_, state_, actions, prey_actions, rng_);
    ++state_.t;
    return StepResult{out.reward, state_.t >= spec_.episode_len, mpp_observe(spec_, state_)};
  }

  const PredatorPreySpec& spec() const { return spec_; }
  const PredatorPreyState& state() const { return state_; }
  void set_state(PredatorPreyState s) { state_ = std::move(s); }

  /// ASCII grid: P predator, o prey, * both.
  std::string render() const {
    std::string out;
    for (int y = 0; y < spec_.grid_h; ++y) {
      for (int x = 0; x < spec_.grid_w; ++x) {
        const Cell c{x, y};
        const bool pred = std::find(state_.predators.begin(), state_.predators.end(), c) != state_.predators.end();
        const bool prey = std::find(state_.prey.begin(), state_.prey.end(), c) != state_.prey.end();
        out += pred && prey ? '*' : pred ? 'P' : prey ? 'o' : '.';
      }
      out += '\n';
    }
    return out;
  }

 private:
  PredatorPreySpec spec_;
  Rng rng_;
  PredatorPreyState state_;
};

}  // namespace envs
}  // namespace qfactor
