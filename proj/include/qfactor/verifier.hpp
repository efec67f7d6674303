#pragma once

// Exhaustive oracles and factorization-condition checkers over enumerable
// joint action spaces, plus extraction of tables from learned assemblies.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "qfactor/agents.hpp"
#include "qfactor/envs.hpp"

namespace qfactor::verify {

inline constexpr std::size_t kMaxJointEntries = 10'000'000;
inline constexpr double kTabularTol = 1e-9;
inline constexpr double kLearnedTol = 0.1;

/// Mixed-radix indexing over per-agent action counts; agent 0 most significant.
class JointSpace {
 public:
  JointSpace() = default;
  explicit JointSpace(std::vector<int> dims) : dims_(std::move(dims)) {
    if (dims_.empty()) throw DimensionError("joint space needs at least one agent");
    std::size_t n = 1;
    for (int d : dims_) {
      if (d <= 0) throw DimensionError("action counts must be positive");
      if (n > kMaxJointEntries / static_cast<std::size_t>(d))
        throw RangeError("joint action space exceeds " + std::to_string(kMaxJointEntries) + " entries");
      n *= static_cast<std::size_t>(d);
    }
    size_ = n;
  }

  const std::vector<int>& dims() const { return dims_; }
  int n_agents() const { return static_cast<int>(dims_.size()); }
  std::size_t size() const { return size_; }

  std::size_t index(std::span<const int> u) const {
    if (u.size() != dims_.size()) throw DimensionError("joint action has wrong length");
    std::size_t k = 0;
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (u[i] < 0 || u[i] >= dims_[i]) throw RangeError("action index out of range");
      k = k * static_cast<std::size_t>(dims_[i]) + static_cast<std::size_t>(u[i]);
    }
    return k;
  }

  std::vector<int> decode(std::size_t k) const {
    std::vector<int> u(dims_.size());
    for (std::size_t i = dims_.size(); i-- > 0;) {
      u[i] = static_cast<int>(k % static_cast<std::size_t>(dims_[i]));
      k /= static_cast<std::size_t>(dims_[i]);
    }
    return u;
  }

 private:
  std::vector<int> dims_;
  std::size_t size_ = 0;
};

/// Per-agent Q_i vectors, the full Q_jt table and an optional V_jt.
struct TabularQ {
  std::vector<Vector> q;
  std::vector<double> qjt;  // row-major over joint actions, agent 0 most significant
  std::optional<double> vjt;

  JointSpace space() const {
    std::vector<int> dims;
    for (const auto& v : q) dims.push_back(static_cast<int>(v.size()));
    return JointSpace(dims);
  }

  void validate() const {
    const auto s = space();
    if (qjt.size() != s.size())
      throw DimensionError("Q_jt table has " + std::to_string(qjt.size()) + " entries, expected " + std::to_string(s.size()));
  }

  double qprime(std::span<const int> u) const {
    double total = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) total += q[i](u[i]);
    return total;
  }
};

inline TabularQ tabular_from(const std::vector<Vector>& q, const envs::PayoffTable& p) {
  TabularQ t;
  t.q = q;
  t.qjt = p.rewards();
  t.validate();
  return t;
}

/// Tables whose residual Q'_jt - Q_jt + V_jt equals `residuals` exactly.
inline TabularQ tabular_from_residuals(const std::vector<Vector>& q, const std::vector<double>& residuals, double v = 0.0) {
  TabularQ t;
  t.q = q;
  t.vjt = v;
  const auto s = t.space();
  if (residuals.size() != s.size()) throw DimensionError("residual table size mismatch");
  t.qjt.resize(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) t.qjt[k] = t.qprime(s.decode(k)) + v - residuals[k];
  return t;
}

struct OracleResult {
  std::vector<std::vector<int>> maximizers;
  double value = -std::numeric_limits<double>::infinity();

  bool contains(std::span<const int> u) const {
    return std::any_of(maximizers.begin(), maximizers.end(),
                       [&](const std::vector<int>& m) { return std::equal(m.begin(), m.end(), u.begin(), u.end()); });
  }
};

inline OracleResult oracle_optimal(const JointSpace& space, const std::vector<double>& values) {
  if (values.size() != space.size()) throw DimensionError("value table does not match joint space");
  OracleResult r;
  for (double v : values) r.value = std::max(r.value, v);
  for (std::size_t k = 0; k < values.size(); ++k)
    if (values[k] == r.value) r.maximizers.push_back(space.decode(k));
  return r;
}

inline OracleResult oracle_optimal(const envs::PayoffTable& p) {
  return oracle_optimal(JointSpace(std::vector<int>(static_cast<std::size_t>(p.n_agents()), p.actions())), p.rewards());
}

inline OracleResult oracle_optimal(const TabularQ& t) {
  t.validate();
  return oracle_optimal(t.space(), t.qjt);
}

inline std::vector<int> greedy(const TabularQ& t) {
  std::vector<int> u;
  for (const auto& v : t.q) u.push_back(argmax(v));
  return u;
}

inline bool check_igm(const TabularQ& t) { return oracle_optimal(t).contains(greedy(t)); }

/// How V_jt is obtained when checking the conditions.
enum class VMode {
  provided_or_zero,  // the table's V_jt if present, else 0 (fully observable case)
  zero,
  definition,        // max_u Q_jt - sum_i Q_i(u_bar_i)
};

inline double resolve_v(const TabularQ& t, VMode mode) {
  switch (mode) {
    case VMode::provided_or_zero: return t.vjt.value_or(0.0);
    case VMode::zero: return 0.0;
    case VMode::definition: return oracle_optimal(t).value - t.qprime(greedy(t));
  }
  return 0.0;
}

struct TheoremReport {
  std::string condition;
  double tol = 0.0;
  std::vector<int> dims;
  std::vector<int> greedy;
  double vjt = 0.0;
  std::vector<double> residuals;  // Q'_jt - Q_jt + V_jt per joint action
  double opt_residual = 0.0;
  double min_violation = 0.0;     // smallest residual over u != u_bar
  // column_minima[i][k]: min over u_i of the residual, with u_-i the k-th
  // assignment of the other agents (lexicographic, agent order preserved).
  std::vector<std::vector<double>> column_minima;
  bool igm_holds = false;
  OracleResult oracle;
  bool satisfied = false;
};

namespace detail {

inline std::vector<int> others_dims(const std::vector<int>& dims, int agent) {
  std::vector<int> d;
  for (int j = 0; j < static_cast<int>(dims.size()); ++j)
    if (j != agent) d.push_back(dims[static_cast<std::size_t>(j)]);
  return d;
}

inline std::vector<int> insert_action(const std::vector<int>& others, int agent, int action) {
  std::vector<int> u(others);
  u.insert(u.begin() + agent, action);
  return u;
}

inline std::vector<std::vector<double>> column_minima(const JointSpace& s, const std::vector<double>& r) {
  std::vector<std::vector<double>> out;
  for (int i = 0; i < s.n_agents(); ++i) {
    const auto od = others_dims(s.dims(), i);
    const JointSpace others = od.empty() ? JointSpace({1}) : JointSpace(od);
    std::vector<double> mins(others.size(), std::numeric_limits<double>::infinity());
    for (std::size_t k = 0; k < others.size(); ++k) {
      const auto rest = od.empty() ? std::vector<int>{} : others.decode(k);
      for (int a = 0; a < s.dims()[static_cast<std::size_t>(i)]; ++a)
        mins[k] = std::min(mins[k], r[s.index(insert_action(rest, i, a))]);
    }
    out.push_back(std::move(mins));
  }
  return out;
}

inline TheoremReport base_report(const TabularQ& t, double tol, VMode mode) {
  t.validate();
  TheoremReport rep;
  rep.tol = tol;
  const auto s = t.space();
  rep.dims = s.dims();
  rep.greedy = greedy(t);
  rep.vjt = resolve_v(t, mode);
  rep.residuals.resize(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) rep.residuals[k] = t.qprime(s.decode(k)) - t.qjt[k] + rep.vjt;
  const std::size_t opt = s.index(rep.greedy);
  rep.opt_residual = rep.residuals[opt];
  rep.min_violation = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < s.size(); ++k)
    if (k != opt) rep.min_violation = std::min(rep.min_violation, rep.residuals[k]);
  if (s.size() == 1) rep.min_violation = 0.0;
  rep.column_minima = column_minima(s, rep.residuals);
  rep.oracle = oracle_optimal(t);
  rep.igm_holds = rep.oracle.contains(rep.greedy);
  return rep;
}

}  // namespace detail

/// Conditions (4a)/(4b): zero residual at the greedy joint action and
/// nonnegative residuals elsewhere, both within tol.
inline TheoremReport check_theorem1(const TabularQ& t, double tol = kTabularTol, VMode mode = VMode::provided_or_zero) {
  auto rep = detail::base_report(t, tol, mode);
  rep.condition = "theorem1";
  rep.satisfied = std::abs(rep.opt_residual) <= tol && rep.min_violation >= -tol;
  return rep;
}

/// Condition (4a) plus the min-condition: for every agent i and every u_-i
/// the minimum over u_i of the residual is within tol of zero.
inline TheoremReport check_theorem2(const TabularQ& t, double tol = kTabularTol, VMode mode = VMode::provided_or_zero) {
  auto rep = detail::base_report(t, tol, mode);
  rep.condition = "theorem2";
  bool ok = std::abs(rep.opt_residual) <= tol;
  for (const auto& col : rep.column_minima)
    for (double m : col) ok = ok && std::abs(m) <= tol;
  rep.satisfied = ok;
  return rep;
}

struct Replacement {
  int agent = 0;   // whose Q entry is lowered
  int action = 0;
  double beta = 0.0;
};

struct ConstructResult {
  TabularQ q;
  std::vector<Replacement> steps;
};

/// Lowers individual Q entries until the min-condition holds, following the
/// constructive argument: a condition for agent i at u_-i != u_bar_-i with
/// positive column minimum is repaired by lowering Q_j(u_j) for the lowest
/// j != i with u_j != u_bar_j. The decrement is the smallest residual over all
/// joint actions sharing that u_j, so no residual turns negative.
///
/// Conditions are visited grouped by the lowered agent j (index order), then
/// by repaired agent i (index order), then u_-i lexicographically. Passes
/// repeat until nothing changes; more than (max action count)^2 passes is an
/// error, and so is stalling short of the min-condition. With two agents the
/// column of i at u_j is exactly the slice of j, so every repair succeeds.
/// With three or more agents a slice is wider than the column and some tables
/// admit no repaired Q at all (see the tests for a 3-agent example).
inline ConstructResult construct_qprime(const TabularQ& input, double tol = kTabularTol, VMode mode = VMode::provided_or_zero) {
  ConstructResult out{input, {}};
  TabularQ& t = out.q;
  t.validate();
  const auto s = t.space();
  const int n = s.n_agents();
  const auto ubar = greedy(t);
  const double v = resolve_v(t, mode);
  if (!check_theorem1(t, tol, mode).satisfied)
    throw RangeError("construct_qprime: input does not satisfy the Theorem 1 conditions");

  auto residual = [&](std::span<const int> u) { return t.qprime(u) - t.qjt[s.index(u)] + v; };
  auto slice_min = [&](int j, int a) {
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < s.size(); ++k) {
      const auto u = s.decode(k);
      if (u[static_cast<std::size_t>(j)] == a) m = std::min(m, residual(u));
    }
    return m;
  };

  int max_dim = 1;
  for (int d : s.dims()) max_dim = std::max(max_dim, d);
  const int max_passes = max_dim * max_dim;

  for (int pass = 0;; ++pass) {
    bool changed = false;
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < n; ++i) {
        if (i == j) continue;
        const auto od = detail::others_dims(s.dims(), i);
        const JointSpace others(od);
        for (std::size_t k = 0; k < others.size(); ++k) {
          const auto rest = others.decode(k);
          const auto probe = detail::insert_action(rest, i, 0);
          int lowered = -1;
          for (int m = 0; m < n; ++m)
            if (m != i && probe[static_cast<std::size_t>(m)] != ubar[static_cast<std::size_t>(m)]) {
              lowered = m;
              break;
            }
          if (lowered != j) continue;
          double col_min = std::numeric_limits<double>::infinity();
          for (int a = 0; a < s.dims()[static_cast<std::size_t>(i)]; ++a) col_min = std::min(col_min, residual(detail::insert_action(rest, i, a)));
          if (col_min <= tol) continue;
          const int uj = probe[static_cast<std::size_t>(j)];
          const double beta = std::min(col_min, slice_min(j, uj));
          if (beta <= 0.0) continue;
          t.q[static_cast<std::size_t>(j)](uj) -= beta;
          out.steps.push_back(Replacement{j, uj, beta});
          changed = true;
        }
      }
    }
    if (!changed) break;
    if (pass + 1 >= max_passes) throw RangeError("construct_qprime: no convergence within " + std::to_string(max_passes) + " passes");
  }
  if (greedy(t) != ubar) throw Error("construct_qprime: greedy joint action changed");
  if (!check_theorem2(t, tol, mode).satisfied)
    throw RangeError("construct_qprime: stalled after " + std::to_string(out.steps.size()) +
                     " replacements without reaching the min-condition");
  return out;
}

/// True iff every agent's greedy action survives Q_i <- a Q_i + b.
inline bool affine_invariance_probe(const TabularQ& t, double a, double b) {
  if (!(a > 0.0)) throw RangeError("affine_invariance_probe: scale must be positive");
  TabularQ mapped = t;
  for (auto& v : mapped.q) v = (a * v.array() + b).matrix();
  return greedy(mapped) == greedy(t);
}

// ---------------------------------------------------------------------------
// Learned assemblies
// ---------------------------------------------------------------------------

/// Tabular view of a learned assembly at one joint observation: Q_i from the
/// individual networks, Q_jt over every joint action, and V_jt when the
/// assembly has a state-value network.
inline TabularQ extract_tabular(const Assembly& a, const JointObservation& obs) {
  TabularQ t;
  for (const auto& o : individual_q(a, obs)) t.q.push_back(o.q);
  const auto s = t.space();
  t.qjt.resize(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) t.qjt[k] = joint_value(a, obs, s.decode(k));
  t.vjt = state_value(a, obs);
  return t;
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

inline std::string joint_label(std::span<const int> u, bool letters) {
  std::string s = "(";
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (i) s += ", ";
    s += letters && u[i] < 26 ? std::string(1, static_cast<char>('A' + u[i])) : std::to_string(u[i]);
  }
  return s + ")";
}

inline void print_report(std::ostream& os, const TheoremReport& r) {
  const JointSpace s(r.dims);
  bool letters = true;
  for (int d : r.dims) letters = letters && d <= 26;
  os << std::fixed << std::setprecision(4);
  os << "condition      " << r.condition << "  (tol " << r.tol << ")\n";
  os << "verdict        " << (r.satisfied ? "satisfied" : "violated") << "\n";
  os << "greedy         " << joint_label(r.greedy, letters) << "\n";
  os << "oracle value   " << r.oracle.value << "\n";
  os << "oracle optimal";
  for (const auto& m : r.oracle.maximizers) os << " " << joint_label(m, letters);
  os << "\n";
  os << "igm            " << (r.igm_holds ? "holds" : "fails") << "\n";
  os << "V_jt           " << r.vjt << "\n";
  os << "opt residual   " << r.opt_residual << "\n";
  os << "min residual   " << r.min_violation << "\n";
  if (r.dims.size() == 2 && s.size() <= 400) {
    os << "residuals (rows u_1, columns u_2)\n";
    for (int a = 0; a < r.dims[0]; ++a) {
      os << "  ";
      for (int b = 0; b < r.dims[1]; ++b) os << std::setw(10) << r.residuals[static_cast<std::size_t>(a * r.dims[1] + b)];
      os << "\n";
    }
  }
  for (std::size_t i = 0; i < r.column_minima.size(); ++i) {
    double worst = 0.0;
    for (double m : r.column_minima[i]) worst = std::max(worst, std::abs(m));
    os << "agent " << i << " max |column min| " << worst << "\n";
  }
  os.unsetf(std::ios::floatfield);
}

/// key = value form of a report.
inline void write_report(std::ostream& os, const TheoremReport& r) {
  os << std::setprecision(17);
  auto list = [&](const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
    return s;
  };
  os << "condition = " << r.condition << "\n";
  os << "tol = " << r.tol << "\n";
  os << "satisfied = " << (r.satisfied ? "true" : "false") << "\n";
  os << "dims = " << list(r.dims) << "\n";
  os << "greedy = " << list(r.greedy) << "\n";
  os << "igm_holds = " << (r.igm_holds ? "true" : "false") << "\n";
  os << "oracle_value = " << r.oracle.value << "\n";
  os << "oracle_count = " << r.oracle.maximizers.size() << "\n";
  for (std::size_t k = 0; k < r.oracle.maximizers.size(); ++k) os << "oracle." << k << " = " << list(r.oracle.maximizers[k]) << "\n";
  os << "vjt = " << r.vjt << "\n";
  os << "opt_residual = " << r.opt_residual << "\n";
  os << "min_violation = " << r.min_violation << "\n";
  os << "residuals =";
  for (double x : r.residuals) os << " " << x;
  os << "\n";
  for (std::size_t i = 0; i < r.column_minima.size(); ++i) {
    os << "column_minima." << i << " =";
    for (double x : r.column_minima[i]) os << " " << x;
    os << "\n";
  }
}

}  // namespace qfactor::verify
