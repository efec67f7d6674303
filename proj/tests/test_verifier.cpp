#include <gtest/gtest.h>

#include <sstream>

#include "qfactor/verifier.hpp"

using namespace qfactor;
using namespace qfactor::verify;

namespace {

enum { A = 0, B = 1, C = 2 };

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index k = 0;
  for (double x : v) out(k++) = x;
  return out;
}

// Learned tables from the trained matrix game.
std::vector<Vector> qtran_q() { return {vec({3.84, -2.06, -2.25}), vec({4.16, 2.29, 2.29})}; }
std::vector<double> qtran_qjt() { return {8.00, -12.02, -12.02, -12.00, 0.00, 0.00, -12.00, 0.00, -0.01}; }
std::vector<double> learned_residuals() { return {0.00, 18.14, 18.14, 14.11, 0.23, 0.23, 13.93, 0.05, 0.05}; }

// Nested-loop maximization written independently of JointSpace.
std::pair<double, std::vector<std::vector<int>>> naive_max(const std::vector<int>& dims, const std::vector<double>& v) {
  double best = -std::numeric_limits<double>::infinity();
  std::vector<std::vector<int>> arg;
  std::vector<int> u(dims.size(), 0);
  for (std::size_t flat = 0; flat < v.size(); ++flat) {
    if (v[flat] > best) {
      best = v[flat];
      arg = {u};
    } else if (v[flat] == best) {
      arg.push_back(u);
    }
    for (std::size_t i = dims.size(); i-- > 0;) {
      if (++u[i] < dims[i]) break;
      u[i] = 0;
    }
  }
  return {best, arg};
}

std::vector<int> random_dims(Rng& rng, int max_agents, int max_actions) {
  std::uniform_int_distribution<int> na(1, max_agents), nu(2, max_actions);
  std::vector<int> d(static_cast<std::size_t>(na(rng)));
  for (auto& x : d) x = nu(rng);
  return d;
}

std::vector<Vector> random_q(Rng& rng, const std::vector<int>& dims) {
  std::normal_distribution<double> g(0.0, 3.0);
  std::vector<Vector> q;
  for (int d : dims) {
    Vector v(d);
    for (int k = 0; k < d; ++k) v(k) = g(rng);
    q.push_back(v);
  }
  return q;
}

// A table satisfying the Theorem 1 conditions: zero residual at the greedy
// action, nonnegative elsewhere (some exact zeros planted).
TabularQ planted(Rng& rng, int max_agents = 3, int max_actions = 4) {
  auto dims = random_dims(rng, max_agents, max_actions);
  if (dims.size() < 2) dims.push_back(2);
  const auto q = random_q(rng, dims);
  const JointSpace s(dims);
  std::vector<int> ubar;
  for (const auto& v : q) ubar.push_back(argmax(v));
  std::exponential_distribution<double> e(0.5);
  std::bernoulli_distribution zero(0.2);
  std::vector<double> r(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) r[k] = zero(rng) ? 0.0 : e(rng);
  r[s.index(ubar)] = 0.0;
  std::uniform_real_distribution<double> v(-2.0, 2.0);
  return tabular_from_residuals(q, r, v(rng));
}

// A table satisfying the min-condition directly: every column of every agent
// gets a zero residual at a random position.
TabularQ planted_min(Rng& rng, int max_agents = 4, int max_actions = 4) {
  const auto base = planted(rng, max_agents, max_actions);
  const auto s = base.space();
  const auto rep = check_theorem1(base);
  auto r = rep.residuals;
  for (int i = 0; i < s.n_agents(); ++i) {
    std::uniform_int_distribution<int> pick(0, s.dims()[static_cast<std::size_t>(i)] - 1);
    for (std::size_t k = 0; k < s.size(); ++k) {
      auto u = s.decode(k);
      if (u[static_cast<std::size_t>(i)] != 0) continue;  // one visit per column
      u[static_cast<std::size_t>(i)] = pick(rng);
      r[s.index(u)] = 0.0;
    }
  }
  return tabular_from_residuals(base.q, r, *base.vjt);
}

TabularQ random_table(Rng& rng) {
  const auto dims = random_dims(rng, 3, 4);
  TabularQ t;
  t.q = random_q(rng, dims);
  std::normal_distribution<double> g(0.0, 3.0);
  t.qjt.resize(JointSpace(dims).size());
  for (auto& x : t.qjt) x = g(rng);
  return t;
}

}  // namespace

TEST(Oracle, MatrixGameOptimum) {
  const auto r = oracle_optimal(envs::penalty_payoff());
  EXPECT_EQ(r.value, 8.0);
  ASSERT_EQ(r.maximizers.size(), 1u);
  EXPECT_EQ(r.maximizers[0], (std::vector<int>{A, A}));
}

TEST(Oracle, ConstantTableReturnsEverything) {
  const auto r = oracle_optimal(envs::PayoffTable(2, 3, std::vector<double>(9, 2.5)));
  EXPECT_EQ(r.value, 2.5);
  EXPECT_EQ(r.maximizers.size(), 9u);
}

TEST(Oracle, WideGameOptimum) {
  const auto r = oracle_optimal(envs::wide_matrix_payoff());
  EXPECT_DOUBLE_EQ(r.value, 10.0);
  ASSERT_EQ(r.maximizers.size(), 1u);
  EXPECT_EQ(r.maximizers[0], (std::vector<int>{5, 15}));
}

TEST(Oracle, OversizedSpaceRejected) {
  EXPECT_THROW(JointSpace(std::vector<int>(8, 10)), RangeError);
  EXPECT_NO_THROW(JointSpace(std::vector<int>(7, 10)));
}

TEST(Oracle, AgreesWithNestedLoops) {
  Rng rng(17);
  std::uniform_int_distribution<int> small(0, 2);
  for (int trial = 0; trial < 300; ++trial) {
    const auto dims = random_dims(rng, 4, 10);
    const JointSpace s(dims);
    std::vector<double> v(s.size());
    // integer values so ties happen
    for (auto& x : v) x = small(rng);
    const auto [best, arg] = naive_max(dims, v);
    const auto r = oracle_optimal(s, v);
    EXPECT_EQ(r.value, best);
    EXPECT_EQ(r.maximizers, arg);
  }
}

TEST(Igm, LearnedQtranTableHolds) {
  EXPECT_TRUE(check_igm(tabular_from(qtran_q(), envs::PayoffTable(2, 3, qtran_qjt()))));
}

TEST(Igm, VdnFactorsAgainstPayoffFail) {
  const std::vector<Vector> q{vec({-2.29, -1.22, -0.73}), vec({-3.14, -2.29, -2.41})};
  const auto t = tabular_from(q, envs::penalty_payoff());
  EXPECT_EQ(greedy(t), (std::vector<int>{C, B}));
  EXPECT_FALSE(check_igm(t));
}

TEST(Igm, SingleAgentAlwaysHolds) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    TabularQ t;
    t.q = random_q(rng, {5});
    t.qjt.assign(t.q[0].data(), t.q[0].data() + 5);
    EXPECT_TRUE(check_igm(t));
  }
}

TEST(Theorem1, LearnedResidualsSatisfied) {
  const auto t = tabular_from_residuals(qtran_q(), learned_residuals());
  const auto rep = check_theorem1(t);
  EXPECT_TRUE(rep.satisfied);
  EXPECT_TRUE(rep.igm_holds);
  EXPECT_NEAR(rep.opt_residual, 0.0, 1e-12);
  EXPECT_NEAR(rep.min_violation, 0.05, 1e-12);
}

TEST(Theorem1, AllZeroTable) {
  TabularQ t{{Vector::Zero(3), Vector::Zero(3)}, std::vector<double>(9, 0.0), 0.0};
  const auto rep = check_theorem1(t);
  EXPECT_TRUE(rep.satisfied);
  for (double r : rep.residuals) EXPECT_EQ(r, 0.0);
}

TEST(Theorem1, ValueByDefinition) {
  // without a stored V the definition max Q_jt - sum Q_i(u_bar) applies
  const auto t = tabular_from(qtran_q(), envs::PayoffTable(2, 3, qtran_qjt()));
  EXPECT_NEAR(resolve_v(t, VMode::definition), 8.0 - 3.84 - 4.16, 1e-12);
  EXPECT_EQ(resolve_v(t, VMode::zero), 0.0);
}

TEST(Theorem1, NegativeResidualViolates) {
  auto r = learned_residuals();
  r[4] = -0.5;
  EXPECT_FALSE(check_theorem1(tabular_from_residuals(qtran_q(), r)).satisfied);
  r = learned_residuals();
  r[0] = 0.3;
  EXPECT_FALSE(check_theorem1(tabular_from_residuals(qtran_q(), r)).satisfied);
}

TEST(Theorem1, SoundnessSweep) {
  Rng rng(99);
  int passed = 0;
  int attempts = 0;
  while (passed < 200) {
    ++attempts;
    // mix planted and unstructured tables; only passing ones count
    const auto t = attempts % 3 == 0 ? random_table(rng) : planted(rng);
    if (!check_theorem1(t).satisfied) continue;
    ++passed;
    EXPECT_TRUE(oracle_optimal(t).contains(greedy(t)));
  }
}

TEST(Theorem2, TwiceReplacedTableSatisfied) {
  const std::vector<double> r{0, 18.14, 18.14, 13.88, 0, 0, 13.88, 0, 0};
  const std::vector<Vector> q{vec({3.84, -2.29, -2.30}), vec({4.16, 2.29, 2.29})};
  EXPECT_TRUE(check_theorem2(tabular_from_residuals(q, r)).satisfied);
}

TEST(Theorem2, OriginalTableViolated) {
  const auto rep = check_theorem2(tabular_from_residuals(qtran_q(), learned_residuals()));
  EXPECT_FALSE(rep.satisfied);
  // agent 2's column for u_1 = B has minimum 0.23
  EXPECT_NEAR(rep.column_minima[1][B], 0.23, 1e-12);
}

TEST(Theorem2, ImpliesTheorem1) {
  Rng rng(5);
  for (int k = 0; k < 200; ++k) {
    const auto t = planted_min(rng);
    ASSERT_TRUE(check_theorem2(t).satisfied);
    EXPECT_TRUE(check_theorem1(t).satisfied);
  }
  for (int k = 0; k < 100; ++k) {
    const auto t = construct_qprime(planted(rng, 2, 6)).q;
    ASSERT_TRUE(check_theorem2(t).satisfied);
    EXPECT_TRUE(check_theorem1(t).satisfied);
  }
  for (int k = 0; k < 500; ++k) {
    const auto t = random_table(rng);
    if (check_theorem2(t).satisfied) EXPECT_TRUE(check_theorem1(t).satisfied);
  }
}

TEST(Construct, ExactLearnedTables) {
  const auto t = tabular_from(qtran_q(), envs::PayoffTable(2, 3, qtran_qjt()));
  const auto out = construct_qprime(t);
  ASSERT_EQ(out.steps.size(), 2u);
  EXPECT_EQ(out.steps[0].agent, 0);
  EXPECT_EQ(out.steps[0].action, B);
  EXPECT_NEAR(out.steps[0].beta, 0.23, 1e-9);
  EXPECT_EQ(out.steps[1].action, C);
  // Q_1(C) + Q_2(B) - Q_jt(C, B) = -2.25 + 2.29 - 0 exactly
  EXPECT_NEAR(out.steps[1].beta, 0.04, 1e-9);
  EXPECT_NEAR(out.q.q[0](C), -2.29, 1e-9);
  EXPECT_TRUE(check_theorem2(out.q).satisfied);
}

TEST(Construct, ResidualTableTrajectory) {
  const auto out = construct_qprime(tabular_from_residuals(qtran_q(), learned_residuals()));
  ASSERT_EQ(out.steps.size(), 2u);
  EXPECT_NEAR(out.steps[0].beta, 0.23, 1e-9);
  EXPECT_NEAR(out.steps[1].beta, 0.05, 1e-9);
  EXPECT_NEAR(out.q.q[0](A), 3.84, 1e-9);
  EXPECT_NEAR(out.q.q[0](B), -2.29, 1e-9);
  EXPECT_NEAR(out.q.q[0](C), -2.30, 1e-9);
  EXPECT_EQ(out.q.q[1], qtran_q()[1]);
  const auto rep = check_theorem2(out.q);
  EXPECT_TRUE(rep.satisfied);
  EXPECT_NEAR(rep.residuals[3], 13.88, 1e-9);
  EXPECT_NEAR(rep.residuals[6], 13.88, 1e-9);
}

TEST(Construct, AlreadySatisfyingIsUnchanged) {
  const std::vector<double> r{0, 18.14, 18.14, 13.88, 0, 0, 13.88, 0, 0};
  const std::vector<Vector> q{vec({3.84, -2.29, -2.30}), vec({4.16, 2.29, 2.29})};
  const auto t = tabular_from_residuals(q, r);
  const auto out = construct_qprime(t);
  EXPECT_TRUE(out.steps.empty());
  EXPECT_EQ(out.q.q, t.q);
}

TEST(Construct, RejectsTablesFailingTheorem1) {
  auto r = learned_residuals();
  r[4] = -1.0;
  EXPECT_THROW(construct_qprime(tabular_from_residuals(qtran_q(), r)), RangeError);
}

TEST(Construct, PlantedTwoAgentInstances) {
  Rng rng(123);
  for (int trial = 0; trial < 100; ++trial) {
    const auto t = planted(rng, 2, 6);
    const auto out = construct_qprime(t);
    EXPECT_TRUE(check_theorem2(out.q).satisfied);
    EXPECT_EQ(greedy(out.q), greedy(t));
    for (std::size_t i = 0; i < t.q.size(); ++i)
      for (Eigen::Index a = 0; a < t.q[i].size(); ++a) EXPECT_LE(out.q.q[i](a), t.q[i](a));
  }
}

TEST(Construct, ThreeAgentTableWithNoRepair) {
  // Every residual off the optimum is 10. The pairwise columns force
  // d_i + d_j = -10 for the three gaps d_i = Q'_i(1) - Q'_i(0), so d = -5 and
  // the residual at (1, 1, 1) would be -5: no valid Q' exists.
  const std::vector<Vector> q{vec({0.0, -1.0}), vec({0.0, -1.0}), vec({0.0, -1.0})};
  std::vector<double> r(8, 10.0);
  r[0] = 0.0;
  const auto t = tabular_from_residuals(q, r);
  ASSERT_TRUE(check_theorem1(t).satisfied);
  EXPECT_FALSE(check_theorem2(t).satisfied);
  EXPECT_THROW(construct_qprime(t), RangeError);

  // exhaustive check over a grid of gaps confirms infeasibility
  bool any = false;
  for (int a = 1; a <= 40 && !any; ++a)
    for (int b = 1; b <= 40 && !any; ++b)
      for (int c = 1; c <= 40 && !any; ++c) {
        auto m = t;
        m.q[0](1) = -0.5 * a;
        m.q[1](1) = -0.5 * b;
        m.q[2](1) = -0.5 * c;
        // keep Q_jt fixed: residuals move with the gaps
        any = check_theorem2(m, 1e-9, VMode::zero).satisfied;
      }
  EXPECT_FALSE(any);
}

TEST(Affine, Examples) {
  const auto t = tabular_from(qtran_q(), envs::PayoffTable(2, 3, qtran_qjt()));
  EXPECT_TRUE(affine_invariance_probe(t, 1.0, 0.0));
  EXPECT_TRUE(affine_invariance_probe(t, 2.5, -7.0));
  EXPECT_THROW(affine_invariance_probe(t, 0.0, 1.0), RangeError);
  EXPECT_THROW(affine_invariance_probe(t, -1.0, 1.0), RangeError);
}

TEST(Affine, RandomSweep) {
  Rng rng(31);
  std::uniform_real_distribution<double> a(0.01, 10.0), b(-10.0, 10.0);
  int ok = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    TabularQ t;
    t.q = random_q(rng, random_dims(rng, 4, 6));
    t.qjt.assign(t.space().size(), 0.0);
    ok += affine_invariance_probe(t, a(rng), b(rng));
  }
  EXPECT_EQ(ok, 1000);
}

TEST(Extract, LearnedAssemblyMatchesJointValues) {
  Rng rng(2);
  const auto a = Assembly::make(Algo::qtran_base, AssemblyShape{2, 3, 1}, NetConfig{}, rng);
  const JointObservation obs = JointObservation::Ones(1, 2);
  const auto t = extract_tabular(a, obs);
  ASSERT_EQ(t.qjt.size(), 9u);
  ASSERT_TRUE(t.vjt.has_value());
  EXPECT_EQ(*t.vjt, *state_value(a, obs));
  const std::vector<int> u{C, A};
  EXPECT_EQ(t.qjt[6], joint_value(a, obs, u));
  EXPECT_EQ(greedy(t), greedy_joint(a, obs));

  const auto v = Assembly::make(Algo::vdn, AssemblyShape{2, 3, 1}, NetConfig{}, rng);
  const auto tv = extract_tabular(v, obs);
  EXPECT_FALSE(tv.vjt.has_value());
  // additive tables trivially satisfy the conditions with V = 0
  EXPECT_TRUE(check_theorem1(tv, 1e-12).satisfied);
}

TEST(Report, TextAndKeyValueForms) {
  const auto rep = check_theorem1(tabular_from_residuals(qtran_q(), learned_residuals()));
  std::ostringstream text, kv;
  print_report(text, rep);
  write_report(kv, rep);
  EXPECT_NE(text.str().find("satisfied"), std::string::npos);
  EXPECT_NE(text.str().find("(A, A)"), std::string::npos);
  EXPECT_NE(kv.str().find("condition = theorem1"), std::string::npos);
  EXPECT_NE(kv.str().find("satisfied = true"), std::string::npos);
}
