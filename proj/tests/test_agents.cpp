#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "qfactor/agents.hpp"
#include "qfactor/verifier.hpp"

using namespace qfactor;

namespace {

Assembly small(Algo algo, int n = 2, int actions = 3, int obs_dim = 4, std::uint64_t seed = 1, bool shared = false) {
  Rng rng(seed);
  NetConfig cfg{{8, 8}, 6, {8, 8}, 5, shared};
  auto a = Assembly::make(algo, AssemblyShape{n, actions, obs_dim}, cfg, rng);
  // non-zero biases so ReLU patterns are not trivial
  for (auto& net : a.nets)
    for (auto& l : net.layers()) l.bias.values = Matrix::Random(l.bias.values.rows(), 1) * 0.2;
  return a;
}

JointObservation random_obs(int obs_dim, int n, Rng& rng) {
  std::normal_distribution<double> g;
  JointObservation o(obs_dim, n);
  for (Eigen::Index k = 0; k < o.size(); ++k) o.data()[k] = g(rng);
  return o;
}

const std::vector<Algo> kAll{Algo::vdn, Algo::qmix, Algo::qtran_base, Algo::qtran_alt};

}  // namespace

TEST(AlgoNames, RoundTrip) {
  for (Algo a : kAll) EXPECT_EQ(algo_from_string(to_string(a)), a);
  EXPECT_EQ(to_string(Algo::qtran_base), "qtran-base");
  EXPECT_THROW(algo_from_string("coma"), Error);
}

TEST(IndividualQ, SharedParamsAndIdenticalObsGiveIdenticalQ) {
  auto a = small(Algo::qtran_base, 3, 4, 5, 2, true);
  JointObservation obs(5, 3);
  obs.colwise() = Vector::LinSpaced(5, -1, 1);
  const auto outs = individual_q(a, obs);
  EXPECT_EQ(outs[0].q, outs[1].q);
  EXPECT_EQ(outs[1].q, outs[2].q);
}

TEST(IndividualQ, ShapeAndDimensionErrors) {
  for (Algo algo : kAll) {
    auto a = small(algo, 2, 5, 3);
    Rng rng(4);
    const auto outs = individual_q(a, random_obs(3, 2, rng));
    for (const auto& o : outs) EXPECT_EQ(o.q.size(), 5);
    EXPECT_THROW(individual_q(a, random_obs(2, 2, rng)), DimensionError);
  }
}

TEST(Vdn, SumOfSelectedValues) {
  const std::vector<double> q{-0.73, -2.29};
  EXPECT_NEAR(vdn_qjt(q), -3.02, 1e-12);
  EXPECT_EQ(vdn_qjt(std::vector<double>{0.0, 0.0}), 0.0);
  const std::vector<double> p{1.5, -2.0, 4.25}, r{4.25, 1.5, -2.0};
  EXPECT_EQ(vdn_qjt(p), vdn_qjt(r));
}

TEST(Qmix, MonotoneInEveryAgentValue) {
  Rng rng(31);
  std::normal_distribution<double> g;
  int violations = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto a = small(Algo::qmix, 3, 3, 4, 100 + static_cast<std::uint64_t>(trial));
    const auto obs = random_obs(4, 3, rng);
    std::vector<double> q{g(rng), g(rng), g(rng)};
    const double base = qmix_qjt(a, q, obs);
    for (int i = 0; i < 3; ++i) {
      auto up = q;
      up[static_cast<std::size_t>(i)] += 1e-3;
      if (qmix_qjt(a, up, obs) < base - 1e-12) ++violations;
      // finite-difference slope
      auto lo = q;
      lo[static_cast<std::size_t>(i)] -= 1e-6;
      auto hi = q;
      hi[static_cast<std::size_t>(i)] += 1e-6;
      if ((qmix_qjt(a, hi, obs) - qmix_qjt(a, lo, obs)) / 2e-6 < -1e-9) ++violations;
    }
  }
  EXPECT_EQ(violations, 0);
}

TEST(Qmix, ZeroOutputWeightsLeaveBiasPath) {
  const Vector w1 = Vector::Constant(4, 0.7), b1 = Vector::Constant(2, 0.3), w2 = Vector::Zero(2);
  const std::vector<double> q{5.0, -3.0};
  EXPECT_DOUBLE_EQ(qmix_mix(w1, b1, w2, 1.25, q), 1.25);
}

TEST(Qmix, NegativeRawWeightsActAsPositive) {
  const Vector w1 = (Vector(2) << -2.0, 3.0).finished(), b1 = Vector::Zero(1), w2 = Vector::Constant(1, -1.0);
  const std::vector<double> q{1.0, 1.0};
  // pre = |−2|·1 + |3|·1 = 5 (w1 layout is agent-major with width 1)
  EXPECT_DOUBLE_EQ(qmix_mix(w1, b1, w2, 0.0, q), 5.0);
}

TEST(Qtran, StateValueIgnoresActions) {
  for (Algo algo : {Algo::qtran_base, Algo::qtran_alt}) {
    auto a = small(algo);
    Rng rng(6);
    const auto obs = random_obs(4, 2, rng);
    const auto v = state_value(a, obs);
    ASSERT_TRUE(v.has_value());
    const auto outs = individual_q(a, obs);
    EXPECT_EQ(*v, qtran_vjt(a, hv_sum(outs)));
  }
  EXPECT_FALSE(state_value(small(Algo::vdn), JointObservation::Zero(4, 2)).has_value());
}

TEST(Qtran, TransformedValueIsExactSum) {
  Rng rng(8);
  for (Algo algo : kAll) {
    auto a = small(algo);
    const auto obs = random_obs(4, 2, rng);
    const auto outs = individual_q(a, obs);
    for (int u1 = 0; u1 < 3; ++u1)
      for (int u2 = 0; u2 < 3; ++u2) {
        const std::vector<int> u{u1, u2};
        EXPECT_EQ(transformed_qjt(outs, u) - (outs[0].q(u1) + outs[1].q(u2)), 0.0);
      }
  }
}

TEST(Qtran, JointValueFromHiddenFeatureSum) {
  auto a = small(Algo::qtran_base);
  Rng rng(9);
  const auto obs = random_obs(4, 2, rng);
  const auto outs = individual_q(a, obs);
  const std::vector<int> u{2, 1};
  // independent: build the feature sum from the raw head output
  Vector s = Vector::Zero(a.feature_width);
  for (int i = 0; i < 2; ++i) {
    const Vector full = a.net(a.agent[static_cast<std::size_t>(i)].hq).evaluate(outs[static_cast<std::size_t>(i)].trunk);
    s += full.segment(u[static_cast<std::size_t>(i)] * a.feature_width, a.feature_width);
  }
  EXPECT_NEAR(joint_value(a, obs, u), a.net(a.joint).evaluate(s)(0), 1e-12);
}

TEST(Counterfactual, SelfConsistency) {
  Rng rng(10);
  auto a = small(Algo::qtran_alt, 3, 4, 4);
  const auto obs = random_obs(4, 3, rng);
  const std::vector<int> u{1, 3, 0};
  const auto cols = counterfactual_columns(a, obs, u);
  const auto outs = individual_q(a, obs);
  const double full = transformed_qjt(outs, u);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(cols.qprime[static_cast<std::size_t>(i)](u[static_cast<std::size_t>(i)]), full, 1e-12);
}

TEST(Counterfactual, ColumnMatchesPerActionReevaluation) {
  Rng rng(12);
  auto a = small(Algo::qtran_alt, 2, 3, 4);
  const auto obs = random_obs(4, 2, rng);
  const std::vector<int> u{2, 0};
  const auto cols = counterfactual_columns(a, obs, u);
  const auto outs = individual_q(a, obs);
  for (int i = 0; i < 2; ++i) {
    for (int act = 0; act < 3; ++act) {
      auto v = u;
      v[static_cast<std::size_t>(i)] = act;
      // re-evaluate agent i's network input from scratch for the modified joint action
      Vector others = Vector::Zero(a.feature_width);
      for (int j = 0; j < 2; ++j)
        if (j != i) others += hq_feature(a, j, outs[static_cast<std::size_t>(j)].trunk, v[static_cast<std::size_t>(j)]);
      Vector x(2 * a.feature_width);
      x << outs[static_cast<std::size_t>(i)].hv, others;
      const double expect = a.net(a.counterfactual[static_cast<std::size_t>(i)]).evaluate(x)(act);
      EXPECT_NEAR(cols.qjt[static_cast<std::size_t>(i)](act), expect, 1e-12);
      // changing the agent's own action leaves the other agents' part untouched
      const auto moved = counterfactual_columns(a, obs, v);
      EXPECT_NEAR(moved.qjt[static_cast<std::size_t>(i)](act), expect, 1e-12);
    }
  }
}

TEST(Greedy, EpsilonZeroEqualsGreedyAndTiesPickLowest) {
  auto a = small(Algo::vdn);
  Rng rng(3);
  const auto obs = random_obs(4, 2, rng);
  for (int k = 0; k < 20; ++k) EXPECT_EQ(eps_greedy(a, obs, 0.0, rng), greedy_joint(a, obs));
  EXPECT_EQ(argmax(Vector((Vector(4) << 1, 3, 3, 2).finished())), 1);
  EXPECT_EQ(argmax(Vector::Zero(5)), 0);
  EXPECT_THROW(eps_greedy(a, obs, 1.5, rng), RangeError);
}

TEST(Greedy, EpsilonOneIsUniform) {
  auto a = small(Algo::vdn, 2, 5, 3);
  Rng rng(21);
  const auto obs = random_obs(3, 2, rng);
  std::vector<int> counts(5, 0);
  const int draws = 10000;
  for (int k = 0; k < draws / 2; ++k)
    for (int v : eps_greedy(a, obs, 1.0, rng)) ++counts[static_cast<std::size_t>(v)];
  double chi2 = 0.0;
  const double expect = draws / 5.0;
  for (int c : counts) chi2 += (c - expect) * (c - expect) / expect;
  // 4 degrees of freedom, p = 0.001 critical value
  EXPECT_LT(chi2, 18.47);
}

TEST(Affine, ArgmaxInvariantUnderPositiveAffineMaps) {
  Rng rng(55);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> scale(0.01, 10.0), shift(-20.0, 20.0);
  int failures = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    verify::TabularQ t;
    for (int i = 0; i < 3; ++i) {
      Vector q(4);
      for (auto& x : q) x = g(rng);
      t.q.push_back(q);
    }
    t.qjt.assign(64, 0.0);
    if (!verify::affine_invariance_probe(t, scale(rng), shift(rng))) ++failures;
  }
  EXPECT_EQ(failures, 0);
}

TEST(Snapshot, TargetCopyEvaluatesIdentically) {
  auto a = small(Algo::qtran_alt);
  auto b = small(Algo::qtran_alt, 2, 3, 4, 99);
  snapshot_into(a, b);
  Rng rng(1);
  const auto obs = random_obs(4, 2, rng);
  const std::vector<int> u{1, 2};
  EXPECT_EQ(joint_value(a, obs, u), joint_value(b, obs, u));
  auto other = small(Algo::qtran_base);
  EXPECT_THROW(snapshot_into(a, other), ArchitectureMismatch);
}

TEST(Checkpoint, RoundTripAllAlgorithms) {
  Rng rng(2);
  for (Algo algo : kAll) {
    for (bool shared : {false, true}) {
      auto a = small(algo, 3, 3, 4, 5, shared);
      std::stringstream ss;
      write_assembly(ss, a);
      const auto b = read_assembly(ss);
      EXPECT_EQ(b.roles, a.roles);
      const auto obs = random_obs(4, 3, rng);
      const std::vector<int> u{0, 2, 1};
      EXPECT_EQ(joint_value(a, obs, u), joint_value(b, obs, u));
      EXPECT_EQ(greedy_joint(a, obs), greedy_joint(b, obs));
    }
  }
}

TEST(Checkpoint, MissingRoleRejected) {
  auto a = small(Algo::qtran_base);
  std::stringstream ss;
  write_assembly(ss, a);
  std::string text = ss.str();
  const auto pos = text.find("\njoint\n");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, 7, "\njunk\n");
  std::stringstream bad(text);
  EXPECT_THROW(read_assembly(bad), ParseError);
}
