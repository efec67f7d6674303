#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "qfactor/envs.hpp"

using namespace qfactor;
using namespace qfactor::envs;

enum { A = 0, B = 1, C = 2 };

TEST(MatrixGame, PenaltyGameEntries) {
  const auto t = penalty_payoff();
  EXPECT_EQ(t.at({A, A}), 8.0);
  EXPECT_EQ(t.at({A, B}), -12.0);
  EXPECT_EQ(t.at({B, C}), 0.0);
}

TEST(MatrixGame, OutOfRangeActionThrows) {
  const auto t = penalty_payoff();
  EXPECT_THROW(t.at({3, 0}), RangeError);
  EXPECT_THROW(t.at({0}), RangeError);
}

TEST(MatrixGame, EpisodeIsOneStep) {
  MatrixGame g(penalty_payoff());
  const auto obs = g.reset();
  EXPECT_EQ(obs.rows(), 1);
  EXPECT_EQ(obs.cols(), 2);
  EXPECT_EQ(obs(0, 0), 1.0);
  const std::vector<int> u{A, A};
  const auto r = g.step(u);
  EXPECT_TRUE(r.done);
  EXPECT_EQ(r.reward, 8.0);
}

TEST(PayoffTable, RejectsWrongSizeAndNonFinite) {
  EXPECT_THROW(PayoffTable(2, 3, std::vector<double>(8, 0.0)), DimensionError);
  EXPECT_THROW(PayoffTable(2, 2, {0, 1, 2, std::nan("")}), RangeError);
}

TEST(PayoffTable, TextRoundTrip) {
  Rng rng(5);
  const auto t = random_payoff(rng);
  std::stringstream ss;
  write_payoff(ss, t);
  const auto back = read_payoff(ss);
  EXPECT_EQ(back.rewards(), t.rewards());
  std::stringstream bad("2 3\n1 2 3\n");
  EXPECT_THROW(read_payoff(bad), ParseError);
}

TEST(WideMatrix, KnownPoints) {
  EXPECT_DOUBLE_EQ(wide_matrix_reward(5, 15), 10.0);
  EXPECT_DOUBLE_EQ(wide_matrix_reward(15, 5), 5.0);
  // f1 = 5 - 0 - (10/3)^2, f2 = 10 - 100 - 0.
  EXPECT_NEAR(wide_matrix_reward(15, 15), 5.0 - 100.0 / 9.0, 1e-12);
  EXPECT_THROW(wide_matrix_reward(21, 0), RangeError);
}

TEST(GaussianSqueeze, RewardExamples) {
  auto spec = gs_spec(0.1);
  // x = 0.1 * sum(u); sum 80 -> x = 8.
  std::vector<int> u(10, 8);
  EXPECT_NEAR(gs_reward(spec, u), 8.0, 1e-12);
  std::vector<int> zero(10, 0);
  EXPECT_EQ(gs_reward(spec, zero), 0.0);
  std::vector<int> nine(10, 9);  // x = 9
  EXPECT_NEAR(gs_reward(spec, nine), 9.0 * std::exp(-1.0), 1e-12);
  EXPECT_NEAR(9.0 * std::exp(-1.0), 3.3110, 1e-4);
}

TEST(GaussianSqueeze, NonNegativeAndLinearUsage) {
  auto spec = mgs_spec();
  Rng rng(3);
  std::uniform_int_distribution<int> lvl(0, 9);
  std::uniform_real_distribution<double> s(0.0, 0.2);
  for (auto& si : spec.s) si = s(rng);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<int> u(10);
    for (auto& a : u) a = lvl(rng);
    EXPECT_GE(gs_reward(spec, u), 0.0);
    const int i = trial % 10;
    if (u[static_cast<std::size_t>(i)] < 9) {
      auto v = u;
      ++v[static_cast<std::size_t>(i)];
      EXPECT_NEAR(resource_usage(spec, v) - resource_usage(spec, u), spec.s[static_cast<std::size_t>(i)], 1e-12);
    }
  }
}

TEST(GaussianSqueeze, SpecValidation) {
  auto spec = gs_spec();
  spec.s[0] = 0.3;
  EXPECT_THROW(spec.validate(), RangeError);
  spec = gs_spec();
  spec.domains[0].sigma = 0.0;
  EXPECT_THROW(spec.validate(), RangeError);
}

TEST(GaussianSqueeze, EqualShareOptimumMatchesBruteForceOverSums) {
  const auto spec = mgs_spec();
  const auto opt = gs_optimum_equal_s(spec);
  // independent: every level vector with the same sum has the same reward, so
  // scan the 91 sums directly with a hand-written reward.
  double best = -1;
  for (int k = 0; k <= 90; ++k) {
    const double x = 0.15 * k;
    const double g = x * std::exp(-std::pow((x - 8.0) / 0.5, 2)) + x * std::exp(-std::pow((x - 5.0) / 1.0, 2));
    best = std::max(best, g);
  }
  EXPECT_NEAR(opt.reward, best, 1e-12);
  EXPECT_NEAR(opt.usage, 0.15 * opt.total_units, 1e-12);
}

TEST(GaussianSqueeze, ObservationCarriesStateAndId) {
  GaussianSqueeze env(mgs_spec());
  const auto obs = env.reset();
  ASSERT_EQ(obs.rows(), 20);
  ASSERT_EQ(obs.cols(), 10);
  for (int i = 0; i < 10; ++i) {
    EXPECT_DOUBLE_EQ(obs(0, i), 0.15);
    EXPECT_EQ(obs(10 + i, i), 1.0);
  }
  std::vector<int> u(10, 0);
  EXPECT_TRUE(env.step(u).done);
}

namespace {

PredatorPreyState state_of(std::vector<Cell> preds, std::vector<Cell> prey) { return PredatorPreyState{preds, prey, 0}; }

}  // namespace

TEST(PredatorPrey, TwoCatchersScoreAndRespawn) {
  const auto spec = mpp_small(1.5);
  auto st = state_of({{1, 2}, {3, 2}}, {{2, 2}});
  Rng rng(1);
  const std::vector<int> stay{kStop, kStop}, prey_stay{kStop};
  const auto out = mpp_resolve(spec, st, stay, prey_stay, rng);
  EXPECT_EQ(out.reward, 1.0);
  EXPECT_EQ(out.multi_catches, 1);
}

TEST(PredatorPrey, SingleCatcherPenalised) {
  const auto spec = mpp_small(1.5);
  auto st = state_of({{1, 2}, {4, 4}}, {{2, 2}});
  Rng rng(1);
  const std::vector<int> stay{kStop, kStop}, prey_stay{kStop};
  const auto out = mpp_resolve(spec, st, stay, prey_stay, rng);
  EXPECT_EQ(out.reward, -1.5);
  EXPECT_EQ(st.prey[0], (Cell{2, 2}));
}

TEST(PredatorPrey, NoCatchNoRewardAndMovesApply) {
  const auto spec = mpp_small(1.5);
  auto st = state_of({{0, 0}, {4, 4}}, {{2, 2}});
  Rng rng(1);
  const std::vector<int> moves{kRight, kUp}, prey_moves{kStop};
  const auto out = mpp_resolve(spec, st, moves, prey_moves, rng);
  EXPECT_EQ(out.reward, 0.0);
  EXPECT_EQ(st.predators[0], (Cell{1, 0}));
  EXPECT_EQ(st.predators[1], (Cell{4, 3}));
}

TEST(PredatorPrey, SameCellIsNotACatch) {
  EXPECT_FALSE(catches(Cell{2, 2}, Cell{2, 2}));
  EXPECT_FALSE(catches(Cell{1, 1}, Cell{2, 2}));
  EXPECT_TRUE(catches(Cell{2, 1}, Cell{2, 2}));
}

TEST(PredatorPrey, WallsBlockMoves) {
  const auto spec = mpp_small(1.0);
  EXPECT_EQ(move_cell(Cell{0, 0}, kLeft, spec), (Cell{0, 0}));
  EXPECT_EQ(move_cell(Cell{0, 0}, kUp, spec), (Cell{0, 0}));
  EXPECT_EQ(move_cell(Cell{4, 4}, kRight, spec), (Cell{4, 4}));
  EXPECT_EQ(move_cell(Cell{4, 4}, kDown, spec), (Cell{4, 4}));
  EXPECT_THROW(move_cell(Cell{0, 0}, 5, spec), RangeError);
}

TEST(PredatorPrey, TwoPreyRewardsAdd) {
  const auto spec = mpp_large(0.5);
  // prey 0 caught by predators 0 and 1, prey 1 by predator 2 only.
  auto st = state_of({{1, 1}, {3, 1}, {5, 5}, {0, 6}}, {{2, 1}, {5, 4}});
  Rng rng(2);
  const std::vector<int> stay(4, kStop), prey_stay(2, kStop);
  EXPECT_DOUBLE_EQ(mpp_resolve(spec, st, stay, prey_stay, rng).reward, 1.0 - 0.5);
}

TEST(PredatorPrey, ObservationWindow) {
  const auto spec = mpp_large(1.0);
  auto st = state_of({{3, 3}, {0, 0}, {6, 6}, {3, 3}}, {{3, 2}, {0, 6}});
  const auto obs = mpp_observe(spec, st);
  const int prey0 = 2 + 4, prey1 = prey0 + 3;
  // prey one row up in the same column
  EXPECT_EQ(obs(prey0, 0), 0.0);
  EXPECT_EQ(obs(prey0 + 1, 0), -1.0);
  EXPECT_EQ(obs(prey0 + 2, 0), 1.0);
  // prey 6 rows away from predator 1: invisible and zeroed
  EXPECT_EQ(obs(prey1, 1), 0.0);
  EXPECT_EQ(obs(prey1 + 1, 1), 0.0);
  EXPECT_EQ(obs(prey1 + 2, 1), 0.0);
  // predators 0 and 3 share a cell: observations differ only in the id block
  Vector diff = obs.col(0) - obs.col(3);
  EXPECT_EQ(diff(2), 1.0);
  EXPECT_EQ(diff(5), -1.0);
  diff(2) = diff(5) = 0.0;
  EXPECT_EQ(diff.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_DOUBLE_EQ(obs(0, 0), 0.5);
}

TEST(PredatorPrey, EpisodeRunsExactlyHundredStepsWithBoundedRewards) {
  PredatorPrey env(mpp_small(1.5), 42);
  Rng rng(9);
  std::uniform_int_distribution<int> act(0, 4);
  for (int ep = 0; ep < 3; ++ep) {
    const auto first = env.reset();
    int steps = 0;
    bool done = false;
    while (!done) {
      std::vector<int> u{act(rng), act(rng)};
      const auto r = env.step(u);
      ++steps;
      done = r.done;
      EXPECT_TRUE(r.reward == -1.5 || r.reward == 0.0 || r.reward == 1.0);
      EXPECT_EQ(r.next_obs.rows(), first.rows());
      for (const auto& c : env.state().predators) {
        EXPECT_GE(c.x, 0);
        EXPECT_LT(c.x, 5);
      }
    }
    EXPECT_EQ(steps, 100);
  }
}

TEST(PredatorPrey, InvalidActionThrows) {
  PredatorPrey env(mpp_small(1.0), 1);
  const std::vector<int> bad{0, 7};
  EXPECT_THROW(env.step(bad), RangeError);
}

TEST(RandomPayoff, RangeDeterminismAndMean) {
  Rng a(123), b(123);
  const auto ta = random_payoff(a), tb = random_payoff(b);
  EXPECT_EQ(ta.rewards(), tb.rewards());
  for (double v : ta.rewards()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  Rng c(7);
  double sum = 0;
  int n = 0;
  while (n < 10000) {
    const auto t = random_payoff(c);
    for (double v : t.rewards()) {
      if (n == 10000) break;
      sum += v;
      ++n;
    }
  }
  EXPECT_NEAR(sum / n, 0.5, 0.02);
}
