#pragma once

// Replay buffer, minibatch losses with analytic gradients, and the training
// loop (epsilon-greedy acting, per-step minibatch update, periodic target sync).
//
// Minibatch tensors are column-major. Observations are deduplicated by
// identity: every quantity that depends only on tau (Q_i, h_V, V_jt, the
// greedy action and Q_jt at it) is computed once per distinct observation.

#include <algorithm>
#include <limits>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "qfactor/agents.hpp"
#include "qfactor/envs.hpp"
#include "qfactor/nn.hpp"

#if defined(__SSE2__)
#include <xmmintrin.h>
#endif

namespace qfactor {

struct Transition {
  JointObsPtr obs;
  std::vector<int> actions;
  double reward = 0.0;
  JointObsPtr next_obs;
  bool done = false;
};

/// FIFO ring of transitions.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw RangeError("replay buffer capacity must be positive");
    storage_.reserve(std::min<std::size_t>(capacity, 1u << 20));
  }

  std::size_t size() const { return storage_.size(); }
  std::size_t capacity() const { return capacity_; }

  void push(Transition t) {
    if (storage_.size() < capacity_) {
      storage_.push_back(std::move(t));
    } else {
      storage_[next_] = std::move(t);
    }
    next_ = (next_ + 1) % capacity_;
  }

  /// k-th oldest stored transition.
  const Transition& oldest(std::size_t k) const {
    if (k >= storage_.size()) throw RangeError("replay buffer index out of range");
    const std::size_t start = storage_.size() < capacity_ ? 0 : next_;
    return storage_[(start + k) % capacity_];
  }

  /// Uniform sample of n distinct transitions.
  std::vector<const Transition*> sample(std::size_t n, Rng& rng) const {
    if (n > storage_.size()) throw RangeError("cannot sample more transitions than stored");
    std::uniform_int_distribution<std::size_t> pick(0, storage_.size() - 1);
    std::vector<std::size_t> chosen;
    chosen.reserve(n);
    while (chosen.size() < n) {
      const std::size_t k = pick(rng);
      if (std::find(chosen.begin(), chosen.end(), k) == chosen.end()) chosen.push_back(k);
    }
    std::vector<const Transition*> out;
    out.reserve(n);
    for (auto k : chosen) out.push_back(&storage_[k]);
    return out;
  }

 private:
  std::size_t capacity_;
  std::size_t next_ = 0;
  std::vector<Transition> storage_;
};

struct TrainConfig {
  double lr = 0.0005;
  int batch = 32;
  double lambda_opt = 1.0;
  double lambda_nopt = 1.0;
  double gamma = 0.99;
  long target_update = 0;  // sync period I; 0 keeps the initial copy
  long total_steps = 20000;
  long buffer = 20000;
  double eps_start = 1.0;
  double eps_end = 1.0;
  long eps_anneal = 0;
  long eval_interval = 1000;
  int eval_episodes = 10;
  long checkpoint_interval = 0;

  void validate() const {
    if (!(lr >= 0.0)) throw RangeError("train.lr must be >= 0");
    if (batch <= 0) throw RangeError("train.batch must be positive");
    if (!(lambda_opt >= 0.0) || !(lambda_nopt >= 0.0)) throw RangeError("loss weights must be >= 0");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw RangeError("train.gamma must lie in [0, 1]");
    if (target_update < 0 || total_steps < 0 || eps_anneal < 0) throw RangeError("step counts must be >= 0");
    if (buffer <= 0) throw RangeError("train.buffer must be positive");
    if (!(eps_start >= 0.0 && eps_start <= 1.0 && eps_end >= 0.0 && eps_end <= 1.0))
      throw RangeError("epsilon values must lie in [0, 1]");
    if (eval_interval <= 0 || eval_episodes <= 0) throw RangeError("evaluation cadence must be positive");
    if (checkpoint_interval < 0) throw RangeError("train.checkpoint_interval must be >= 0");
  }
};

/// Linear anneal from eps_start to eps_end over eps_anneal steps.
inline double epsilon_at(const TrainConfig& cfg, long t) {
  if (cfg.eps_anneal <= 0 || t >= cfg.eps_anneal) return cfg.eps_end;
  const double frac = static_cast<double>(t) / static_cast<double>(cfg.eps_anneal);
  return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start);
}

/// Minibatch means of the squared loss terms. VDN and QMIX only fill l_td.
struct LossBreakdown {
  double l_td = 0.0;
  double l_opt = 0.0;
  double l_nopt = 0.0;

  double total(double lambda_opt, double lambda_nopt) const { return l_td + lambda_opt * l_opt + lambda_nopt * l_nopt; }
  bool finite() const { return std::isfinite(l_td) && std::isfinite(l_opt) && std::isfinite(l_nopt); }
};

/// (x)^2, the per-sample L_opt term for residual x = Q'(u_bar) - Q-hat(u_bar) + V.
inline double opt_term(double x) { return x * x; }
/// min(x, 0)^2, the per-sample L_nopt term.
inline double nopt_term(double x) {
  const double m = std::min(x, 0.0);
  return m * m;
}
/// (min over the column)^2, one agent's per-sample L_nopt-min term.
inline double nopt_min_term(std::span<const double> column) {
  const double m = *std::min_element(column.begin(), column.end());
  return m * m;
}

struct Batch {
  int size = 0;
  std::vector<const JointObservation*> obs;       // distinct observations
  std::vector<int> obs_col;                       // sample -> index into obs
  std::vector<const JointObservation*> next_obs;  // distinct non-terminal next observations
  std::vector<int> next_col;                      // sample -> index into next_obs, -1 if terminal
  std::vector<std::vector<int>> actions;          // [agent][sample]
  Vector reward;
};

inline Batch make_batch(std::span<const Transition* const> ts) {
  if (ts.empty()) throw RangeError("empty minibatch");
  Batch b;
  b.size = static_cast<int>(ts.size());
  const std::size_t n_agents = ts.front()->actions.size();
  b.actions.assign(n_agents, std::vector<int>(ts.size()));
  b.reward.resize(b.size);
  std::unordered_map<const JointObservation*, int> seen, seen_next;
  for (std::size_t s = 0; s < ts.size(); ++s) {
    const Transition& t = *ts[s];
    if (t.actions.size() != n_agents) throw DimensionError("minibatch mixes agent counts");
    auto [it, fresh] = seen.try_emplace(t.obs.get(), static_cast<int>(b.obs.size()));
    if (fresh) b.obs.push_back(t.obs.get());
    b.obs_col.push_back(it->second);
    if (t.done) {
      b.next_col.push_back(-1);
    } else {
      auto [jt, nfresh] = seen_next.try_emplace(t.next_obs.get(), static_cast<int>(b.next_obs.size()));
      if (nfresh) b.next_obs.push_back(t.next_obs.get());
      b.next_col.push_back(jt->second);
    }
    for (std::size_t i = 0; i < n_agents; ++i) b.actions[i][s] = t.actions[i];
    b.reward(static_cast<Eigen::Index>(s)) = t.reward;
  }
  return b;
}

inline Batch make_batch(const std::vector<Transition>& ts) {
  std::vector<const Transition*> ptrs;
  for (const auto& t : ts) ptrs.push_back(&t);
  return make_batch(ptrs);
}

namespace detail {

inline Matrix agent_inputs(const std::vector<const JointObservation*>& obs, int agent) {
  Matrix x(obs.front()->rows(), static_cast<Eigen::Index>(obs.size()));
  for (std::size_t c = 0; c < obs.size(); ++c) x.col(static_cast<Eigen::Index>(c)) = obs[c]->col(agent);
  return x;
}

inline Matrix state_inputs(const std::vector<const JointObservation*>& obs) {
  Matrix x(obs.front()->size(), static_cast<Eigen::Index>(obs.size()));
  for (std::size_t c = 0; c < obs.size(); ++c) x.col(static_cast<Eigen::Index>(c)) = joint_state(*obs[c]);
  return x;
}

inline std::vector<int> identity_cols(std::size_t n) {
  std::vector<int> c(n);
  for (std::size_t k = 0; k < n; ++k) c[k] = static_cast<int>(k);
  return c;
}

inline std::vector<int> column_argmax(const Matrix& q) {
  std::vector<int> out(static_cast<std::size_t>(q.cols()));
  for (Eigen::Index c = 0; c < q.cols(); ++c) out[static_cast<std::size_t>(c)] = argmax(q.col(c));
  return out;
}

/// Selected features h_Q(tau, actions[b]) for every sample b; trunk column is cols[b].
inline Matrix hq_rows_forward(const nn::DenseNet& head, int width, const Matrix& trunk, std::span<const int> cols,
                              std::span<const int> actions) {
  const auto& layer = head.layers().front();
  const Eigen::Index n_actions = layer.out_dim() / width;
  Matrix out(width, static_cast<Eigen::Index>(actions.size()));
  std::vector<std::vector<int>> groups(static_cast<std::size_t>(n_actions));
  for (std::size_t b = 0; b < actions.size(); ++b) groups[static_cast<std::size_t>(actions[b])].push_back(static_cast<int>(b));
  for (Eigen::Index a = 0; a < n_actions; ++a) {
    const auto& g = groups[static_cast<std::size_t>(a)];
    if (g.empty()) continue;
    Matrix x(trunk.rows(), static_cast<Eigen::Index>(g.size()));
    for (std::size_t k = 0; k < g.size(); ++k) x.col(static_cast<Eigen::Index>(k)) = trunk.col(cols[static_cast<std::size_t>(g[k])]);
    Matrix z = layer.weight.values.middleRows(a * width, width) * x;
    z.colwise() += layer.bias.values.col(0).segment(a * width, width);
    z = z.cwiseMax(0.0);
    for (std::size_t k = 0; k < g.size(); ++k) out.col(g[k]) = z.col(static_cast<Eigen::Index>(k));
  }
  return out;
}

inline void hq_rows_backward(const nn::DenseNet& head, int width, const Matrix& trunk, std::span<const int> cols,
                             std::span<const int> actions, const Matrix& out, const Matrix& d_out,
                             nn::Gradients& grads, Matrix& d_trunk) {
  const auto& layer = head.layers().front();
  const Eigen::Index n_actions = layer.out_dim() / width;
  std::vector<std::vector<int>> groups(static_cast<std::size_t>(n_actions));
  for (std::size_t b = 0; b < actions.size(); ++b) groups[static_cast<std::size_t>(actions[b])].push_back(static_cast<int>(b));
  for (Eigen::Index a = 0; a < n_actions; ++a) {
    const auto& g = groups[static_cast<std::size_t>(a)];
    if (g.empty()) continue;
    const auto n = static_cast<Eigen::Index>(g.size());
    Matrix x(trunk.rows(), n), dz(width, n);
    for (Eigen::Index k = 0; k < n; ++k) {
      const int b = g[static_cast<std::size_t>(k)];
      x.col(k) = trunk.col(cols[static_cast<std::size_t>(b)]);
      dz.col(k) = d_out.col(b).cwiseProduct((out.col(b).array() > 0.0).cast<double>().matrix());
    }
    grads[0].middleRows(a * width, width).noalias() += dz * x.transpose();
    grads[1].middleRows(a * width, width) += dz.rowwise().sum();
    const Matrix dx = layer.weight.values.middleRows(a * width, width).transpose() * dz;
    for (Eigen::Index k = 0; k < n; ++k) d_trunk.col(cols[static_cast<std::size_t>(g[static_cast<std::size_t>(k)])]) += dx.col(k);
  }
}

struct AgentEval {
  Matrix trunk, q, hv;
};

inline std::vector<AgentEval> evaluate_agents(const Assembly& a, const std::vector<const JointObservation*>& obs) {
  std::vector<AgentEval> out;
  for (int i = 0; i < a.n_agents(); ++i) {
    const auto& s = a.agent[static_cast<std::size_t>(i)];
    AgentEval e;
    e.trunk = a.net(s.trunk).evaluate(agent_inputs(obs, i));
    e.q = a.net(s.q).evaluate(e.trunk);
    if (s.hv != kNoSlot) e.hv = a.net(s.hv).evaluate(e.trunk);
    out.push_back(std::move(e));
  }
  return out;
}

inline Matrix gather_cols(const Matrix& m, std::span<const int> cols) {
  Matrix out(m.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t b = 0; b < cols.size(); ++b) out.col(static_cast<Eigen::Index>(b)) = m.col(cols[b]);
  return out;
}

/// Q_jt(tau_c, actions[.][b]) for QTRAN-base without gradients (1 x B).
inline Matrix base_joint_at(const Assembly& a, const std::vector<AgentEval>& ev, std::span<const int> cols,
                            const std::vector<std::vector<int>>& actions) {
  Matrix s = Matrix::Zero(a.feature_width, static_cast<Eigen::Index>(cols.size()));
  for (int i = 0; i < a.n_agents(); ++i)
    s += hq_rows_forward(a.net(a.agent[static_cast<std::size_t>(i)].hq), a.feature_width, ev[static_cast<std::size_t>(i)].trunk,
                         cols, actions[static_cast<std::size_t>(i)]);
  return a.net(a.joint).evaluate(s);
}

/// Counterfactual columns Q_jt(tau, ., u_-i) for QTRAN-alt without gradients (per agent, A x B).
inline std::vector<Matrix> alt_columns_at(const Assembly& a, const std::vector<AgentEval>& ev, std::span<const int> cols,
                                          const std::vector<std::vector<int>>& actions) {
  const int w = a.feature_width;
  const auto n = static_cast<Eigen::Index>(cols.size());
  std::vector<Matrix> hq;
  Matrix s = Matrix::Zero(w, n);
  for (int i = 0; i < a.n_agents(); ++i) {
    hq.push_back(hq_rows_forward(a.net(a.agent[static_cast<std::size_t>(i)].hq), w, ev[static_cast<std::size_t>(i)].trunk, cols,
                                 actions[static_cast<std::size_t>(i)]));
    s += hq.back();
  }
  std::vector<Matrix> out;
  for (int i = 0; i < a.n_agents(); ++i) {
    const auto ui = static_cast<std::size_t>(i);
    Matrix x(2 * w, n);
    x.topRows(w) = gather_cols(ev[ui].hv, cols);
    x.bottomRows(w) = s - hq[ui];
    out.push_back(a.net(a.counterfactual[ui]).evaluate(x));
  }
  return out;
}

/// QMIX mixed values for per-sample selected Q values q_sel (N x B); state column cols[b].
inline Matrix qmix_at(const Assembly& a, const Matrix& states, std::span<const int> cols, const Matrix& q_sel) {
  const Matrix w1 = a.net(a.hyper_w1).evaluate(states), b1 = a.net(a.hyper_b1).evaluate(states),
               w2 = a.net(a.hyper_w2).evaluate(states), b2 = a.net(a.hyper_b2).evaluate(states);
  Matrix out(1, q_sel.cols());
  std::vector<double> q(static_cast<std::size_t>(q_sel.rows()));
  for (Eigen::Index b = 0; b < q_sel.cols(); ++b) {
    const int c = cols[static_cast<std::size_t>(b)];
    for (Eigen::Index i = 0; i < q_sel.rows(); ++i) q[static_cast<std::size_t>(i)] = q_sel(i, b);
    out(0, b) = qmix_mix(w1.col(c), b1.col(c), w2.col(c), b2(0, c), q);
  }
  return out;
}

/// Q_jt(tau, u_bar(tau)) for each distinct observation, where u_bar is the
/// assembly's own greedy joint action.
inline Vector greedy_joint_values(const Assembly& a, const std::vector<const JointObservation*>& obs) {
  const auto ev = evaluate_agents(a, obs);
  const auto cols = identity_cols(obs.size());
  std::vector<std::vector<int>> ubar;
  for (const auto& e : ev) ubar.push_back(column_argmax(e.q));
  const auto n = static_cast<Eigen::Index>(obs.size());
  switch (a.algo) {
    case Algo::vdn: {
      Vector v = Vector::Zero(n);
      for (const auto& e : ev) v += e.q.colwise().maxCoeff().transpose();
      return v;
    }
    case Algo::qmix: {
      Matrix q_sel(a.n_agents(), n);
      for (int i = 0; i < a.n_agents(); ++i) q_sel.row(i) = ev[static_cast<std::size_t>(i)].q.colwise().maxCoeff();
      return qmix_at(a, state_inputs(obs), cols, q_sel).row(0).transpose();
    }
    case Algo::qtran_base: return base_joint_at(a, ev, cols, ubar).row(0).transpose();
    case Algo::qtran_alt: {
      const auto colsq = alt_columns_at(a, ev, cols, ubar);
      Vector v = Vector::Zero(n);
      for (int i = 0; i < a.n_agents(); ++i)
        for (Eigen::Index c = 0; c < n; ++c) v(c) += colsq[static_cast<std::size_t>(i)](ubar[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)], c);
      return v / static_cast<double>(a.n_agents());
    }
  }
  return Vector();
}

}  // namespace detail

/// y = r + gamma * Q_jt(tau', u_bar'; target) with u_bar' the target's greedy
/// joint action; terminal samples use y = r.
inline Vector td_targets(const Assembly& target, const Batch& batch, double gamma) {
  Vector y = batch.reward;
  if (gamma == 0.0 || batch.next_obs.empty()) return y;
  const Vector next_values = detail::greedy_joint_values(target, batch.next_obs);
  for (int b = 0; b < batch.size; ++b) {
    const int c = batch.next_col[static_cast<std::size_t>(b)];
    if (c >= 0) y(b) += gamma * next_values(c);
  }
  return y;
}

inline double td_target(double reward, const JointObservation& next_obs, bool done, const Assembly& target, double gamma) {
  if (done || gamma == 0.0) return reward;
  const auto u = greedy_joint(target, next_obs);
  return reward + gamma * joint_value(target, next_obs, u);
}

struct LossWeights {
  double lambda_opt = 1.0;
  double lambda_nopt = 1.0;
  double gamma = 0.99;
};

inline std::vector<nn::Gradients> zero_gradients(const Assembly& a) {
  std::vector<nn::Gradients> g;
  for (const auto& net : a.nets) g.push_back(net.zero_gradients());
  return g;
}

inline void set_zero(std::vector<nn::Gradients>& grads) {
  for (auto& g : grads)
    for (auto& m : g) m.setZero();
}

/// Minibatch loss of `net`'s algorithm. When `grads` is non-null the analytic
/// gradient of the total loss is accumulated into it (aligned with net.nets).
///
/// QTRAN losses evaluate Q-hat_jt (the joint value with gradient flow blocked)
/// from `hat`, which defaults to `net` itself; passing a frozen copy yields a
/// function whose plain derivative equals the stop-gradient update.
inline LossBreakdown compute_loss(const Assembly& net, const Assembly& target, const Batch& batch, const LossWeights& w,
                                  std::vector<nn::Gradients>* grads = nullptr, const Assembly* hat = nullptr) {
  using detail::AgentEval;
  const int n_agents = net.n_agents();
  const int B = batch.size;
  const auto U = static_cast<Eigen::Index>(batch.obs.size());
  const double invB = 1.0 / B;
  const Vector y = td_targets(target, batch, w.gamma);
  const bool want_grad = grads != nullptr;
  const bool self_hat = hat == nullptr || hat == &net;
  const std::span<const int> cols(batch.obs_col);

  // Agent passes over distinct observations.
  struct Pass {
    nn::GradTape trunk, q, hv;
  };
  std::vector<Pass> pass(static_cast<std::size_t>(n_agents));
  std::vector<Matrix> d_q, d_trunk, d_hv;
  std::vector<std::vector<int>> ubar;
  for (int i = 0; i < n_agents; ++i) {
    const auto& s = net.agent[static_cast<std::size_t>(i)];
    auto& p = pass[static_cast<std::size_t>(i)];
    p.trunk = net.net(s.trunk).forward(detail::agent_inputs(batch.obs, i));
    p.q = net.net(s.q).forward(p.trunk.output());
    if (s.hv != kNoSlot) p.hv = net.net(s.hv).forward(p.trunk.output());
    ubar.push_back(detail::column_argmax(p.q.output()));
    d_q.push_back(Matrix::Zero(net.n_actions(), U));
    d_trunk.push_back(Matrix::Zero(p.trunk.output().rows(), U));
    if (s.hv != kNoSlot) d_hv.push_back(Matrix::Zero(net.feature_width, U));
  }
  auto q_at = [&](int i, int a, int c) { return pass[static_cast<std::size_t>(i)].q.output()(a, c); };
  auto act = [&](int i, int b) { return batch.actions[static_cast<std::size_t>(i)][static_cast<std::size_t>(b)]; };
  auto ubar_at = [&](int i, int c) { return ubar[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)]; };

  // Q'_jt at the sampled and the greedy joint actions.
  Vector qprime_u(B), qprime_bar(U);
  for (int b = 0; b < B; ++b) {
    double s = 0.0;
    for (int i = 0; i < n_agents; ++i) s += q_at(i, act(i, b), cols[static_cast<std::size_t>(b)]);
    qprime_u(b) = s;
  }
  for (Eigen::Index c = 0; c < U; ++c) {
    double s = 0.0;
    for (int i = 0; i < n_agents; ++i) s += q_at(i, ubar_at(i, static_cast<int>(c)), static_cast<int>(c));
    qprime_bar(c) = s;
  }

  LossBreakdown loss;
  std::vector<nn::Gradients> unused;
  std::vector<nn::Gradients>& g = want_grad ? *grads : unused;

  if (net.algo == Algo::vdn) {
    for (int b = 0; b < B; ++b) {
      const double e = qprime_u(b) - y(b);
      loss.l_td += e * e * invB;
      if (want_grad)
        for (int i = 0; i < n_agents; ++i) d_q[static_cast<std::size_t>(i)](act(i, b), cols[static_cast<std::size_t>(b)]) += 2.0 * e * invB;
    }
  } else if (net.algo == Algo::qmix) {
    const Matrix states = detail::state_inputs(batch.obs);
    const auto tw1 = net.net(net.hyper_w1).forward(states), tb1 = net.net(net.hyper_b1).forward(states),
               tw2 = net.net(net.hyper_w2).forward(states), tb2 = net.net(net.hyper_b2).forward(states);
    const Matrix &w1 = tw1.output(), &b1 = tb1.output(), &w2 = tw2.output(), &b2 = tb2.output();
    const Eigen::Index m = b1.rows();
    Matrix dw1 = Matrix::Zero(w1.rows(), U), db1 = Matrix::Zero(m, U), dw2 = Matrix::Zero(m, U), db2 = Matrix::Zero(1, U);
    for (int b = 0; b < B; ++b) {
      const int c = cols[static_cast<std::size_t>(b)];
      Vector q(n_agents);
      for (int i = 0; i < n_agents; ++i) q(i) = q_at(i, act(i, b), c);
      Vector pre = b1.col(c);
      for (int i = 0; i < n_agents; ++i) pre += w1.col(c).segment(i * m, m).cwiseAbs() * q(i);
      const Vector hidden = pre.cwiseMax(0.0);
      const double qjt = w2.col(c).cwiseAbs().dot(hidden) + b2(0, c);
      const double e = qjt - y(b);
      loss.l_td += e * e * invB;
      if (!want_grad) continue;
      const double gq = 2.0 * e * invB;
      dw2.col(c) += gq * hidden.cwiseProduct(w2.col(c).cwiseSign());
      db2(0, c) += gq;
      const Vector dpre = (gq * w2.col(c).cwiseAbs()).cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
      db1.col(c) += dpre;
      for (int i = 0; i < n_agents; ++i) {
        const auto seg = w1.col(c).segment(i * m, m);
        dw1.col(c).segment(i * m, m) += (dpre * q(i)).cwiseProduct(seg.cwiseSign());
        d_q[static_cast<std::size_t>(i)](act(i, b), c) += dpre.dot(seg.cwiseAbs());
      }
    }
    if (want_grad) {
      net.net(net.hyper_w1).backward(tw1, dw1, g[net.hyper_w1]);
      net.net(net.hyper_b1).backward(tb1, db1, g[net.hyper_b1]);
      net.net(net.hyper_w2).backward(tw2, dw2, g[net.hyper_w2]);
      net.net(net.hyper_b2).backward(tb2, db2, g[net.hyper_b2]);
    }
  } else {
    // QTRAN: features, V_jt and Q-hat_jt.
    const int fw = net.feature_width;
    std::vector<Matrix> hq(static_cast<std::size_t>(n_agents));
    Matrix hq_total = Matrix::Zero(fw, B);
    Matrix hv_total = Matrix::Zero(fw, U);
    for (int i = 0; i < n_agents; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      hq[ui] = detail::hq_rows_forward(net.net(net.agent[ui].hq), fw, pass[ui].trunk.output(), cols, batch.actions[ui]);
      hq_total += hq[ui];
      hv_total += pass[ui].hv.output();
    }
    const auto value_tape = net.net(net.value).forward(hv_total);
    const Matrix& v = value_tape.output();  // 1 x U
    Matrix d_v = Matrix::Zero(1, U);

    const Assembly& src = self_hat ? net : *hat;
    std::vector<AgentEval> hat_eval;
    if (self_hat) {
      for (const auto& p : pass) hat_eval.push_back(AgentEval{p.trunk.output(), p.q.output(), p.hv.activations.empty() ? Matrix() : p.hv.output()});
    } else {
      hat_eval = detail::evaluate_agents(src, batch.obs);
    }
    const auto ident = detail::identity_cols(static_cast<std::size_t>(U));

    std::vector<Matrix> d_hq(static_cast<std::size_t>(n_agents), Matrix::Zero(fw, B));
    if (net.algo == Algo::qtran_base) {
      const auto joint_tape = net.net(net.joint).forward(hq_total);
      const Matrix& qjt = joint_tape.output();  // 1 x B
      const Matrix qhat_u = self_hat ? qjt : detail::base_joint_at(src, hat_eval, cols, batch.actions);
      const Matrix qhat_bar = detail::base_joint_at(src, hat_eval, ident, ubar);  // 1 x U
      Matrix d_qjt = Matrix::Zero(1, B);
      for (int b = 0; b < B; ++b) {
        const int c = cols[static_cast<std::size_t>(b)];
        const double e_td = qjt(0, b) - y(b);
        const double e_opt = qprime_bar(c) - qhat_bar(0, c) + v(0, c);
        const double e_nopt = std::min(qprime_u(b) - qhat_u(0, b) + v(0, c), 0.0);
        loss.l_td += e_td * e_td * invB;
        loss.l_opt += opt_term(e_opt) * invB;
        loss.l_nopt += nopt_term(e_nopt) * invB;
        if (!want_grad) continue;
        d_qjt(0, b) = 2.0 * e_td * invB;
        const double go = w.lambda_opt * 2.0 * e_opt * invB;
        const double gn = w.lambda_nopt * 2.0 * e_nopt * invB;
        for (int i = 0; i < n_agents; ++i) {
          d_q[static_cast<std::size_t>(i)](ubar_at(i, c), c) += go;
          d_q[static_cast<std::size_t>(i)](act(i, b), c) += gn;
        }
        d_v(0, c) += go + gn;
      }
      if (want_grad) {
        Matrix d_total;
        net.net(net.joint).backward(joint_tape, d_qjt, g[net.joint], &d_total);
        for (auto& d : d_hq) d = d_total;
      }
    } else {
      // QTRAN-alt: one counterfactual network per agent.
      std::vector<nn::GradTape> cf_tapes;
      for (int i = 0; i < n_agents; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        Matrix x(2 * fw, B);
        x.topRows(fw) = detail::gather_cols(pass[ui].hv.output(), cols);
        x.bottomRows(fw) = hq_total - hq[ui];
        cf_tapes.push_back(net.net(net.counterfactual[ui]).forward(x));
      }
      std::vector<Matrix> qhat_cols;
      if (self_hat) {
        for (const auto& t : cf_tapes) qhat_cols.push_back(t.output());
      } else {
        qhat_cols = detail::alt_columns_at(src, hat_eval, cols, batch.actions);
      }
      const auto qhat_bar_cols = detail::alt_columns_at(src, hat_eval, ident, ubar);
      const double invNB = invB / n_agents;
      std::vector<Matrix> d_cf(static_cast<std::size_t>(n_agents), Matrix::Zero(net.n_actions(), B));
      for (int b = 0; b < B; ++b) {
        const int c = cols[static_cast<std::size_t>(b)];
        for (int i = 0; i < n_agents; ++i) {
          const auto ui = static_cast<std::size_t>(i);
          const int ai = act(i, b);
          const double e_td = cf_tapes[ui].output()(ai, b) - y(b);
          const double e_opt = qprime_bar(c) - qhat_bar_cols[ui](ubar_at(i, c), c) + v(0, c);
          // D(tau, a, u_-i) minimised over a.
          const double others = qprime_u(b) - q_at(i, ai, c);
          int best = 0;
          double dmin = std::numeric_limits<double>::infinity();
          for (int a = 0; a < net.n_actions(); ++a) {
            const double d = q_at(i, a, c) + others - qhat_cols[ui](a, b) + v(0, c);
            if (d < dmin) {
              dmin = d;
              best = a;
            }
          }
          loss.l_td += e_td * e_td * invNB;
          loss.l_opt += e_opt * e_opt * invNB;
          loss.l_nopt += dmin * dmin * invNB;
          if (!want_grad) continue;
          d_cf[ui](ai, b) += 2.0 * e_td * invNB;
          const double go = w.lambda_opt * 2.0 * e_opt * invNB;
          const double gn = w.lambda_nopt * 2.0 * dmin * invNB;
          for (int j = 0; j < n_agents; ++j) {
            d_q[static_cast<std::size_t>(j)](ubar_at(j, c), c) += go;
            if (j != i) d_q[static_cast<std::size_t>(j)](act(j, b), c) += gn;
          }
          d_q[ui](best, c) += gn;
          d_v(0, c) += go + gn;
        }
      }
      if (want_grad) {
        Matrix d_others_total = Matrix::Zero(fw, B);
        std::vector<Matrix> d_others(static_cast<std::size_t>(n_agents));
        for (int i = 0; i < n_agents; ++i) {
          const auto ui = static_cast<std::size_t>(i);
          Matrix dx;
          net.net(net.counterfactual[ui]).backward(cf_tapes[ui], d_cf[ui], g[net.counterfactual[ui]], &dx);
          const Matrix d_hv_samples = dx.topRows(fw);
          for (int b = 0; b < B; ++b) d_hv[ui].col(cols[static_cast<std::size_t>(b)]) += d_hv_samples.col(b);
          d_others[ui] = dx.bottomRows(fw);
          d_others_total += d_others[ui];
        }
        // The second input of agent i's network is sum_{j != i} h_Q,j.
        for (int j = 0; j < n_agents; ++j) d_hq[static_cast<std::size_t>(j)] = d_others_total - d_others[static_cast<std::size_t>(j)];
      }
    }

    if (want_grad) {
      Matrix d_hv_total;
      net.net(net.value).backward(value_tape, d_v, g[net.value], &d_hv_total);
      for (int i = 0; i < n_agents; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        const auto& s = net.agent[ui];
        d_hv[ui] += d_hv_total;
        detail::hq_rows_backward(net.net(s.hq), fw, pass[ui].trunk.output(), cols, batch.actions[ui], hq[ui], d_hq[ui], g[s.hq],
                                 d_trunk[ui]);
        Matrix dt;
        net.net(s.hv).backward(pass[ui].hv, d_hv[ui], g[s.hv], &dt);
        d_trunk[ui] += dt;
      }
    }
  }

  if (want_grad) {
    for (int i = 0; i < n_agents; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      const auto& s = net.agent[ui];
      Matrix dt;
      net.net(s.q).backward(pass[ui].q, d_q[ui], g[s.q], &dt);
      d_trunk[ui] += dt;
      net.net(s.trunk).backward(pass[ui].trunk, d_trunk[ui], g[s.trunk]);
    }
  }
  return loss;
}

/// Adam over every network of the assembly. Gradients are checked for
/// finiteness before any parameter changes.
inline void adam_step(Assembly& a, const std::vector<nn::Gradients>& grads, const nn::AdamConfig& cfg) {
  if (grads.size() != a.nets.size()) throw ArchitectureMismatch("adam_step: gradient buffer misaligned");
  for (const auto& g : grads)
    if (!nn::all_finite(g)) throw NonFiniteError("adam_step: non-finite gradient");
  for (std::size_t k = 0; k < a.nets.size(); ++k) nn::adam_step(a.nets[k], grads[k], cfg);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct MetricPoint {
  long step = 0;
  double eval_reward_mean = 0.0;
  double loss_td = 0.0;
  double loss_opt = 0.0;
  double loss_nopt = 0.0;
  double epsilon = 0.0;
};

using EnvFactory = std::function<std::unique_ptr<Environment>(std::uint64_t seed)>;

struct TrainHooks {
  std::function<void(const MetricPoint&)> on_metric;
  std::function<void(long step)> on_target_sync;
  std::function<void(long step, const Assembly&)> on_checkpoint;
  // after every environment step: (steps done, online net, target net)
  std::function<void(long step, const Assembly&, const Assembly&)> on_step;
};

struct TrainResult {
  Assembly assembly;
  std::vector<MetricPoint> metrics;
  long updates = 0;
};

class TrainingAborted : public NonFiniteError {
 public:
  using NonFiniteError::NonFiniteError;
};

/// Mean undiscounted episode return of the greedy (epsilon = 0) policy.
inline double evaluate_greedy(const Assembly& a, Environment& env, int episodes) {
  double total = 0.0;
  for (int e = 0; e < episodes; ++e) {
    JointObservation obs = env.reset();
    for (int t = 0; t < env.episode_length(); ++t) {
      const auto u = greedy_joint(a, obs);
      StepResult r = env.step(u);
      total += r.reward;
      if (r.done) break;
      obs = std::move(r.next_obs);
    }
  }
  return total / episodes;
}

namespace detail {

// Flush subnormals to zero for the current thread while training. Converged
// nets drift small gradients and Adam moments into the subnormal range, which
// costs more than half the run time on x86 otherwise.
class FlushDenormals {
 public:
#if defined(__SSE2__)
  FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040u); }
  ~FlushDenormals() { _mm_setcsr(saved_); }

 private:
  unsigned saved_;
#endif
};

}  // namespace detail

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), 0x9e3779b9u};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

inline TrainResult train(const EnvFactory& make_env, Algo algo, const TrainConfig& cfg, const NetConfig& net_cfg,
                         std::uint64_t seed, const TrainHooks& hooks = {}) {
  cfg.validate();
  const detail::FlushDenormals ftz;
  auto env = make_env(derive_seed(seed, 1));
  auto eval_env = make_env(derive_seed(seed, 2));
  Rng init_rng(derive_seed(seed, 3)), act_rng(derive_seed(seed, 4)), replay_rng(derive_seed(seed, 5));

  const AssemblyShape shape{env->n_agents(), env->n_actions(), env->obs_dim()};
  TrainResult result{Assembly::make(algo, shape, net_cfg, init_rng), {}, 0};
  Assembly& net = result.assembly;
  Assembly target = net;
  if (hooks.on_target_sync) hooks.on_target_sync(0);
  if (cfg.total_steps == 0) return result;

  ReplayBuffer buffer(static_cast<std::size_t>(cfg.buffer));
  auto grads = zero_gradients(net);
  const nn::AdamConfig adam{cfg.lr};
  const LossWeights weights{cfg.lambda_opt, cfg.lambda_nopt, cfg.gamma};
  const bool single_state = env->single_state();

  JointObsPtr obs = std::make_shared<const JointObservation>(env->reset());
  LossBreakdown interval_loss;
  long interval_updates = 0;

  for (long t = 0; t < cfg.total_steps; ++t) {
    const double eps = epsilon_at(cfg, t);
    const auto u = eps_greedy(net, *obs, eps, act_rng);
    StepResult sr = env->step(u);
    JointObsPtr next = single_state ? obs : std::make_shared<const JointObservation>(std::move(sr.next_obs));
    buffer.push(Transition{obs, u, sr.reward, next, sr.done});
    if (sr.done) {
      if (single_state) {
        env->reset();
      } else {
        obs = std::make_shared<const JointObservation>(env->reset());
      }
    } else {
      obs = next;
    }

    if (buffer.size() >= static_cast<std::size_t>(cfg.batch)) {
      const auto sample = buffer.sample(static_cast<std::size_t>(cfg.batch), replay_rng);
      const Batch batch = make_batch(sample);
      set_zero(grads);
      const LossBreakdown l = compute_loss(net, target, batch, weights, &grads);
      if (!l.finite()) {
        throw TrainingAborted("training aborted at step " + std::to_string(t) + ": non-finite loss (td=" +
                              std::to_string(l.l_td) + ", opt=" + std::to_string(l.l_opt) +
                              ", nopt=" + std::to_string(l.l_nopt) + ")");
      }
      try {
        adam_step(net, grads, adam);
      } catch (const NonFiniteError& e) {
        throw TrainingAborted("training aborted at step " + std::to_string(t) + ": " + e.what());
      }
      interval_loss.l_td += l.l_td;
      interval_loss.l_opt += l.l_opt;
      interval_loss.l_nopt += l.l_nopt;
      ++interval_updates;
      ++result.updates;
    }

    const long done_steps = t + 1;
    if (cfg.target_update > 0 && done_steps % cfg.target_update == 0) {
      snapshot_into(net, target);
      if (hooks.on_target_sync) hooks.on_target_sync(done_steps);
    }
    if (done_steps % cfg.eval_interval == 0 || done_steps == cfg.total_steps) {
      MetricPoint m;
      m.step = done_steps;
      m.eval_reward_mean = evaluate_greedy(net, *eval_env, cfg.eval_episodes);
      if (interval_updates > 0) {
        m.loss_td = interval_loss.l_td / interval_updates;
        m.loss_opt = interval_loss.l_opt / interval_updates;
        m.loss_nopt = interval_loss.l_nopt / interval_updates;
      }
      m.epsilon = eps;
      result.metrics.push_back(m);
      if (hooks.on_metric) hooks.on_metric(m);
      interval_loss = LossBreakdown{};
      interval_updates = 0;
    }
    if (hooks.on_step) hooks.on_step(done_steps, net, target);
    if (cfg.checkpoint_interval > 0 && done_steps % cfg.checkpoint_interval == 0 && hooks.on_checkpoint)
      hooks.on_checkpoint(done_steps, net);
  }
  return result;
}

}  // namespace qfactor
