#pragma once

// Network assemblies for VDN, QMIX, QTRAN-base and QTRAN-alt, plus greedy and
// epsilon-greedy action selection and checkpoint I/O.
//
// Every network lives in Assembly::nets under a role name. Agent networks are
// split into a trunk (observation -> last hidden layer) and heads:
//   q   : trunk -> Q_i(tau_i, .)                       (identity)
//   hq  : trunk -> h_Q,i(tau_i, .) as actions x width  (relu, row-selected)
//   hv  : trunk -> h_V,i(tau_i)                        (relu)
// VDN and QMIX agents only carry the q head.

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "qfactor/envs.hpp"
#include "qfactor/nn.hpp"

namespace qfactor {

enum class Algo { vdn, qmix, qtran_base, qtran_alt };

inline std::string to_string(Algo a) {
  switch (a) {
    case Algo::vdn: return "vdn";
    case Algo::qmix: return "qmix";
    case Algo::qtran_base: return "qtran-base";
    case Algo::qtran_alt: return "qtran-alt";
  }
  return "?";
}

inline Algo algo_from_string(const std::string& s) {
  if (s == "vdn") return Algo::vdn;
  if (s == "qmix") return Algo::qmix;
  if (s == "qtran-base" || s == "qtran_base") return Algo::qtran_base;
  if (s == "qtran-alt" || s == "qtran_alt") return Algo::qtran_alt;
  throw ParseError("unknown algorithm '" + s + "' (expected vdn, qmix, qtran-base or qtran-alt)");
}

inline bool is_qtran(Algo a) { return a == Algo::qtran_base || a == Algo::qtran_alt; }

struct NetConfig {
  std::vector<int> agent_hidden = {32, 32};
  int feature_width = 32;
  std::vector<int> joint_hidden = {32, 32};
  int mixer_width = 32;
  bool shared_agents = false;
};

struct AssemblyShape {
  int n_agents = 2;
  int n_actions = 3;
  int obs_dim = 1;
};

inline constexpr std::size_t kNoSlot = std::numeric_limits<std::size_t>::max();

struct AgentSlots {
  std::size_t trunk = kNoSlot;
  std::size_t q = kNoSlot;
  std::size_t hq = kNoSlot;
  std::size_t hv = kNoSlot;
};

class Assembly {
 public:
  Algo algo = Algo::vdn;
  AssemblyShape shape;
  int feature_width = 0;
  int mixer_width = 0;
  bool shared_agents = false;

  std::vector<nn::DenseNet> nets;
  std::vector<std::string> roles;

  std::vector<AgentSlots> agent;  // one entry per agent; shared agents alias slot 0
  std::size_t joint = kNoSlot;
  std::size_t value = kNoSlot;
  std::vector<std::size_t> counterfactual;
  std::size_t hyper_w1 = kNoSlot, hyper_b1 = kNoSlot, hyper_w2 = kNoSlot, hyper_b2 = kNoSlot;

  static Assembly make(Algo algo, const AssemblyShape& shape, const NetConfig& cfg, Rng& rng) {
    if (shape.n_agents <= 0 || shape.n_actions <= 0 || shape.obs_dim <= 0)
      throw DimensionError("assembly shape must be positive");
    if (cfg.agent_hidden.empty()) throw DimensionError("agent networks need at least one hidden layer");
    Assembly a;
    a.algo = algo;
    a.shape = shape;
    a.feature_width = cfg.feature_width;
    a.mixer_width = cfg.mixer_width;
    a.shared_agents = cfg.shared_agents;
    const int hidden = cfg.agent_hidden.back();
    const std::vector<int> trunk_hidden(cfg.agent_hidden.begin(), cfg.agent_hidden.end() - 1);
    const int n_agent_nets = cfg.shared_agents ? 1 : shape.n_agents;
    std::vector<AgentSlots> distinct;
    for (int k = 0; k < n_agent_nets; ++k) {
      const std::string p = "agent." + std::to_string(k) + ".";
      AgentSlots s;
      s.trunk = a.add(p + "trunk", nn::DenseNet::make(shape.obs_dim, trunk_hidden, hidden, rng, nn::Activation::relu,
                                                       nn::Activation::relu));
      s.q = a.add(p + "q", nn::DenseNet::make(hidden, {}, shape.n_actions, rng));
      if (is_qtran(algo)) {
        s.hq = a.add(p + "hq", nn::DenseNet::make(hidden, {}, shape.n_actions * cfg.feature_width, rng,
                                                  nn::Activation::relu, nn::Activation::relu));
        s.hv = a.add(p + "hv", nn::DenseNet::make(hidden, {}, cfg.feature_width, rng, nn::Activation::relu,
                                                  nn::Activation::relu));
      }
      distinct.push_back(s);
    }
    for (int i = 0; i < shape.n_agents; ++i) a.agent.push_back(distinct[cfg.shared_agents ? 0 : i]);

    const int w = cfg.feature_width;
    if (algo == Algo::qtran_base) {
      a.joint = a.add("joint", nn::DenseNet::make(w, cfg.joint_hidden, 1, rng));
      a.value = a.add("value", nn::DenseNet::make(w, cfg.joint_hidden, 1, rng));
    } else if (algo == Algo::qtran_alt) {
      a.value = a.add("value", nn::DenseNet::make(w, cfg.joint_hidden, 1, rng));
      for (int i = 0; i < shape.n_agents; ++i)
        a.counterfactual.push_back(a.add("counterfactual." + std::to_string(i),
                                         nn::DenseNet::make(2 * w, cfg.joint_hidden, shape.n_actions, rng)));
    } else if (algo == Algo::qmix) {
      const int state_dim = shape.obs_dim * shape.n_agents;
      const int m = cfg.mixer_width;
      a.hyper_w1 = a.add("mixer.hyper_w1", nn::DenseNet::make(state_dim, {}, shape.n_agents * m, rng));
      a.hyper_b1 = a.add("mixer.hyper_b1", nn::DenseNet::make(state_dim, {}, m, rng));
      a.hyper_w2 = a.add("mixer.hyper_w2", nn::DenseNet::make(state_dim, {}, m, rng));
      a.hyper_b2 = a.add("mixer.hyper_b2", nn::DenseNet::make(state_dim, {}, 1, rng));
    }
    return a;
  }

  int n_agents() const { return shape.n_agents; }
  int n_actions() const { return shape.n_actions; }
  int state_dim() const { return shape.obs_dim * shape.n_agents; }

  const nn::DenseNet& net(std::size_t slot) const { return nets.at(slot); }
  nn::DenseNet& net(std::size_t slot) { return nets.at(slot); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& net : nets) n += net.parameter_count();
    return n;
  }

  /// Rebuilds slot indices from role names (used after loading a checkpoint).
  void bind_roles() {
    std::map<std::string, std::size_t> by_role;
    for (std::size_t k = 0; k < roles.size(); ++k) by_role[roles[k]] = k;
    auto find = [&](const std::string& r) {
      auto it = by_role.find(r);
      return it == by_role.end() ? kNoSlot : it->second;
    };
    agent.clear();
    for (int i = 0; i < shape.n_agents; ++i) {
      const std::string p = "agent." + std::to_string(shared_agents ? 0 : i) + ".";
      AgentSlots s{find(p + "trunk"), find(p + "q"), find(p + "hq"), find(p + "hv")};
      if (s.trunk == kNoSlot || s.q == kNoSlot) throw ParseError("checkpoint: missing network for agent " + std::to_string(i));
      if (is_qtran(algo) && (s.hq == kNoSlot || s.hv == kNoSlot))
        throw ParseError("checkpoint: missing feature heads for agent " + std::to_string(i));
      agent.push_back(s);
    }
    joint = find("joint");
    value = find("value");
    counterfactual.clear();
    if (algo == Algo::qtran_alt)
      for (int i = 0; i < shape.n_agents; ++i) counterfactual.push_back(find("counterfactual." + std::to_string(i)));
    hyper_w1 = find("mixer.hyper_w1");
    hyper_b1 = find("mixer.hyper_b1");
    hyper_w2 = find("mixer.hyper_w2");
    hyper_b2 = find("mixer.hyper_b2");
    auto require = [](bool ok, const char* what) {
      if (!ok) throw ParseError(std::string("checkpoint: missing ") + what);
    };
    if (algo == Algo::qtran_base) require(joint != kNoSlot && value != kNoSlot, "joint/value network");
    if (algo == Algo::qtran_alt) {
      require(value != kNoSlot, "value network");
      for (auto c : counterfactual) require(c != kNoSlot, "counterfactual network");
    }
    if (algo == Algo::qmix)
      require(hyper_w1 != kNoSlot && hyper_b1 != kNoSlot && hyper_w2 != kNoSlot && hyper_b2 != kNoSlot,
              "mixer hypernetwork");
  }

 private:
  std::size_t add(std::string role, nn::DenseNet net) {
    roles.push_back(std::move(role));
    nets.push_back(std::move(net));
    return nets.size() - 1;
  }
};

/// Copies all parameter values of src into dst (target-network sync).
inline void snapshot_into(const Assembly& src, Assembly& dst) {
  if (src.nets.size() != dst.nets.size() || src.roles != dst.roles)
    throw ArchitectureMismatch("snapshot_into: assemblies differ");
  for (std::size_t k = 0; k < src.nets.size(); ++k) nn::snapshot_into(src.nets[k], dst.nets[k]);
}

// ---------------------------------------------------------------------------
// Single-sample evaluation
// ---------------------------------------------------------------------------

struct AgentOutputs {
  Vector trunk;  // last hidden layer
  Vector q;      // Q_i(tau_i, .)
  Vector hv;     // h_V,i(tau_i); empty for VDN/QMIX
};

inline void check_obs(const Assembly& a, const JointObservation& obs) {
  if (obs.rows() != a.shape.obs_dim || obs.cols() != a.shape.n_agents)
    throw DimensionError("joint observation must be " + std::to_string(a.shape.obs_dim) + "x" +
                         std::to_string(a.shape.n_agents));
}

/// One forward pass per agent.
inline std::vector<AgentOutputs> individual_q(const Assembly& a, const JointObservation& obs) {
  check_obs(a, obs);
  std::vector<AgentOutputs> out;
  out.reserve(static_cast<std::size_t>(a.n_agents()));
  for (int i = 0; i < a.n_agents(); ++i) {
    const auto& s = a.agent[static_cast<std::size_t>(i)];
    AgentOutputs o;
    o.trunk = a.net(s.trunk).evaluate(Vector(obs.col(i)));
    o.q = a.net(s.q).evaluate(o.trunk);
    if (s.hv != kNoSlot) o.hv = a.net(s.hv).evaluate(o.trunk);
    out.push_back(std::move(o));
  }
  return out;
}

/// Row block of the hq head for one action: relu(W[a] * trunk + b[a]).
inline Vector hq_feature(const Assembly& a, int agent, const Vector& trunk, int action) {
  const auto& head = a.net(a.agent[static_cast<std::size_t>(agent)].hq).layers().front();
  const int w = a.feature_width;
  Vector z = head.weight.values.middleRows(static_cast<Eigen::Index>(action) * w, w) * trunk +
             head.bias.values.col(0).segment(static_cast<Eigen::Index>(action) * w, w);
  return z.cwiseMax(0.0);
}

/// Lowest index wins ties.
inline int argmax(const Eigen::Ref<const Vector>& v) {
  int best = 0;
  for (Eigen::Index k = 1; k < v.size(); ++k)
    if (v(k) > v(best)) best = static_cast<int>(k);
  return best;
}

inline std::vector<int> greedy_from(const std::vector<AgentOutputs>& outs) {
  std::vector<int> u;
  u.reserve(outs.size());
  for (const auto& o : outs) u.push_back(argmax(o.q));
  return u;
}

inline std::vector<int> greedy_joint(const Assembly& a, const JointObservation& obs) {
  return greedy_from(individual_q(a, obs));
}

/// Each agent independently explores with probability epsilon.
inline std::vector<int> eps_greedy(const Assembly& a, const JointObservation& obs, double epsilon, Rng& rng) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw RangeError("epsilon must lie in [0, 1]");
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, a.n_actions() - 1);
  std::vector<int> u(static_cast<std::size_t>(a.n_agents()), -1);
  bool need_greedy = false;
  for (auto& ui : u) {
    if (coin(rng) < epsilon)
      ui = pick(rng);
    else
      need_greedy = true;
  }
  if (need_greedy) {
    const auto g = greedy_joint(a, obs);
    for (std::size_t i = 0; i < u.size(); ++i)
      if (u[i] < 0) u[i] = g[i];
  }
  return u;
}

inline double vdn_qjt(std::span<const double> q_selected) {
  double s = 0.0;
  for (double q : q_selected) s += q;
  return s;
}

inline Vector joint_state(const JointObservation& obs) {
  return Eigen::Map<const Vector>(obs.data(), obs.size());
}

/// Monotone mixing of per-agent values. Hypernetwork outputs are raw; the
/// weights pass through abs(). w1 is laid out agent-major (i * width + m).
inline double qmix_mix(const Eigen::Ref<const Vector>& w1_raw, const Eigen::Ref<const Vector>& b1,
                       const Eigen::Ref<const Vector>& w2_raw, double b2, std::span<const double> q) {
  const Eigen::Index m = b1.size();
  Vector pre = b1;
  for (std::size_t i = 0; i < q.size(); ++i)
    pre += w1_raw.segment(static_cast<Eigen::Index>(i) * m, m).cwiseAbs() * q[i];
  return w2_raw.cwiseAbs().dot(pre.cwiseMax(0.0)) + b2;
}

inline double qmix_qjt(const Assembly& a, std::span<const double> q_selected, const JointObservation& obs) {
  if (a.algo != Algo::qmix) throw Error("qmix_qjt: assembly has no mixer");
  check_obs(a, obs);
  if (static_cast<int>(q_selected.size()) != a.n_agents()) throw DimensionError("qmix_qjt: one value per agent");
  const Vector s = joint_state(obs);
  return qmix_mix(a.net(a.hyper_w1).evaluate(s), a.net(a.hyper_b1).evaluate(s), a.net(a.hyper_w2).evaluate(s),
                  a.net(a.hyper_b2).evaluate(s)(0), q_selected);
}

inline double qtran_qjt(const Assembly& a, const Vector& hq_sum) {
  if (a.joint == kNoSlot) throw Error("qtran_qjt: assembly has no joint network");
  return a.net(a.joint).evaluate(hq_sum)(0);
}

inline double qtran_vjt(const Assembly& a, const Vector& hv_sum) {
  if (a.value == kNoSlot) throw Error("qtran_vjt: assembly has no state-value network");
  return a.net(a.value).evaluate(hv_sum)(0);
}

inline Vector hv_sum(const std::vector<AgentOutputs>& outs) {
  Vector s = Vector::Zero(outs.front().hv.size());
  for (const auto& o : outs) s += o.hv;
  return s;
}

inline Vector hq_sum(const Assembly& a, const std::vector<AgentOutputs>& outs, std::span<const int> u) {
  Vector s = Vector::Zero(a.feature_width);
  for (int i = 0; i < a.n_agents(); ++i) s += hq_feature(a, i, outs[static_cast<std::size_t>(i)].trunk, u[static_cast<std::size_t>(i)]);
  return s;
}

/// Q'_jt(tau, u) = sum_i Q_i(tau_i, u_i).
inline double transformed_qjt(const std::vector<AgentOutputs>& outs, std::span<const int> u) {
  double s = 0.0;
  for (std::size_t i = 0; i < outs.size(); ++i) s += outs[i].q(u[i]);
  return s;
}

struct CounterfactualColumns {
  std::vector<Vector> qjt;     // qjt[i](a) = Q_jt(tau, a, u_-i)
  std::vector<Vector> qprime;  // qprime[i](a) = Q_i(tau_i, a) + sum_{j != i} Q_j(tau_j, u_j)
};

inline CounterfactualColumns counterfactual_columns(const Assembly& a, const JointObservation& obs,
                                                    std::span<const int> u) {
  if (a.algo != Algo::qtran_alt) throw Error("counterfactual_columns: assembly has no counterfactual networks");
  envs::check_actions(u, a.n_agents(), a.n_actions());
  const auto outs = individual_q(a, obs);
  std::vector<Vector> feats;
  Vector total = Vector::Zero(a.feature_width);
  for (int i = 0; i < a.n_agents(); ++i) {
    feats.push_back(hq_feature(a, i, outs[static_cast<std::size_t>(i)].trunk, u[static_cast<std::size_t>(i)]));
    total += feats.back();
  }
  const double qprime_total = transformed_qjt(outs, u);
  CounterfactualColumns cols;
  for (int i = 0; i < a.n_agents(); ++i) {
    const auto ui = static_cast<std::size_t>(i);
    Vector x(2 * a.feature_width);
    x << outs[ui].hv, total - feats[ui];
    cols.qjt.push_back(a.net(a.counterfactual[ui]).evaluate(x));
    const double others = qprime_total - outs[ui].q(u[ui]);
    cols.qprime.push_back(outs[ui].q.array() + others);
  }
  return cols;
}

/// The learned Q_jt(tau, u). VDN: additive sum; QMIX: mixer; QTRAN-base: joint
/// network; QTRAN-alt: mean over agents of the counterfactual entry at u_i.
inline double joint_value(const Assembly& a, const JointObservation& obs, std::span<const int> u) {
  envs::check_actions(u, a.n_agents(), a.n_actions());
  const auto outs = individual_q(a, obs);
  std::vector<double> q_sel;
  for (std::size_t i = 0; i < outs.size(); ++i) q_sel.push_back(outs[i].q(u[i]));
  switch (a.algo) {
    case Algo::vdn: return vdn_qjt(q_sel);
    case Algo::qmix: return qmix_qjt(a, q_sel, obs);
    case Algo::qtran_base: return qtran_qjt(a, hq_sum(a, outs, u));
    case Algo::qtran_alt: {
      const auto cols = counterfactual_columns(a, obs, u);
      double s = 0.0;
      for (std::size_t i = 0; i < cols.qjt.size(); ++i) s += cols.qjt[i](u[i]);
      return s / static_cast<double>(cols.qjt.size());
    }
  }
  return 0.0;
}

/// V_jt(tau) for QTRAN assemblies, nullopt otherwise.
inline std::optional<double> state_value(const Assembly& a, const JointObservation& obs) {
  if (a.value == kNoSlot) return std::nullopt;
  return qtran_vjt(a, hv_sum(individual_q(a, obs)));
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   qfactor-assembly 1
//   algo <name>
//   shape <n_agents> <n_actions> <obs_dim>
//   widths <feature_width> <mixer_width> <shared 0|1>
//   manifest <count>
//   <role>          (one per line, in storage order)
//   net <role>
//   <densenet block, see nn::write_densenet>
//   ...
// ---------------------------------------------------------------------------

inline void write_assembly(std::ostream& os, const Assembly& a) {
  os << "qfactor-assembly 1\n";
  os << "algo " << to_string(a.algo) << '\n';
  os << "shape " << a.shape.n_agents << ' ' << a.shape.n_actions << ' ' << a.shape.obs_dim << '\n';
  os << "widths " << a.feature_width << ' ' << a.mixer_width << ' ' << (a.shared_agents ? 1 : 0) << '\n';
  os << "manifest " << a.roles.size() << '\n';
  for (const auto& r : a.roles) os << r << '\n';
  for (std::size_t k = 0; k < a.nets.size(); ++k) {
    os << "net " << a.roles[k] << '\n';
    nn::write_densenet(os, a.nets[k]);
  }
}

inline Assembly read_assembly(std::istream& is) {
  std::string tag, name;
  int version = 0;
  if (!(is >> tag >> version) || tag != "qfactor-assembly" || version != 1)
    throw ParseError("checkpoint: expected 'qfactor-assembly 1' header");
  Assembly a;
  if (!(is >> tag >> name) || tag != "algo") throw ParseError("checkpoint: expected 'algo'");
  a.algo = algo_from_string(name);
  if (!(is >> tag >> a.shape.n_agents >> a.shape.n_actions >> a.shape.obs_dim) || tag != "shape")
    throw ParseError("checkpoint: expected 'shape'");
  int shared = 0;
  if (!(is >> tag >> a.feature_width >> a.mixer_width >> shared) || tag != "widths")
    throw ParseError("checkpoint: expected 'widths'");
  a.shared_agents = shared != 0;
  std::size_t count = 0;
  if (!(is >> tag >> count) || tag != "manifest") throw ParseError("checkpoint: expected 'manifest'");
  for (std::size_t k = 0; k < count; ++k) {
    if (!(is >> name)) throw ParseError("checkpoint: truncated manifest");
    a.roles.push_back(name);
  }
  for (std::size_t k = 0; k < count; ++k) {
    if (!(is >> tag >> name) || tag != "net" || name != a.roles[k])
      throw ParseError("checkpoint: expected 'net " + a.roles[k] + "'");
    a.nets.push_back(nn::read_densenet(is));
  }
  a.bind_roles();
  return a;
}

inline void save_assembly(const std::string& path, const Assembly& a) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write checkpoint '" + path + "'");
  write_assembly(f, a);
}

inline Assembly load_assembly(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open checkpoint '" + path + "'");
  return read_assembly(f);
}

}  // namespace qfactor
