#pragma once

// Dense feed-forward networks with hand-written backpropagation and Adam.
//
// Batches are column-major: an input matrix of shape (input_dim x batch)
// produces an output of shape (output_dim x batch).

#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "qfactor/error.hpp"

namespace qfactor {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Rng = std::mt19937_64;

namespace nn {

enum class Activation { identity, relu };

inline const char* to_string(Activation a) {
  return a == Activation::relu ? "relu" : "identity";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  throw ParseError("unknown activation '" + s + "'");
}

/// A trainable tensor together with its Adam moments.
struct Param {
  Matrix values;
  Matrix adam_m;
  Matrix adam_v;
  std::uint64_t step_count = 0;

  Param() = default;
  explicit Param(Matrix v)
      : values(std::move(v)),
        adam_m(Matrix::Zero(values.rows(), values.cols())),
        adam_v(Matrix::Zero(values.rows(), values.cols())) {}
};

struct Layer {
  Param weight;  // out x in
  Param bias;    // out x 1
  Activation activation = Activation::identity;

  Eigen::Index in_dim() const { return weight.values.cols(); }
  Eigen::Index out_dim() const { return weight.values.rows(); }
};

/// Activations recorded by one forward pass; activations[0] is the input and
/// activations[l + 1] the output of layer l.
struct GradTape {
  std::vector<Matrix> activations;

  const Matrix& output() const { return activations.back(); }
};

/// Gradient buffers aligned with DenseNet::params(): W0, b0, W1, b1, ...
using Gradients = std::vector<Matrix>;

struct AdamConfig {
  double lr = 0.0005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class DenseNet {
 public:
  DenseNet() = default;
  explicit DenseNet(std::vector<Layer> layers) : layers_(std::move(layers)) {
    for (std::size_t l = 1; l < layers_.size(); ++l) {
      if (layers_[l].in_dim() != layers_[l - 1].out_dim()) {
        throw DimensionError("layer " + std::to_string(l) + " expects " +
                             std::to_string(layers_[l].in_dim()) + " inputs, previous layer emits " +
                             std::to_string(layers_[l - 1].out_dim()));
      }
    }
  }

  /// Hidden layers use `hidden_activation`, the last layer `output_activation`.
  /// Weights are drawn uniformly from [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases are zero.
  static DenseNet make(int input_dim, const std::vector<int>& hidden, int output_dim, Rng& rng,
                       Activation hidden_activation = Activation::relu,
                       Activation output_activation = Activation::identity) {
    if (input_dim <= 0 || output_dim <= 0) throw DimensionError("network dimensions must be positive");
    std::vector<Layer> layers;
    int fan_in = input_dim;
    auto add = [&](int out, Activation act) {
      if (out <= 0) throw DimensionError("layer width must be positive");
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      Matrix w(out, fan_in);
      for (Eigen::Index c = 0; c < w.cols(); ++c)
        for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = dist(rng);
      layers.push_back(Layer{Param(std::move(w)), Param(Matrix::Zero(out, 1)), act});
      fan_in = out;
    };
    for (int h : hidden) add(h, hidden_activation);
    add(output_dim, output_activation);
    return DenseNet(std::move(layers));
  }

  Eigen::Index input_dim() const { return layers_.empty() ? 0 : layers_.front().in_dim(); }
  Eigen::Index output_dim() const { return layers_.empty() ? 0 : layers_.back().out_dim(); }
  std::size_t num_layers() const { return layers_.size(); }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    out.reserve(2 * layers_.size());
    for (auto& layer : layers_) {
      out.push_back(&layer.weight);
      out.push_back(&layer.bias);
    }
    return out;
  }

  std::vector<const Param*> params() const {
    std::vector<const Param*> out;
    out.reserve(2 * layers_.size());
    for (const auto& layer : layers_) {
      out.push_back(&layer.weight);
      out.push_back(&layer.bias);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : params()) n += static_cast<std::size_t>(p->values.size());
    return n;
  }

  Gradients zero_gradients() const {
    Gradients g;
    g.reserve(2 * layers_.size());
    for (const auto& layer : layers_) {
      g.push_back(Matrix::Zero(layer.weight.values.rows(), layer.weight.values.cols()));
      g.push_back(Matrix::Zero(layer.bias.values.rows(), 1));
    }
    return g;
  }

  GradTape forward(const Matrix& x) const {
    if (x.rows() != input_dim()) {
      throw DimensionError("forward: input has " + std::to_string(x.rows()) + " rows, network expects " +
                           std::to_string(input_dim()));
    }
    GradTape tape;
    tape.activations.reserve(layers_.size() + 1);
    tape.activations.push_back(x);
    for (const auto& layer : layers_) {
      Matrix z = layer.weight.values * tape.activations.back();
      z.colwise() += layer.bias.values.col(0);
      if (layer.activation == Activation::relu) z = z.cwiseMax(0.0);
      tape.activations.push_back(std::move(z));
    }
    return tape;
  }

  /// Forward pass without keeping intermediate activations.
  Matrix evaluate(const Matrix& x) const {
    if (x.rows() != input_dim()) {
      throw DimensionError("evaluate: input has " + std::to_string(x.rows()) + " rows, network expects " +
                           std::to_string(input_dim()));
    }
    Matrix a = x;
    for (const auto& layer : layers_) {
      Matrix z = layer.weight.values * a;
      z.colwise() += layer.bias.values.col(0);
      if (layer.activation == Activation::relu) z = z.cwiseMax(0.0);
      a = std::move(z);
    }
    return a;
  }

  Vector evaluate(const Vector& x) const { return evaluate(Matrix(x)).col(0); }

  /// Accumulates dL/dparams into `grads` (which must come from zero_gradients())
  /// and optionally writes dL/dx into `dx`.
  void backward(const GradTape& tape, const Matrix& dy, Gradients& grads, Matrix* dx = nullptr) const {
    if (tape.activations.size() != layers_.size() + 1) {
      throw ArchitectureMismatch("backward: tape has " + std::to_string(tape.activations.size()) +
                                 " activations for a " + std::to_string(layers_.size()) + "-layer network");
    }
    if (grads.size() != 2 * layers_.size()) throw ArchitectureMismatch("backward: gradient buffer misaligned");
    if (dy.rows() != output_dim() || dy.cols() != tape.output().cols()) {
      throw DimensionError("backward: upstream gradient shape does not match the forward output");
    }
    Matrix delta = dy;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const auto& layer = layers_[l];
      const Matrix& out = tape.activations[l + 1];
      const Matrix& in = tape.activations[l];
      if (out.rows() != layer.out_dim() || in.rows() != layer.in_dim()) {
        throw ArchitectureMismatch("backward: tape does not belong to this network");
      }
      if (layer.activation == Activation::relu) delta = delta.cwiseProduct((out.array() > 0.0).cast<double>().matrix());
      grads[2 * l].noalias() += delta * in.transpose();
      grads[2 * l + 1] += delta.rowwise().sum();
      if (l > 0 || dx != nullptr) {
        Matrix prev = layer.weight.values.transpose() * delta;
        delta = std::move(prev);
      }
    }
    if (dx != nullptr) *dx = std::move(delta);
  }

  Gradients backward(const GradTape& tape, const Matrix& dy) const {
    Gradients g = zero_gradients();
    backward(tape, dy, g);
    return g;
  }

  bool same_architecture(const DenseNet& other) const {
    if (layers_.size() != other.layers_.size()) return false;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      if (layers_[l].in_dim() != other.layers_[l].in_dim() || layers_[l].out_dim() != other.layers_[l].out_dim() ||
          layers_[l].activation != other.layers_[l].activation)
        return false;
    }
    return true;
  }

 private:
  std::vector<Layer> layers_;
};

inline bool all_finite(const Gradients& grads) {
  for (const auto& g : grads)
    if (!g.allFinite()) return false;
  return true;
}

/// One Adam update of a single parameter.
inline void adam_step(Param& p, const Matrix& grad, const AdamConfig& cfg) {
  if (grad.rows() != p.values.rows() || grad.cols() != p.values.cols()) {
    throw DimensionError("adam_step: gradient shape does not match parameter");
  }
  if (!grad.allFinite()) throw NonFiniteError("adam_step: non-finite gradient");
  ++p.step_count;
  p.adam_m = cfg.beta1 * p.adam_m + (1.0 - cfg.beta1) * grad;
  p.adam_v = cfg.beta2 * p.adam_v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
  const double t = static_cast<double>(p.step_count);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  p.values.array() -= cfg.lr * (p.adam_m.array() / c1) / ((p.adam_v.array() / c2).sqrt() + cfg.eps);
}

/// Applies Adam to every parameter of `net`. All gradients are checked for
/// finiteness before any parameter is touched.
inline void adam_step(DenseNet& net, const Gradients& grads, const AdamConfig& cfg) {
  auto ps = net.params();
  if (ps.size() != grads.size()) throw ArchitectureMismatch("adam_step: gradient buffer misaligned");
  if (!all_finite(grads)) throw NonFiniteError("adam_step: non-finite gradient");
  for (std::size_t k = 0; k < ps.size(); ++k) adam_step(*ps[k], grads[k], cfg);
}

/// Copies parameter values (not optimizer state) from src into dst.
inline void snapshot_into(const DenseNet& src, DenseNet& dst) {
  if (!src.same_architecture(dst)) throw ArchitectureMismatch("snapshot_into: architectures differ");
  for (std::size_t l = 0; l < src.num_layers(); ++l) {
    dst.layers()[l].weight.values = src.layers()[l].weight.values;
    dst.layers()[l].bias.values = src.layers()[l].bias.values;
  }
}

// ---------------------------------------------------------------------------
// Text checkpoint format
//
//   densenet <num_layers>
//   layer <out> <in> <relu|identity>
//   <out*in weight values, row-major, one line>
//   <out bias values, one line>
//   ... repeated per layer
//
// Values are printed with 17 significant digits so a reload is bit-exact.
// ---------------------------------------------------------------------------

inline void write_densenet(std::ostream& os, const DenseNet& net) {
  os << "densenet " << net.num_layers() << '\n';
  os << std::setprecision(17);
  for (const auto& layer : net.layers()) {
    const Matrix& w = layer.weight.values;
    os << "layer " << w.rows() << ' ' << w.cols() << ' ' << to_string(layer.activation) << '\n';
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) os << (r + c == 0 ? "" : " ") << w(r, c);
    os << '\n';
    for (Eigen::Index r = 0; r < layer.bias.values.rows(); ++r) os << (r == 0 ? "" : " ") << layer.bias.values(r, 0);
    os << '\n';
  }
}

inline DenseNet read_densenet(std::istream& is) {
  std::string tag;
  std::size_t n_layers = 0;
  if (!(is >> tag >> n_layers) || tag != "densenet") throw ParseError("checkpoint: expected 'densenet <layers>'");
  std::vector<Layer> layers;
  for (std::size_t l = 0; l < n_layers; ++l) {
    Eigen::Index rows = 0, cols = 0;
    std::string act;
    if (!(is >> tag >> rows >> cols >> act) || tag != "layer" || rows <= 0 || cols <= 0) {
      throw ParseError("checkpoint: bad header for layer " + std::to_string(l));
    }
    Matrix w(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c)
        if (!(is >> w(r, c))) throw ParseError("checkpoint: truncated weights in layer " + std::to_string(l));
    Matrix b(rows, 1);
    for (Eigen::Index r = 0; r < rows; ++r)
      if (!(is >> b(r, 0))) throw ParseError("checkpoint: truncated bias in layer " + std::to_string(l));
    layers.push_back(Layer{Param(std::move(w)), Param(std::move(b)), activation_from_string(act)});
  }
  return DenseNet(std::move(layers));
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t failures = 0;
  bool ok() const { return failures == 0; }
};

/// Two gradient entries agree when |a - n| <= rel_tol * max(|a|, |n|) or
/// |a - n| <= abs_floor.
inline bool gradients_agree(double analytic, double numeric, double rel_tol, double abs_floor) {
  const double diff = std::abs(analytic - numeric);
  if (diff <= abs_floor) return true;
  return diff <= rel_tol * std::max(std::abs(analytic), std::abs(numeric));
}

/// Central differences of `loss` with respect to every entry of `params`,
/// compared against `analytic` (aligned with params).
inline GradCheckResult check_gradients(const std::vector<Param*>& params, const std::vector<Matrix>& analytic,
                                       const std::function<double()>& loss, double h = 1e-5,
                                       double rel_tol = 1e-4, double abs_floor = 1e-7) {
  if (params.size() != analytic.size()) throw ArchitectureMismatch("check_gradients: misaligned buffers");
  GradCheckResult res;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& v = params[k]->values;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double saved = v.data()[i];
      v.data()[i] = saved + h;
      const double plus = loss();
      v.data()[i] = saved - h;
      const double minus = loss();
      v.data()[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic[k].data()[i];
      const double diff = std::abs(a - numeric);
      res.max_abs_error = std::max(res.max_abs_error, diff);
      const double scale = std::max(std::abs(a), std::abs(numeric));
      if (scale > 0.0) res.max_rel_error = std::max(res.max_rel_error, diff / scale);
      ++res.checked;
      if (!gradients_agree(a, numeric, rel_tol, abs_floor)) ++res.failures;
    }
  }
  return res;
}

/// Checks DenseNet::backward for the linear functional L = sum(upstream .* net(x)).
inline GradCheckResult check_gradients(DenseNet& net, const Matrix& x, const Matrix& upstream, double h = 1e-5,
                                       double rel_tol = 1e-4, double abs_floor = 1e-7) {
  const auto tape = net.forward(x);
  const Gradients analytic = net.backward(tape, upstream);
  auto loss = [&] { return (net.evaluate(x).array() * upstream.array()).sum(); };
  return check_gradients(net.params(), analytic, loss, h, rel_tol, abs_floor);
}

}  // namespace nn
}  // namespace qfactor
