#pragma once

// Multilayer perceptron with hand-written reverse mode: gradients with
// respect to parameters (training) and to inputs (optimization).
//
// Batches are column-major: a D x B matrix holds B samples as columns.

#include "gradpie/common.hpp"

#include <unsupported/Eigen/SpecialFunctions>

#include <nlohmann/json.hpp>

#include <random>
#include <string>
#include <utility>
#include <vector>

namespace gradpie {

enum class Activation { gelu, identity };

inline std::string to_string(Activation a) { return a == Activation::gelu ? "gelu" : "identity"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "identity" || s == "linear") return Activation::identity;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

namespace detail {
inline constexpr double kInvSqrt2 = 0.70710678118654752440;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace detail

/// Exact GELU, x * Phi(x), with Phi the standard normal CDF.
template <typename S>
S gelu(S x) {
  return x * S(0.5) * (S(1) + std::erf(x * S(detail::kInvSqrt2)));
}

/// d/dx gelu(x) = Phi(x) + x * phi(x).
template <typename S>
S gelu_grad(S x) {
  const S cdf = S(0.5) * (S(1) + std::erf(x * S(detail::kInvSqrt2)));
  const S pdf = S(detail::kInvSqrt2Pi) * std::exp(S(-0.5) * x * x);
  return cdf + x * pdf;
}

namespace detail {

template <typename S>
MatrixT<S> gelu_batch(const MatrixT<S>& u) {
  const auto a = u.array();
  return (a * S(0.5) * (S(1) + (a * S(kInvSqrt2)).erf())).matrix();
}

template <typename S>
MatrixT<S> gelu_grad_batch(const MatrixT<S>& u) {
  const auto a = u.array();
  const auto cdf = S(0.5) * (S(1) + (a * S(kInvSqrt2)).erf());
  const auto pdf = S(kInvSqrt2Pi) * (S(-0.5) * a.square()).exp();
  return (cdf + a * pdf).matrix();
}

}  // namespace detail

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("adam: learning_rate must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw std::invalid_argument("adam: beta1 must be in [0,1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("adam: beta2 must be in [0,1)");
    if (!(epsilon > 0.0)) throw std::invalid_argument("adam: epsilon must be > 0");
  }
};

/// One bias-corrected Adam update. `step` is the 1-based count after this update.
template <typename P, typename G, typename M, typename V>
void adam_update(Eigen::DenseBase<P>& param, const Eigen::DenseBase<G>& grad, Eigen::DenseBase<M>& m,
                 Eigen::DenseBase<V>& v, long step, const AdamConfig& cfg) {
  using S = typename P::Scalar;
  const S b1 = S(cfg.beta1);
  const S b2 = S(cfg.beta2);
  m.derived().array() = b1 * m.derived().array() + (S(1) - b1) * grad.derived().array();
  v.derived().array() = b2 * v.derived().array() + (S(1) - b2) * grad.derived().array().square();
  const S c1 = S(1) - S(std::pow(cfg.beta1, double(step)));
  const S c2 = S(1) - S(std::pow(cfg.beta2, double(step)));
  param.derived().array() -= S(cfg.learning_rate) * (m.derived().array() / c1) /
                             ((v.derived().array() / c2).sqrt() + S(cfg.epsilon));
}

/// Adam state for a single free vector (used when descending on inputs).
struct VectorAdam {
  Vector m;
  Vector v;
  long step = 0;

  explicit VectorAdam(Index dim = 0) : m(Vector::Zero(dim)), v(Vector::Zero(dim)) {}

  void apply(Vector& x, const Vector& grad, const AdamConfig& cfg) {
    require_dim(grad.size(), x.size(), "adam gradient");
    if (m.size() != x.size()) *this = VectorAdam(x.size());
    if (!all_finite(grad)) throw NonFiniteError("adam: non-finite input gradient");
    ++step;
    adam_update(x, grad, m, v, step, cfg);
  }
};

struct MlpArchitecture {
  std::vector<Index> layer_dims;   // input, hidden..., output
  Activation activation = Activation::gelu;
  std::vector<bool> layernorm;     // one flag per hidden layer
  double layernorm_epsilon = 1e-5;

  MlpArchitecture() = default;
  MlpArchitecture(std::vector<Index> dims, Activation act = Activation::gelu, bool use_layernorm = false)
      : layer_dims(std::move(dims)), activation(act) {
    const auto hidden = layer_dims.size() >= 2 ? layer_dims.size() - 2 : 0;
    layernorm.assign(hidden, use_layernorm);
  }

  std::size_t num_layers() const { return layer_dims.size() - 1; }
  Index input_dim() const { return layer_dims.front(); }
  Index output_dim() const { return layer_dims.back(); }

  void validate() const {
    if (layer_dims.size() < 2) throw std::invalid_argument("mlp: need at least input and output dims");
    for (auto d : layer_dims) {
      if (d < 1) throw std::invalid_argument("mlp: layer dims must be positive");
    }
    if (layernorm.size() != layer_dims.size() - 2) {
      throw std::invalid_argument("mlp: one layernorm flag per hidden layer required");
    }
  }
};

/// Parameters of one affine layer plus its optional LayerNorm gain/offset.
/// The same struct carries gradients and Adam moments.
template <typename S>
struct LayerTensors {
  MatrixT<S> weight;  // out x in
  VectorT<S> bias;
  VectorT<S> gain;    // empty when LayerNorm is off
  VectorT<S> offset;

  LayerTensors zeros_like() const {
    return {MatrixT<S>::Zero(weight.rows(), weight.cols()), VectorT<S>::Zero(bias.size()),
            VectorT<S>::Zero(gain.size()), VectorT<S>::Zero(offset.size())};
  }
};

template <typename S>
using ParamTensors = std::vector<LayerTensors<S>>;

template <typename S>
ParamTensors<S> zeros_like(const ParamTensors<S>& p) {
  ParamTensors<S> out;
  out.reserve(p.size());
  for (const auto& l : p) out.push_back(l.zeros_like());
  return out;
}

template <typename S>
struct MlpAdamState {
  ParamTensors<S> m;
  ParamTensors<S> v;
  long step = 0;
};

template <typename S>
class Mlp {
 public:
  using Scalar = S;

  Mlp() = default;

  /// Glorot-uniform weights, zero biases, unit gains, zero offsets.
  Mlp(MlpArchitecture arch, std::uint64_t seed) : arch_(std::move(arch)) {
    arch_.validate();
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l < arch_.num_layers(); ++l) {
      const Index in = arch_.layer_dims[l];
      const Index out = arch_.layer_dims[l + 1];
      const double limit = std::sqrt(6.0 / double(in + out));
      std::uniform_real_distribution<double> dist(-limit, limit);
      LayerTensors<S> layer;
      layer.weight.resize(out, in);
      for (Index r = 0; r < out; ++r) {
        for (Index c = 0; c < in; ++c) layer.weight(r, c) = S(dist(rng));
      }
      layer.bias = VectorT<S>::Zero(out);
      if (has_layernorm(l)) {
        layer.gain = VectorT<S>::Ones(out);
        layer.offset = VectorT<S>::Zero(out);
      }
      params_.push_back(std::move(layer));
    }
    reset_optimizer();
  }

  static Mlp zeros(MlpArchitecture arch) {
    Mlp m(std::move(arch), 0);
    for (auto& l : m.params_) {
      l.weight.setZero();
      l.bias.setZero();
      l.gain.setZero();
      l.offset.setZero();
    }
    return m;
  }

  const MlpArchitecture& architecture() const { return arch_; }
  Index input_dim() const { return arch_.input_dim(); }
  Index output_dim() const { return arch_.output_dim(); }
  std::size_t num_layers() const { return params_.size(); }
  bool has_layernorm(std::size_t layer) const {
    return layer + 1 < arch_.num_layers() && arch_.layernorm[layer];
  }

  ParamTensors<S>& params() { return params_; }
  const ParamTensors<S>& params() const { return params_; }
  MlpAdamState<S>& optimizer_state() { return adam_; }
  const MlpAdamState<S>& optimizer_state() const { return adam_; }

  void reset_optimizer() {
    adam_.m = zeros_like(params_);
    adam_.v = zeros_like(params_);
    adam_.step = 0;
  }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& l : params_) n += l.weight.size() + l.bias.size() + l.gain.size() + l.offset.size();
    return n;
  }

  template <typename T>
  Mlp<T> cast() const {
    Mlp<T> out;
    out.arch_ = arch_;
    auto conv = [](const ParamTensors<S>& src) {
      ParamTensors<T> dst;
      for (const auto& l : src) {
        dst.push_back({l.weight.template cast<T>(), l.bias.template cast<T>(), l.gain.template cast<T>(),
                       l.offset.template cast<T>()});
      }
      return dst;
    };
    out.params_ = conv(params_);
    out.adam_.m = conv(adam_.m);
    out.adam_.v = conv(adam_.v);
    out.adam_.step = adam_.step;
    return out;
  }

 private:
  template <typename>
  friend class Mlp;

  MlpArchitecture arch_;
  ParamTensors<S> params_;
  MlpAdamState<S> adam_;
};

/// Intermediate values of a batch forward pass, kept for backprop.
template <typename S>
struct ForwardTrace {
  std::vector<MatrixT<S>> inputs;      // input to each affine layer
  std::vector<MatrixT<S>> pre_act;     // activation argument per hidden layer
  std::vector<MatrixT<S>> normalized;  // LayerNorm xhat (empty when off)
  std::vector<RowVectorT<S>> inv_std;
  MatrixT<S> output;
};

template <typename S>
ForwardTrace<S> forward_trace(const Mlp<S>& model, const MatrixT<S>& x) {
  require_dim(x.rows(), model.input_dim(), "mlp forward input");
  const auto& params = model.params();
  const auto& arch = model.architecture();
  const std::size_t L = params.size();
  ForwardTrace<S> tr;
  tr.inputs.reserve(L);
  tr.pre_act.resize(L - 1);
  tr.normalized.resize(L - 1);
  tr.inv_std.resize(L - 1);

  MatrixT<S> a = x;
  for (std::size_t l = 0; l < L; ++l) {
    const auto& p = params[l];
    MatrixT<S> z = p.weight * a;
    z.colwise() += p.bias;
    tr.inputs.push_back(std::move(a));
    if (l + 1 == L) {
      tr.output = std::move(z);
      break;
    }
    if (model.has_layernorm(l)) {
      const RowVectorT<S> mean = z.colwise().mean();
      z.rowwise() -= mean;
      const RowVectorT<S> var = z.array().square().colwise().mean().matrix();
      const RowVectorT<S> inv = (var.array() + S(arch.layernorm_epsilon)).rsqrt().matrix();
      z.array().rowwise() *= inv.array();
      tr.normalized[l] = z;
      tr.inv_std[l] = inv;
      z.array().colwise() *= p.gain.array();
      z.colwise() += p.offset;
    }
    a = arch.activation == Activation::gelu ? detail::gelu_batch<S>(z) : z;
    tr.pre_act[l] = std::move(z);
  }
  return tr;
}

/// Reverse pass. Accumulates parameter gradients into `grads` when non-null and
/// returns the gradient with respect to the batch inputs.
template <typename S>
MatrixT<S> backpropagate(const Mlp<S>& model, const ForwardTrace<S>& tr, const MatrixT<S>& upstream,
                         ParamTensors<S>* grads) {
  require_dim(upstream.rows(), model.output_dim(), "mlp upstream gradient rows");
  require_dim(upstream.cols(), tr.output.cols(), "mlp upstream gradient cols");
  const auto& params = model.params();
  const auto& arch = model.architecture();
  MatrixT<S> delta = upstream;
  for (std::size_t li = params.size(); li-- > 0;) {
    const auto& p = params[li];
    if (li + 1 < params.size()) {
      if (arch.activation == Activation::gelu) {
        delta.array() *= detail::gelu_grad_batch<S>(tr.pre_act[li]).array();
      }
      if (model.has_layernorm(li)) {
        const auto& xhat = tr.normalized[li];
        if (grads) {
          (*grads)[li].gain.noalias() += (delta.array() * xhat.array()).rowwise().sum().matrix();
          (*grads)[li].offset.noalias() += delta.rowwise().sum();
        }
        MatrixT<S> dxhat = (delta.array().colwise() * p.gain.array()).matrix();
        const RowVectorT<S> mean_d = dxhat.colwise().mean();
        const RowVectorT<S> mean_dx = (dxhat.array() * xhat.array()).colwise().mean().matrix();
        dxhat.rowwise() -= mean_d;
        dxhat.array() -= xhat.array().rowwise() * mean_dx.array();
        dxhat.array().rowwise() *= tr.inv_std[li].array();
        delta = std::move(dxhat);
      }
    }
    if (grads) {
      (*grads)[li].weight.noalias() += delta * tr.inputs[li].transpose();
      (*grads)[li].bias.noalias() += delta.rowwise().sum();
    }
    delta = p.weight.transpose() * delta;
  }
  return delta;
}

template <typename S>
MatrixT<S> forward_batch(const Mlp<S>& model, const MatrixT<S>& x) {
  return forward_trace(model, x).output;
}

template <typename S>
VectorT<S> forward(const Mlp<S>& model, const VectorT<S>& x) {
  require_dim(x.size(), model.input_dim(), "mlp forward input");
  MatrixT<S> batch = x;
  return forward_trace(model, batch).output.col(0);
}

/// Parameter gradients of sum_b upstream_b . F(x_b); the caller folds any
/// batch-mean factor into `upstream`.
template <typename S>
ParamTensors<S> backward_params(const Mlp<S>& model, const MatrixT<S>& x, const MatrixT<S>& upstream) {
  require_dim(upstream.cols(), x.cols(), "backward_params batch size");
  auto tr = forward_trace(model, x);
  ParamTensors<S> grads = zeros_like(model.params());
  backpropagate(model, tr, upstream, &grads);
  return grads;
}

/// Vector-Jacobian product upstream^T J[F](x), for each column of x.
template <typename S>
MatrixT<S> input_gradient_batch(const Mlp<S>& model, const MatrixT<S>& x, const MatrixT<S>& upstream) {
  require_dim(upstream.cols(), x.cols(), "input_gradient batch size");
  auto tr = forward_trace(model, x);
  return backpropagate<S>(model, tr, upstream, nullptr);
}

template <typename S>
VectorT<S> input_gradient(const Mlp<S>& model, const VectorT<S>& x, const VectorT<S>& upstream) {
  require_dim(x.size(), model.input_dim(), "input_gradient x");
  require_dim(upstream.size(), model.output_dim(), "input_gradient upstream");
  MatrixT<S> xb = x;
  MatrixT<S> ub = upstream;
  return input_gradient_batch(model, xb, ub).col(0);
}

template <typename S>
void adam_step(Mlp<S>& model, const ParamTensors<S>& grads, const AdamConfig& cfg) {
  cfg.validate();
  auto& params = model.params();
  if (grads.size() != params.size()) throw DimensionError("adam_step: gradient layer count mismatch");
  for (std::size_t l = 0; l < params.size(); ++l) {
    const auto& g = grads[l];
    const auto& p = params[l];
    if (g.weight.rows() != p.weight.rows() || g.weight.cols() != p.weight.cols() ||
        g.bias.size() != p.bias.size() || g.gain.size() != p.gain.size() ||
        g.offset.size() != p.offset.size()) {
      throw DimensionError("adam_step: gradient shape mismatch in layer " + std::to_string(l));
    }
    auto check = [l](const auto& t, const char* name) {
      if (!all_finite(t)) {
        throw NonFiniteError("adam_step: non-finite gradient in layer " + std::to_string(l) + " " + name);
      }
    };
    check(g.weight, "weight");
    check(g.bias, "bias");
    check(g.gain, "gain");
    check(g.offset, "offset");
  }
  auto& st = model.optimizer_state();
  const long step = ++st.step;
  for (std::size_t l = 0; l < params.size(); ++l) {
    auto& p = params[l];
    const auto& g = grads[l];
    adam_update(p.weight, g.weight, st.m[l].weight, st.v[l].weight, step, cfg);
    adam_update(p.bias, g.bias, st.m[l].bias, st.v[l].bias, step, cfg);
    if (p.gain.size() > 0) {
      adam_update(p.gain, g.gain, st.m[l].gain, st.v[l].gain, step, cfg);
      adam_update(p.offset, g.offset, st.m[l].offset, st.v[l].offset, step, cfg);
    }
  }
}

// ---- checkpoint ----

namespace detail {

template <typename Derived>
std::vector<double> row_major(const Eigen::MatrixBase<Derived>& m) {
  std::vector<double> out;
  out.reserve(std::size_t(m.size()));
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) out.push_back(double(m(r, c)));
  }
  return out;
}

template <typename S>
MatrixT<S> from_row_major(const nlohmann::json& j, Index rows, Index cols, const std::string& what) {
  const auto values = j.get<std::vector<double>>();
  if (Index(values.size()) != rows * cols) {
    throw DimensionError("checkpoint: " + what + " has " + std::to_string(values.size()) +
                         " values, expected " + std::to_string(rows * cols));
  }
  MatrixT<S> m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = S(values[std::size_t(r * cols + c)]);
  }
  return m;
}

}  // namespace detail

inline constexpr int kCheckpointVersion = 1;

template <typename S>
nlohmann::json to_json(const Mlp<S>& model) {
  const auto& arch = model.architecture();
  nlohmann::json j;
  j["format"] = "gradpie-mlp";
  j["version"] = kCheckpointVersion;
  j["scalar"] = sizeof(S) == 4 ? "float32" : "float64";
  j["layer_dims"] = arch.layer_dims;
  j["activation"] = to_string(arch.activation);
  j["layernorm"] = arch.layernorm;
  j["layernorm_epsilon"] = arch.layernorm_epsilon;
  auto& layers = j["layers"] = nlohmann::json::array();
  for (const auto& p : model.params()) {
    nlohmann::json l;
    l["weight"] = detail::row_major(p.weight);
    l["bias"] = detail::row_major(p.bias);
    if (p.gain.size() > 0) {
      l["gain"] = detail::row_major(p.gain);
      l["offset"] = detail::row_major(p.offset);
    }
    layers.push_back(std::move(l));
  }
  return j;
}

template <typename S>
Mlp<S> mlp_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "gradpie-mlp") throw std::invalid_argument("checkpoint: not a gradpie-mlp document");
  if (j.at("version").get<int>() != kCheckpointVersion) {
    throw std::invalid_argument("checkpoint: unsupported version " + j.at("version").dump());
  }
  MlpArchitecture arch;
  arch.layer_dims = j.at("layer_dims").get<std::vector<Index>>();
  arch.activation = parse_activation(j.at("activation").get<std::string>());
  arch.layernorm = j.at("layernorm").get<std::vector<bool>>();
  arch.layernorm_epsilon = j.value("layernorm_epsilon", 1e-5);
  arch.validate();
  Mlp<S> model(arch, 0);
  const auto& layers = j.at("layers");
  if (layers.size() != model.num_layers()) throw DimensionError("checkpoint: layer count mismatch");
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    auto& p = model.params()[l];
    const auto& jl = layers[l];
    const Index out = arch.layer_dims[l + 1];
    const Index in = arch.layer_dims[l];
    const std::string tag = "layer " + std::to_string(l);
    p.weight = detail::from_row_major<S>(jl.at("weight"), out, in, tag + " weight");
    p.bias = detail::from_row_major<S>(jl.at("bias"), out, 1, tag + " bias");
    if (model.has_layernorm(l)) {
      p.gain = detail::from_row_major<S>(jl.at("gain"), out, 1, tag + " gain");
      p.offset = detail::from_row_major<S>(jl.at("offset"), out, 1, tag + " offset");
    }
  }
  model.reset_optimizer();
  return model;
}

}  // namespace gradpie
