#pragma once

// An MLP in normalized coordinates, wrapped so callers work in raw input and
// output units, plus the mini-batch trainer for the GradPIE / MAE / MSE losses.

#include "gradpie/data_locality.hpp"
#include "gradpie/losses.hpp"
#include "gradpie/nn_surrogate.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

namespace gradpie {

/// F-hat(x) = mu_y + sigma_y * mlp((x - mu_x) / sigma_x)
template <typename S>
class Surrogate {
 public:
  Surrogate(Mlp<S> mlp, DatasetStats stats) : mlp_(std::move(mlp)), stats_(std::move(stats)) {
    require_dim(stats_.input.dim(), mlp_.input_dim(), "surrogate input stats");
    require_dim(stats_.output.dim(), mlp_.output_dim(), "surrogate output stats");
  }

  Mlp<S>& mlp() { return mlp_; }
  const Mlp<S>& mlp() const { return mlp_; }
  const DatasetStats& stats() const { return stats_; }
  Index input_dim() const { return mlp_.input_dim(); }
  Index output_dim() const { return mlp_.output_dim(); }

  Vector predict(const Vector& x) const {
    const VectorT<S> xn = normalize(x, stats_.input).template cast<S>();
    return denormalize(forward(mlp_, xn).template cast<double>(), stats_.output);
  }

  /// upstream^T J[F-hat](x) in raw units.
  Vector input_gradient(const Vector& x, const Vector& upstream) const {
    require_dim(upstream.size(), output_dim(), "surrogate upstream");
    const VectorT<S> xn = normalize(x, stats_.input).template cast<S>();
    const VectorT<S> un = (upstream.array() * stats_.output.std.array()).matrix().template cast<S>();
    const Vector g = gradpie::input_gradient(mlp_, xn, un).template cast<double>();
    return (g.array() / stats_.input.std.array()).matrix();
  }

  /// Full D_o x D_i Jacobian in raw units.
  Matrix jacobian(const Vector& x) const {
    const Index d_o = output_dim();
    const VectorT<S> xn = normalize(x, stats_.input).template cast<S>();
    MatrixT<S> xs = xn.replicate(1, d_o);
    MatrixT<S> up = MatrixT<S>::Zero(d_o, d_o);
    for (Index i = 0; i < d_o; ++i) up(i, i) = S(stats_.output.std[i]);
    const Matrix gt = input_gradient_batch(mlp_, xs, up).template cast<double>();  // D_i x D_o
    Matrix jac = gt.transpose();
    for (Index c = 0; c < jac.cols(); ++c) jac.col(c) /= stats_.input.std[c];
    return jac;
  }

 private:
  Mlp<S> mlp_;
  DatasetStats stats_;
};

template <typename S>
nlohmann::json to_json(const Surrogate<S>& s) {
  auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  nlohmann::json j;
  j["model"] = to_json(s.mlp());
  j["input_mean"] = vec(s.stats().input.mean);
  j["input_std"] = vec(s.stats().input.std);
  j["output_mean"] = vec(s.stats().output.mean);
  j["output_std"] = vec(s.stats().output.std);
  return j;
}

template <typename S>
Surrogate<S> surrogate_from_json(const nlohmann::json& j) {
  auto vec = [&](const char* key) {
    const auto v = j.at(key).get<std::vector<double>>();
    return Vector(Eigen::Map<const Vector>(v.data(), Index(v.size())));
  };
  DatasetStats stats{{vec("input_mean"), vec("input_std")}, {vec("output_mean"), vec("output_std")}};
  return Surrogate<S>(mlp_from_json<S>(j.at("model")), std::move(stats));
}

struct TrainConfig {
  LossKind loss = LossKind::gradpie;
  Index k = 4;
  Index batch_size = 64;
  Index epochs = 100;
  double epsilon = 0.0;  // stop once an epoch's mean loss drops below this
  AdamConfig adam;

  void validate() const {
    if (k < 1) throw std::invalid_argument("train: k must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (!(epsilon >= 0.0)) throw std::invalid_argument("train: epsilon must be >= 0");
    adam.validate();
  }
};

struct TrainResult {
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  Index epochs_run = 0;
  bool converged = false;
  std::vector<double> loss_history;
};

namespace detail {

template <typename S>
MatrixT<S> gather_columns(const MatrixT<S>& m, const std::vector<Index>& cols) {
  MatrixT<S> out(m.rows(), Index(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) out.col(Index(i)) = m.col(cols[i]);
  return out;
}

}  // namespace detail

/// Mini-batch training on `data` in the surrogate's normalized coordinates.
/// Batches are formed over anchor samples; a GradPIE batch of B anchors
/// contributes B*K pairs, and every distinct point in it is re-evaluated.
template <typename S, typename Rng>
TrainResult train_surrogate(Surrogate<S>& model, const Dataset& data, const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  require_dim(data.input_dim(), model.input_dim(), "train input dim");
  require_dim(data.output_dim(), model.output_dim(), "train output dim");
  const Index n = data.size();
  if (n < 2) throw std::invalid_argument("train: dataset needs at least 2 samples");

  std::vector<Vector> xn;
  xn.reserve(std::size_t(n));
  MatrixT<S> inputs(data.input_dim(), n);
  MatrixT<S> targets(data.output_dim(), n);
  for (Index i = 0; i < n; ++i) {
    xn.push_back(normalize(data.input(i), model.stats().input));
    inputs.col(i) = xn.back().template cast<S>();
    targets.col(i) = normalize(data.output(i), model.stats().output).template cast<S>();
  }

  NeighborIndex knn;
  if (cfg.loss == LossKind::gradpie) {
    bool degenerate = true;
    for (Index i = 1; i < n && degenerate; ++i) degenerate = data.input(i) == data.input(0);
    if (degenerate) throw std::invalid_argument("train: GradPIE needs distinct inputs (all inputs identical)");
    knn = build_knn(xn, cfg.k);
  }

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  std::vector<Index> local(static_cast<std::size_t>(n), -1);
  std::vector<Index> members;
  auto& mlp = model.mlp();

  TrainResult result;
  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (Index start = 0; start < n; start += cfg.batch_size) {
      const Index stop = std::min(n, start + cfg.batch_size);
      const std::vector<Index> anchors(order.begin() + start, order.begin() + stop);
      LossResult<S> loss;
      MatrixT<S> batch_inputs;
      if (cfg.loss == LossKind::gradpie) {
        members.clear();
        auto add = [&](Index i) {
          if (local[std::size_t(i)] < 0) {
            local[std::size_t(i)] = Index(members.size());
            members.push_back(i);
          }
          return local[std::size_t(i)];
        };
        LossBatch<S> lb;
        lb.anchors.reserve(anchors.size());
        lb.neighbors.reserve(anchors.size());
        for (Index a : anchors) {
          lb.anchors.push_back(add(a));
          std::vector<Index> nb;
          nb.reserve(knn.neighbors[std::size_t(a)].size());
          for (Index j : knn.neighbors[std::size_t(a)]) nb.push_back(add(j));
          lb.neighbors.push_back(std::move(nb));
        }
        for (Index i : members) local[std::size_t(i)] = -1;
        batch_inputs = detail::gather_columns(inputs, members);
        lb.targets = detail::gather_columns(targets, members);
        auto trace = forward_trace(mlp, batch_inputs);
        lb.predictions = trace.output;
        loss = gradpie_loss(lb);
        auto grads = zeros_like(mlp.params());
        backpropagate(mlp, trace, loss.grad, &grads);
        adam_step(mlp, grads, cfg.adam);
      } else {
        batch_inputs = detail::gather_columns(inputs, anchors);
        const MatrixT<S> batch_targets = detail::gather_columns(targets, anchors);
        auto trace = forward_trace(mlp, batch_inputs);
        loss = cfg.loss == LossKind::mae ? mae_loss<S>(trace.output, batch_targets)
                                         : mse_loss<S>(trace.output, batch_targets);
        auto grads = zeros_like(mlp.params());
        backpropagate(mlp, trace, loss.grad, &grads);
        adam_step(mlp, grads, cfg.adam);
      }
      loss_sum += double(loss.value) * double(stop - start);
    }
    const double epoch_loss = loss_sum / double(n);
    result.loss_history.push_back(epoch_loss);
    result.final_loss = epoch_loss;
    result.epochs_run = epoch + 1;
    if (!std::isfinite(epoch_loss)) throw NonFiniteError("train: non-finite loss in epoch " + std::to_string(epoch));
    if (epoch_loss < cfg.epsilon) {
      result.converged = true;
      break;
    }
  }
  return result;
}

/// Mean loss of the current model over the whole dataset (no parameter change).
template <typename S>
double evaluate_loss(const Surrogate<S>& model, const Dataset& data, LossKind kind, Index k) {
  const Index n = data.size();
  std::vector<Vector> xn;
  MatrixT<S> inputs(data.input_dim(), n);
  MatrixT<S> targets(data.output_dim(), n);
  for (Index i = 0; i < n; ++i) {
    xn.push_back(normalize(data.input(i), model.stats().input));
    inputs.col(i) = xn.back().template cast<S>();
    targets.col(i) = normalize(data.output(i), model.stats().output).template cast<S>();
  }
  const MatrixT<S> pred = forward_batch(model.mlp(), inputs);
  if (kind == LossKind::mae) return double(mae_loss<S>(pred, targets).value);
  if (kind == LossKind::mse) return double(mse_loss<S>(pred, targets).value);
  const auto knn = build_knn(xn, k);
  LossBatch<S> lb{targets, pred, {}, {}};
  for (Index i = 0; i < n; ++i) {
    lb.anchors.push_back(i);
    lb.neighbors.push_back(knn.neighbors[std::size_t(i)]);
  }
  return double(gradpie_loss(lb).value);
}

}  // namespace gradpie
