#pragma once

// Surrogate training objectives and their gradients w.r.t. surrogate outputs.

#include "gradpie/common.hpp"

#include <string>
#include <vector>

namespace gradpie {

enum class LossKind { gradpie, mae, mse };

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::gradpie: return "gradpie";
    case LossKind::mae: return "mae";
    case LossKind::mse: return "mse";
  }
  return "?";
}

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "gradpie" || s == "locality") return LossKind::gradpie;
  if (s == "mae" || s == "base") return LossKind::mae;
  if (s == "mse") return LossKind::mse;
  throw std::invalid_argument("unknown loss '" + s + "'");
}

template <typename S>
struct LossResult {
  S value = S(0);
  MatrixT<S> grad;  // dL/dprediction, same shape as the predictions
};

/// Pairwise batch over a set of M distinct points (columns). Anchors and
/// neighbor lists index into those columns.
template <typename S>
struct LossBatch {
  MatrixT<S> targets;      // F, D_o x M
  MatrixT<S> predictions;  // F-hat, D_o x M
  std::vector<Index> anchors;
  std::vector<std::vector<Index>> neighbors;  // one list per anchor
};

/// Mean over anchors of (1/K) sum_k || (F(x)-F(x'_k)) - (Fh(x)-Fh(x'_k)) ||_1,
/// with sign(0) = 0 in the subgradient.
template <typename S>
LossResult<S> gradpie_loss(const LossBatch<S>& batch) {
  const auto& F = batch.targets;
  const auto& Fh = batch.predictions;
  if (F.rows() != Fh.rows() || F.cols() != Fh.cols()) throw DimensionError("gradpie_loss: shape mismatch");
  if (batch.anchors.empty()) throw std::invalid_argument("gradpie_loss: empty batch");
  if (batch.neighbors.size() != batch.anchors.size()) {
    throw std::invalid_argument("gradpie_loss: one neighbor list per anchor required");
  }
  const Index m = F.cols();
  const S inv_b = S(1) / S(batch.anchors.size());
  LossResult<S> res;
  res.grad = MatrixT<S>::Zero(F.rows(), m);
  double total = 0.0;
  for (std::size_t a = 0; a < batch.anchors.size(); ++a) {
    const Index i = batch.anchors[a];
    const auto& nbrs = batch.neighbors[a];
    if (nbrs.empty()) throw std::invalid_argument("gradpie_loss: K must be >= 1");
    if (i < 0 || i >= m) throw std::out_of_range("gradpie_loss: anchor index out of range");
    const S w = inv_b / S(nbrs.size());
    double anchor_sum = 0.0;
    for (Index j : nbrs) {
      if (j < 0 || j >= m) throw std::out_of_range("gradpie_loss: neighbor index out of range");
      for (Index d = 0; d < F.rows(); ++d) {
        const S r = (F(d, i) - F(d, j)) - (Fh(d, i) - Fh(d, j));
        anchor_sum += double(std::abs(r));
        const S g = w * sign_or_zero(r);
        res.grad(d, i) -= g;
        res.grad(d, j) += g;
      }
    }
    total += anchor_sum / double(nbrs.size());
  }
  res.value = S(total / double(batch.anchors.size()));
  return res;
}

/// Mean over samples (columns) of ||Fh - F||_1.
template <typename S>
LossResult<S> mae_loss(const MatrixT<S>& predictions, const MatrixT<S>& targets) {
  if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols()) {
    throw DimensionError("mae_loss: shape mismatch");
  }
  if (predictions.cols() == 0) throw std::invalid_argument("mae_loss: empty batch");
  const S inv_n = S(1) / S(predictions.cols());
  const MatrixT<S> diff = predictions - targets;
  LossResult<S> res;
  res.value = S(diff.array().abs().template cast<double>().sum() / double(predictions.cols()));
  res.grad = diff.unaryExpr([inv_n](S v) { return inv_n * sign_or_zero(v); });
  return res;
}

/// Mean over samples (columns) of ||Fh - F||_2^2.
template <typename S>
LossResult<S> mse_loss(const MatrixT<S>& predictions, const MatrixT<S>& targets) {
  if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols()) {
    throw DimensionError("mse_loss: shape mismatch");
  }
  if (predictions.cols() == 0) throw std::invalid_argument("mse_loss: empty batch");
  const MatrixT<S> diff = predictions - targets;
  LossResult<S> res;
  res.value = S(diff.array().square().template cast<double>().sum() / double(predictions.cols()));
  res.grad = diff * (S(2) / S(predictions.cols()));
  return res;
}

}  // namespace gradpie
