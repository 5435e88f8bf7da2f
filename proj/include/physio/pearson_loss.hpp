#pragma once

#include "physio/autodiff.hpp"

#include <cmath>

namespace physio {

/// Prediction standard deviations at or below this are treated as constant.
inline constexpr double kDegenerateStd = 1e-12;

struct LossDiagnostics {
  int degenerate_predictions = 0;
};

/// 1 - Pearson r between a prediction column and a target, differentiable in
/// the prediction. A constant prediction yields loss 1 with zero gradient and
/// bumps `diag->degenerate_predictions`. A non-finite prediction yields NaN.
template <typename Scalar>
ad::Tensor<Scalar> pearson_loss(const ad::Tensor<Scalar>& pred,
                                const Eigen::Ref<const Eigen::VectorXd>& target,
                                LossDiagnostics* diag = nullptr) {
  if (pred.cols() != 1 || pred.rows() != target.size()) {
    ad::shape_error("pearson_loss", ad::shape_str(pred), ad::shape_str(target.size(), 1));
  }
  const Eigen::Index n = target.size();
  if (n < 3) fail("pearson_loss: need at least 3 samples, got " + std::to_string(n));

  const Eigen::VectorXd b = target.array() - target.mean();
  const double b_norm = b.norm();
  if (!(b_norm / std::sqrt(static_cast<double>(n)) > kDegenerateStd)) {
    fail("pearson_loss: target is constant");
  }
  const Eigen::VectorXd a = pred.value().col(0).template cast<double>().array() -
                            static_cast<double>(pred.value().mean());
  const double a_norm = a.norm();

  ad::Matrix<Scalar> out(1, 1);
  if (!std::isfinite(a_norm)) {
    out(0, 0) = std::numeric_limits<Scalar>::quiet_NaN();
    return ad::detail::make_result<Scalar>("pearson_loss", std::move(out), {pred.node()},
                                           [](ad::Node<Scalar>&) {});
  }
  if (!(a_norm / std::sqrt(static_cast<double>(n)) > kDegenerateStd)) {
    if (diag) ++diag->degenerate_predictions;
    out(0, 0) = Scalar(1);
    return ad::detail::make_result<Scalar>("pearson_loss", std::move(out), {pred.node()},
                                           [](ad::Node<Scalar>&) {});
  }
  const double r = a.dot(b) / std::sqrt(a.squaredNorm() * b.squaredNorm());
  out(0, 0) = static_cast<Scalar>(1.0 - r);
  // d(1 - r)/dp = -(b / (|a||b|) - r a / |a|^2); both terms are already
  // mean-free, so centering contributes nothing further.
  Eigen::VectorXd g = -(b / (a_norm * b_norm) - r * a / (a_norm * a_norm));
  return ad::detail::make_result<Scalar>(
      "pearson_loss", std::move(out), {pred.node()},
      [pp = pred.node().get(), g = std::move(g)](ad::Node<Scalar>& node) {
        pp->accumulate_expr((g * static_cast<double>(node.grad(0, 0))).template cast<Scalar>());
      });
}

}  // namespace physio
