#pragma once

// Quantiles (hard and soft), the sigmoid set-size relaxation, and the
// diagonal-Gaussian primitives used to randomise score parameters.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "pacconf/error.hpp"
#include "pacconf/numeric.hpp"
#include "pacconf/params.hpp"
#include "pacconf/tape.hpp"

namespace pacconf {

/// Rank (1-based) of the conformal order statistic: ceil((n+1)(1-alpha_hat)).
inline long conformal_rank(long n, double alpha_hat) {
  return std::max(1L, ceil_count(static_cast<double>(n + 1) * (1.0 - alpha_hat)));
}

/// The ceil((n+1)(1-alpha_hat))-th smallest score, or +inf when that rank
/// exceeds n (the set must then contain every label).
inline double hard_quantile_threshold(std::span<const double> scores, double alpha_hat) {
  if (scores.empty()) throw DomainError("hard_quantile_threshold: no scores");
  if (!(alpha_hat > 0.0 && alpha_hat < 1.0)) throw DomainError("hard_quantile_threshold: alpha_hat must lie in (0,1)");
  const long n = static_cast<long>(scores.size());
  const long rank = conformal_rank(n, alpha_hat);
  if (rank > n) return kInf;
  std::vector<double> v(scores.begin(), scores.end());
  std::nth_element(v.begin(), v.begin() + (rank - 1), v.end());
  return v[static_cast<std::size_t>(rank - 1)];
}

namespace ad {

/// Soft relaxation of the ceil(q n)-th order statistic of a column vector.
///
/// The hard order statistic t anchors one row of a unimodal row-stochastic
/// matrix, w_j = softmax_j(-(t - s_j)^2 / temperature), and the output is
/// sum_j w_j s_j. Gradients flow through both the weights and t.
inline Var soft_quantile(Var scores, double q, double temperature) {
  if (scores.cols() != 1 || scores.rows() < 1) throw ShapeError("soft_quantile: scores must be a non-empty column");
  if (!(temperature > 0.0)) throw DomainError("soft_quantile: temperature must be positive");
  const long n = scores.rows();
  const long rank = std::clamp(ceil_count(q * static_cast<double>(n)), 1L, n);
  const Eigen::VectorXd s = scores.value().col(0);

  std::vector<long> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0L);
  std::nth_element(order.begin(), order.begin() + (rank - 1), order.end(),
                   [&s](long a, long b) { return s(a) < s(b); });
  const long anchor = order[static_cast<std::size_t>(rank - 1)];
  const double t = s(anchor);

  Eigen::VectorXd logits = -(s.array() - t).square() / temperature;
  const double mx = logits.maxCoeff();
  Eigen::VectorXd w = (logits.array() - mx).exp();
  w /= w.sum();
  const double out = w.dot(s);

  return scores.tape->record(Mat::Constant(1, 1, out), {scores},
                             [scores, w, s, t, out, anchor, temperature](Tape& tp, const Mat& g) {
                               // d out / d logit_j = w_j (s_j - out)
                               const Eigen::ArrayXd dlogit = w.array() * (s.array() - out);
                               const Eigen::ArrayXd dl_ds = 2.0 * (t - s.array()) / temperature;
                               Eigen::VectorXd grad = (w.array() + dlogit * dl_ds).matrix();
                               grad(anchor) += -(dlogit * dl_ds).sum();
                               tp.accumulate(scores, g(0, 0) * grad);
                             });
}

/// Per-row soft set size: sum_y sigmoid((tau - s_{i,y}) / T) for a
/// (batch x labels) score matrix and a scalar threshold. Returns (batch x 1).
inline Var soft_set_size(Var scores_per_label, Var tau, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("soft_set_size: temperature must be positive");
  Var tau_b = broadcast(tau, scores_per_label.rows(), scores_per_label.cols());
  return row_sum(sigmoid(scale(sub(tau_b, scores_per_label), 1.0 / temperature)));
}

/// theta = mu + exp(log_sigma) * noise.
inline Var reparam_sample(Var mu, Var log_sigma, const Eigen::VectorXd& noise) {
  if (mu.cols() != 1 || log_sigma.rows() != mu.rows() || log_sigma.cols() != 1 || noise.size() != mu.rows()) {
    throw ShapeError("reparam_sample: shape mismatch");
  }
  const Eigen::VectorXd sn = log_sigma.value().col(0).array().exp() * noise.array();
  return mu.tape->record(mu.value() + sn, {mu, log_sigma}, [mu, log_sigma, sn](Tape& t, const Mat& g) {
    t.accumulate(mu, g);
    if (t.requires_grad(log_sigma)) t.accumulate(log_sigma, g.cwiseProduct(sn));
  });
}

/// KL(Q || P) for diagonal Gaussians; differentiable in (mu_q, log_sigma_q).
inline Var gaussian_kl(Var mu_q, Var log_sigma_q, const DiagGaussian& p) {
  if (mu_q.rows() != p.size() || log_sigma_q.rows() != p.size() || mu_q.cols() != 1 || log_sigma_q.cols() != 1) {
    throw ShapeError("gaussian_kl: layouts differ");
  }
  const Eigen::ArrayXd mq = mu_q.value().col(0).array();
  const Eigen::ArrayXd lq = log_sigma_q.value().col(0).array();
  const Eigen::ArrayXd mp = p.mu.values.array();
  const Eigen::ArrayXd lp = p.log_sigma.values.array();
  const Eigen::ArrayXd inv_var_p = (-2.0 * lp).exp();
  const Eigen::ArrayXd var_q = (2.0 * lq).exp();
  const Eigen::ArrayXd diff = mq - mp;
  const double kl = ((lp - lq) + 0.5 * (var_q + diff.square()) * inv_var_p - 0.5).sum();
  Eigen::VectorXd g_mu = (diff * inv_var_p).matrix();
  Eigen::VectorXd g_ls = (var_q * inv_var_p - 1.0).matrix();
  return mu_q.tape->record(Mat::Constant(1, 1, kl), {mu_q, log_sigma_q},
                           [mu_q, log_sigma_q, g_mu = std::move(g_mu), g_ls = std::move(g_ls)](Tape& t, const Mat& g) {
                             if (t.requires_grad(mu_q)) t.accumulate(mu_q, g(0, 0) * g_mu);
                             if (t.requires_grad(log_sigma_q)) t.accumulate(log_sigma_q, g(0, 0) * g_ls);
                           });
}

}  // namespace ad

/// KL(Q || P) for diagonal Gaussians with identical layouts.
inline double gaussian_kl(const DiagGaussian& q, const DiagGaussian& p) {
  if (!same_layout(q.mu.layout, p.mu.layout)) throw ShapeError("gaussian_kl: layouts differ");
  const Eigen::ArrayXd lq = q.log_sigma.values.array();
  const Eigen::ArrayXd lp = p.log_sigma.values.array();
  const Eigen::ArrayXd diff = q.mu.values.array() - p.mu.values.array();
  return ((lp - lq) + 0.5 * ((2.0 * lq).exp() + diff.square()) * (-2.0 * lp).exp() - 0.5).sum();
}

/// theta = mu + sigma * noise.
inline ParamVector reparam_sample(const DiagGaussian& q, const Eigen::VectorXd& noise) {
  if (noise.size() != q.size()) throw ShapeError("reparam_sample: noise length does not match layout");
  return ParamVector(q.mu.layout, q.mu.values + (q.log_sigma.values.array().exp() * noise.array()).matrix());
}

/// Hard-count-limit relaxation for one point.
inline double soft_set_size(std::span<const double> scores_per_label, double tau, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("soft_set_size: temperature must be positive");
  double total = 0.0;
  for (double s : scores_per_label) total += sigmoid((tau - s) / temperature);
  return total;
}

/// Non-differentiable soft quantile.
inline double soft_quantile(std::span<const double> scores, double q, double temperature) {
  Tape tape;
  Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(scores.data(), static_cast<long>(scores.size()));
  return ad::soft_quantile(tape.constant(v), q, temperature).scalar();
}

}  // namespace pacconf
