#pragma once

// Efficiency optimisation of (distributions over) score parameters:
// the smoothed minibatch efficiency loss, KL-constrained posterior search by
// an augmented Lagrangian, prior tuning on a held-out split, the learned
// point-estimate baseline, and the alpha_hat grid search with a union bound.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pacconf/bounds.hpp"
#include "pacconf/data.hpp"
#include "pacconf/error.hpp"
#include "pacconf/params.hpp"
#include "pacconf/predictor.hpp"
#include "pacconf/rng.hpp"
#include "pacconf/score.hpp"
#include "pacconf/soft.hpp"
#include "pacconf/tape.hpp"

namespace pacconf {

enum class PriorMode { fixed, tune_mean, tune_mean_var };
enum class StepRule { sgd, adam };
enum class RegressionLoss { log_radius, log_u_tau };
enum class IcpBound { vovk2a, vovk2b };

struct OptimConfig {
  double alpha = 0.1;
  double delta = 0.05;
  std::vector<double> alpha_hat_grid{0.8};
  /// Grid entries are fractions of the largest certifiable alpha_hat
  /// (the zero crossing of the KL budget) rather than absolute levels.
  bool alpha_hat_grid_relative = true;
  long inner_steps = 2000;
  long outer_iterations = 7;
  long prior_steps = 2000;
  long learned_steps = 2000;
  double learning_rate = 1e-3;
  StepRule step_rule = StepRule::sgd;
  long minibatch = 100;
  long theta_samples = 4;
  double rho_init = 1.0;
  double rho_growth = 2.0;
  double set_size_temperature = 0.1;
  double soft_sort_temperature = 0.01;
  PriorMode prior_mode = PriorMode::tune_mean;
  double prior_variance_scale = 0.02;
  double data_split = 0.5;
  RegressionLoss regression_loss = RegressionLoss::log_radius;
  long predictor_samples = 10;
  long eval_every = 0;  ///< extra feasible-iterate checks inside a round (0: end of round only)
  long log_every = 50;
  double efficiency_scale = 4.0;  ///< regression width mapped to efficiency 1
  std::optional<double> beta;
  std::optional<double> l_tau;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0) || !(delta > 0.0 && delta < 1.0)) {
      throw DomainError("OptimConfig: alpha, delta must lie in (0, 1)");
    }
    if (alpha_hat_grid.empty()) throw DomainError("OptimConfig: alpha_hat_grid is empty");
    for (double a : alpha_hat_grid) {
      if (!(a > 0.0 && a < 1.0)) throw DomainError("OptimConfig: alpha_hat_grid entries must lie in (0, 1)");
    }
    if (inner_steps < 0 || outer_iterations < 1 || prior_steps < 0 || learned_steps < 0) {
      throw DomainError("OptimConfig: step counts must be non-negative (outer_iterations >= 1)");
    }
    if (!(learning_rate > 0.0) || minibatch < 2 || theta_samples < 1 || predictor_samples < 1) {
      throw DomainError("OptimConfig: learning_rate > 0, minibatch >= 2, theta_samples >= 1 required");
    }
    if (!(rho_init > 0.0) || !(rho_growth >= 1.0)) throw DomainError("OptimConfig: rho_init > 0, rho_growth >= 1");
    if (!(set_size_temperature > 0.0) || !(soft_sort_temperature > 0.0)) {
      throw DomainError("OptimConfig: temperatures must be positive");
    }
    if (data_split < 0.0 || data_split >= 1.0) throw DomainError("OptimConfig: data_split must lie in [0, 1)");
    if (!(prior_variance_scale > 0.0) || !(efficiency_scale > 0.0)) {
      throw DomainError("OptimConfig: variance and efficiency scales must be positive");
    }
  }
};

// --- Loss ------------------------------------------------------------------

/// Rank fraction used for the minibatch soft quantile:
/// ceil((J+1)(1-alpha_hat)) / J, capped at 1.
inline double minibatch_quantile_level(long j, double alpha_hat) {
  const long rank = std::min(conformal_rank(j, alpha_hat), j);
  return static_cast<double>(rank) / static_cast<double>(j);
}

/// Smoothed efficiency of the sets built from one theta on a batch, with the
/// threshold taken as the soft quantile of the batch's own scores.
inline Var smoothed_efficiency(const ScoreModel& model, Var theta, const Dataset& batch, double alpha_hat,
                               const OptimConfig& cfg) {
  const ScoreVars sv = score_vars(model, theta, batch);
  const double q = minibatch_quantile_level(batch.size(), alpha_hat);
  Var tau = ad::soft_quantile(sv.calib, q, cfg.soft_sort_temperature);
  if (model.is_classification()) {
    return ad::mean(ad::soft_set_size(sv.all_labels, tau, cfg.set_size_temperature));
  }
  // Regression: log of the interval radius tau * r(x).
  Var log_tau = ad::log(tau);
  if (model.kind == ScoreKind::regression_residual) return log_tau;
  Var per_point = sv.radius;
  if (cfg.regression_loss == RegressionLoss::log_u_tau) {
    // Offset form log(u tau); u is recovered from r = 1 + sigmoid(gate) u.
    const long n_u = model.u_param_count();
    Var gate = ad::sigmoid(ad::slice(theta, n_u, 1, 1));
    Var u = ad::div(ad::add_scalar(sv.radius, -1.0), ad::broadcast(gate, batch.size(), 1));
    per_point = ad::clamp_min(u, 1e-6);
  }
  return ad::add(log_tau, ad::mean(ad::log(per_point)));
}

/// Monte-Carlo estimate of the smoothed efficiency loss of N(mu, sigma^2)
/// over `noise.size()` reparametrised samples. With `log_sigma` absent the
/// loss is that of the point estimate theta = mu.
inline Var differentiable_loss(Var mu, std::optional<Var> log_sigma, const ScoreModel& model, const Dataset& batch,
                               double alpha_hat, const OptimConfig& cfg, std::span<const Vec> noise) {
  if (batch.size() < 2) throw DomainError("differentiable_loss: minibatch needs at least 2 points");
  if (!log_sigma) return smoothed_efficiency(model, mu, batch, alpha_hat, cfg);
  if (noise.empty()) throw DomainError("differentiable_loss: need at least one noise sample");
  std::optional<Var> total;
  for (const Vec& z : noise) {
    Var theta = ad::reparam_sample(mu, *log_sigma, z);
    Var l = smoothed_efficiency(model, theta, batch, alpha_hat, cfg);
    total = total ? ad::add(*total, l) : l;
  }
  return ad::scale(*total, 1.0 / static_cast<double>(noise.size()));
}

inline std::vector<Vec> draw_noise(Rng& rng, long count, long dim) {
  std::vector<Vec> out;
  out.reserve(static_cast<std::size_t>(count));
  for (long k = 0; k < count; ++k) out.push_back(standard_normal(rng, dim));
  return out;
}

/// Loss value of a fixed distribution (no gradient).
inline double loss_value(const DiagGaussian& q, const ScoreModel& model, const Dataset& data, double alpha_hat,
                         const OptimConfig& cfg, std::span<const Vec> noise) {
  Tape tape;
  return differentiable_loss(tape.constant(q.mu.values), tape.constant(q.log_sigma.values), model, data, alpha_hat,
                             cfg, noise)
      .scalar();
}

template <class R>
Dataset sample_minibatch(const Dataset& data, long j, R& rng) {
  const long n = data.size();
  if (j >= n) return data;
  std::vector<long> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0L);
  for (long i = 0; i < j; ++i) {
    const long k = i + static_cast<long>(rng() % static_cast<std::uint64_t>(n - i));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(k)]);
  }
  idx.resize(static_cast<std::size_t>(j));
  return data.subset(idx);
}

// --- Gradient steps ----------------------------------------------------------

/// Plain SGD or Adam over a fixed set of parameter blocks.
class Stepper {
 public:
  Stepper(StepRule rule, double lr, std::size_t blocks) : rule_(rule), lr_(lr), m_(blocks), v_(blocks) {}

  /// Call once per iteration before the per-block updates.
  void tick() { ++t_; }

  void update(std::size_t block, Vec& x, const Vec& g) {
    if (rule_ == StepRule::sgd) {
      x -= lr_ * g;
      return;
    }
    constexpr double b1 = 0.9;
    constexpr double b2 = 0.999;
    constexpr double eps = 1e-8;
    Vec& m = m_[block];
    Vec& v = v_[block];
    if (m.size() != x.size()) {
      m = Vec::Zero(x.size());
      v = Vec::Zero(x.size());
    }
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseAbs2();
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    x.array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }

 private:
  StepRule rule_;
  double lr_;
  long t_ = 0;
  std::vector<Vec> m_;
  std::vector<Vec> v_;
};

// --- Training curves ---------------------------------------------------------

struct CurveRow {
  long round = 0;
  long step = 0;
  double loss = 0.0;
  double kl = 0.0;
  double lambda = 0.0;
  double rho = 0.0;
};

// --- Prior tuning and point-estimate training -------------------------------

/// Unconstrained minimisation of the efficiency loss on D_0, over the mean
/// (tune_mean) or mean and log-sigma (tune_mean_var). `fixed` returns init.
inline DiagGaussian tune_prior(const DiagGaussian& init, const ScoreModel& model, const Dataset& d0,
                               const OptimConfig& cfg, double alpha_hat, std::uint64_t seed) {
  if (cfg.prior_mode == PriorMode::fixed || d0.size() < 2 || cfg.prior_steps == 0) return init;
  const bool tune_var = cfg.prior_mode == PriorMode::tune_mean_var;
  Vec mu = init.mu.values;
  Vec ls = init.log_sigma.values;
  Stepper stepper(cfg.step_rule, cfg.learning_rate, 2);
  Rng rng = make_rng({seed, stream::prior_tune});
  for (long step = 0; step < cfg.prior_steps; ++step) {
    const Dataset batch = sample_minibatch(d0, cfg.minibatch, rng);
    const auto noise = draw_noise(rng, cfg.theta_samples, mu.size());
    Tape tape;
    Var mu_v = tape.variable(mu);
    Var ls_v = tune_var ? tape.variable(ls) : tape.constant(ls);
    Var loss = differentiable_loss(mu_v, ls_v, model, batch, alpha_hat, cfg, noise);
    tape.backward(loss);
    stepper.tick();
    stepper.update(0, mu, mu_v.grad().col(0));
    if (tune_var) stepper.update(1, ls, ls_v.grad().col(0));
  }
  return DiagGaussian(ParamVector(init.mu.layout, std::move(mu)), ParamVector(init.log_sigma.layout, std::move(ls)));
}

/// Point-estimate minimisation of the efficiency loss (learned baseline).
inline ParamVector train_point_estimate(const ParamVector& init, const ScoreModel& model, const Dataset& data,
                                        const OptimConfig& cfg, double alpha_hat, long steps, std::uint64_t seed) {
  if (data.size() < 2 || steps == 0) return init;
  Vec theta = init.values;
  Stepper stepper(cfg.step_rule, cfg.learning_rate, 1);
  Rng rng = make_rng({seed, stream::learned});
  for (long step = 0; step < steps; ++step) {
    const Dataset batch = sample_minibatch(data, cfg.minibatch, rng);
    Tape tape;
    Var th = tape.variable(theta);
    Var loss = differentiable_loss(th, std::nullopt, model, batch, alpha_hat, cfg, {});
    tape.backward(loss);
    stepper.tick();
    stepper.update(0, theta, th.grad().col(0));
  }
  return ParamVector(init.layout, std::move(theta));
}

// --- Constrained posterior optimisation ---------------------------------------

struct PosteriorResult {
  DiagGaussian posterior;
  double kl = 0.0;
  double budget = 0.0;
  double eval_loss = 0.0;
  double prior_eval_loss = 0.0;
  /// No feasible iterate was found and the prior was returned.
  bool warning = false;
  std::vector<CurveRow> curve;
};

/// Augmented-Lagrangian search for the lowest-loss posterior within a KL
/// budget around the prior:
///
///   L_aug = L_eff(mu, sigma) + lambda c + (rho / 2) c^2,
///   c = KL(Q || P) - budget + s,  s >= 0,
///
/// with lambda <- max(0, lambda + rho c) after every round and rho multiplied by
/// rho_growth whenever a round ends infeasible. Candidates are compared on
/// a fixed full-data loss with frozen noise. A budget of +inf disables the
/// constraint; a budget <= 0 returns the prior.
inline PosteriorResult optimize_posterior_with_budget(const DiagGaussian& prior, const ScoreModel& model,
                                                      const Dataset& data, const OptimConfig& cfg, double alpha_hat,
                                                      double budget, std::uint64_t seed) {
  cfg.validate();
  if (data.size() < 2) throw DomainError("optimize_posterior: need at least 2 calibration points");
  if (!same_layout(prior.mu.layout, model.theta_layout())) throw ShapeError("optimize_posterior: layout mismatch");
  PosteriorResult res;
  res.posterior = prior;
  res.budget = budget;

  Rng eval_rng = make_rng({seed, stream::posterior, 0xE7A1});
  const auto eval_noise = draw_noise(eval_rng, cfg.theta_samples, prior.size());
  const auto eval_loss = [&](const DiagGaussian& q) { return loss_value(q, model, data, alpha_hat, cfg, eval_noise); };
  res.prior_eval_loss = eval_loss(prior);
  res.eval_loss = res.prior_eval_loss;
  if (!(budget > 0.0)) return res;

  const bool constrained = std::isfinite(budget);
  Vec mu = prior.mu.values;
  Vec ls = prior.log_sigma.values;
  Vec slack = Vec::Constant(1, constrained ? budget : 0.0);
  double lambda = 0.0;
  double rho = cfg.rho_init;
  Stepper stepper(cfg.step_rule, cfg.learning_rate, 3);
  Rng rng = make_rng({seed, stream::posterior});

  bool have_best = true;  // Q = P is feasible whenever budget >= 0
  const auto consider = [&](const Vec& m, const Vec& l) {
    DiagGaussian q(ParamVector(prior.mu.layout, m), ParamVector(prior.log_sigma.layout, l));
    const double kl = gaussian_kl(q, prior);
    if (constrained && kl > budget) return;
    const double loss = eval_loss(q);
    if (!have_best || loss < res.eval_loss) {
      res.posterior = std::move(q);
      res.eval_loss = loss;
      res.kl = kl;
      have_best = true;
    }
  };

  for (long round = 0; round < cfg.outer_iterations; ++round) {
    for (long step = 0; step < cfg.inner_steps; ++step) {
      const Dataset batch = sample_minibatch(data, cfg.minibatch, rng);
      const auto noise = draw_noise(rng, cfg.theta_samples, mu.size());
      Tape tape;
      Var mu_v = tape.variable(mu);
      Var ls_v = tape.variable(ls);
      Var s_v = tape.variable(slack);
      Var loss = differentiable_loss(mu_v, ls_v, model, batch, alpha_hat, cfg, noise);
      Var objective = loss;
      Var kl = ad::gaussian_kl(mu_v, ls_v, prior);
      if (constrained) {
        Var c = ad::add(ad::add_scalar(kl, -budget), s_v);
        objective = ad::add(objective, ad::add(ad::scale(c, lambda), ad::scale(ad::square(c), 0.5 * rho)));
      }
      tape.backward(objective);
      stepper.tick();
      stepper.update(0, mu, mu_v.grad().col(0));
      stepper.update(1, ls, ls_v.grad().col(0));
      if (constrained) {
        stepper.update(2, slack, s_v.grad().col(0));
        slack(0) = std::max(slack(0), 0.0);
      }
      if (cfg.log_every > 0 && step % cfg.log_every == 0) {
        res.curve.push_back({round, step, loss.scalar(), kl.scalar(), lambda, rho});
      }
      if (cfg.eval_every > 0 && step > 0 && step % cfg.eval_every == 0) consider(mu, ls);
    }
    const DiagGaussian q(ParamVector(prior.mu.layout, mu), ParamVector(prior.log_sigma.layout, ls));
    const double kl = gaussian_kl(q, prior);
    if (constrained) {
      const double c = kl - budget + slack(0);
      lambda = std::max(0.0, lambda + rho * c);
      if (kl > budget) rho *= cfg.rho_growth;
    }
    res.curve.push_back({round, cfg.inner_steps, eval_loss(q), kl, lambda, rho});
    consider(mu, ls);
  }
  res.warning = !have_best;
  return res;
}

/// Posterior optimisation with the budget implied by (alpha, delta, |D_N|).
inline PosteriorResult optimize_posterior(const DiagGaussian& prior, const ScoreModel& model, const Dataset& data,
                                          const OptimConfig& cfg, double alpha_hat, std::uint64_t seed) {
  const double budget = kl_budget(cfg.alpha, alpha_hat, cfg.delta, data.size());
  return optimize_posterior_with_budget(prior, model, data, cfg, alpha_hat, budget, seed);
}

// --- Baselines -----------------------------------------------------------------

inline double icp_alpha_hat(IcpBound bound, double alpha, double delta, long n) {
  return bound == IcpBound::vovk2a ? vovk_2a_alpha_hat(alpha, delta, n) : vovk_2b_alpha_hat(alpha, delta, n);
}

struct BaselineResult {
  CalibratedPredictor predictor;
  ParamVector theta;
  double alpha_hat = 0.0;
};

/// Standard ICP: a fixed score calibrated on all of D_cal at the ICP level.
inline BaselineResult standard_baseline(const ScoreModel& model, const ParamVector& theta, const Dataset& cal,
                                        double alpha, double delta, IcpBound bound) {
  BaselineResult r;
  r.alpha_hat = icp_alpha_hat(bound, alpha, delta, cal.size());
  r.theta = theta;
  r.predictor = single_predictor(model, theta, cal, r.alpha_hat);
  return r;
}

/// Learned ICP: optimise theta on D_0, recalibrate on the held-out D_N.
/// The optimisation targets the level that D_N will be calibrated at.
inline BaselineResult learned_baseline(const ScoreModel& model, const ParamVector& theta_init, const Dataset& d0,
                                       const Dataset& dn, const OptimConfig& cfg, IcpBound bound, std::uint64_t seed) {
  if (dn.empty()) throw InfeasibleError("learned baseline: empty recalibration split");
  BaselineResult r;
  r.alpha_hat = icp_alpha_hat(bound, cfg.alpha, cfg.delta, dn.size());
  r.theta = train_point_estimate(theta_init, model, d0, cfg, r.alpha_hat, cfg.learned_steps, seed);
  r.predictor = single_predictor(model, r.theta, dn, r.alpha_hat);
  return r;
}

// --- Certificates for a calibrated randomized predictor -----------------------

struct EfficiencyStats {
  double empirical = 0.0;  ///< mean scaled efficiency on the calibration data
  double beta = 0.0;       ///< largest calibration score (bounds every tau)
  double l_tau = 0.0;      ///< Lipschitz constant of the scaled efficiency in tau
};

/// Scaled efficiency in [0, 1]: smoothed set size / K for classification,
/// min(1, width / efficiency_scale) for regression.
inline EfficiencyStats efficiency_stats(const CalibratedPredictor& pred, const Dataset& data, const OptimConfig& cfg) {
  EfficiencyStats st;
  double total = 0.0;
  double max_radius = 0.0;
  double max_score = 0.0;
  for (const auto& pair : pred.samples) {
    const ScoreTable t = score_table(pred.model, pair.theta, data);
    max_score = std::max(max_score, t.calib.maxCoeff());
    for (long i = 0; i < data.size(); ++i) {
      if (pred.model.is_classification()) {
        const Eigen::RowVectorXd row = t.all_labels.row(i);
        const double size = soft_set_size(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())),
                                          pair.tau, cfg.set_size_temperature);
        total += size / static_cast<double>(pred.model.num_labels());
      } else {
        max_radius = std::max(max_radius, t.radius(i));
        const double width = std::isinf(pair.tau) ? kInf : 2.0 * pair.tau * t.radius(i);
        total += std::min(1.0, width / cfg.efficiency_scale);
      }
    }
  }
  st.empirical = std::clamp(total / static_cast<double>(data.size() * static_cast<long>(pred.samples.size())), 0.0, 1.0);
  st.beta = cfg.beta.value_or(std::max(max_score, 1e-12));
  if (cfg.l_tau) {
    st.l_tau = *cfg.l_tau;
  } else if (pred.model.is_classification()) {
    // Sum of K sigmoids of slope 1/T is K/(4T)-Lipschitz; scaled by 1/K.
    st.l_tau = 1.0 / (4.0 * cfg.set_size_temperature);
  } else {
    st.l_tau = std::max(2.0 * max_radius / cfg.efficiency_scale, 1e-12);
  }
  return st;
}

// --- alpha_hat grid search ----------------------------------------------------

struct GridRun {
  double alpha_hat = 0.0;
  double budget = 0.0;
  double kl = 0.0;
  EfficiencyCertificate efficiency;
  CoverageCertificate coverage;
  bool warning = false;
};

struct PacBayesResult {
  DiagGaussian prior;
  DiagGaussian posterior;
  double alpha_hat = 0.0;
  double delta_per_run = 0.0;
  double budget = 0.0;
  double kl = 0.0;
  EfficiencyCertificate efficiency;
  CoverageCertificate coverage;
  CalibratedPredictor predictor;
  std::vector<GridRun> runs;
  std::vector<CurveRow> curve;  ///< training curve of the selected run
  bool fallback = false;        ///< no certifiable level: standard ICP was used
};

/// Resolves the grid to absolute alpha_hat levels for a calibration size.
inline std::vector<double> resolve_alpha_hat_grid(const OptimConfig& cfg, long n, double delta_per_run) {
  std::vector<double> out;
  double top = 1.0;
  if (cfg.alpha_hat_grid_relative) top = budget_zero_alpha_hat(cfg.alpha, delta_per_run, n);
  for (double g : cfg.alpha_hat_grid) {
    const double a = cfg.alpha_hat_grid_relative ? g * top : g;
    if (a > 0.0 && a <= cfg.alpha && static_cast<double>(n) > 1.0 / a - 1.0) out.push_back(a);
  }
  return out;
}

/// Runs prior tuning + constrained posterior optimisation for every grid
/// level at failure probability delta / |grid| and keeps the run with the
/// smallest efficiency certificate. The certificates share one score bound
/// beta (the largest over all levels unless configured), so the choice
/// between levels is not driven by a single outlying calibration score.
inline PacBayesResult alpha_hat_grid_search(const DiagGaussian& prior_init, const ScoreModel& model, const Dataset& d0,
                                            const Dataset& dn, const OptimConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (dn.size() < 2) throw InfeasibleError("PAC-Bayes: calibration split needs at least 2 points");
  PacBayesResult best;
  best.delta_per_run = cfg.delta / static_cast<double>(cfg.alpha_hat_grid.size());
  std::vector<double> levels;
  try {
    levels = resolve_alpha_hat_grid(cfg, dn.size(), best.delta_per_run);
  } catch (const InfeasibleError&) {
    levels.clear();
  }
  OptimConfig run_cfg = cfg;
  run_cfg.delta = best.delta_per_run;

  struct Candidate {
    DiagGaussian prior;
    PosteriorResult post;
    CalibratedPredictor pred;
    EfficiencyStats stats;
    double alpha_hat;
    double budget;
  };
  std::vector<Candidate> candidates;
  double beta = 0.0;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const double a = levels[i];
    const double budget = kl_budget(cfg.alpha, a, run_cfg.delta, dn.size());
    if (!(budget > 0.0)) continue;
    const std::uint64_t run_seed = stream_key({seed, static_cast<std::uint64_t>(i)});
    DiagGaussian prior = tune_prior(prior_init, model, d0, run_cfg, a, run_seed);
    PosteriorResult post = optimize_posterior_with_budget(prior, model, dn, run_cfg, a, budget, run_seed);
    CalibratedPredictor pred = build_randomized_predictor(post.posterior, model, dn, a, cfg.predictor_samples, run_seed);
    const EfficiencyStats st = efficiency_stats(pred, dn, cfg);
    beta = std::max(beta, st.beta);
    candidates.push_back(Candidate{std::move(prior), std::move(post), std::move(pred), st, a, budget});
  }

  bool have = false;
  std::size_t chosen = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    Candidate& c = candidates[i];
    c.stats.beta = cfg.beta.value_or(beta);
    GridRun run;
    run.alpha_hat = c.alpha_hat;
    run.budget = c.budget;
    run.kl = c.post.kl;
    run.warning = c.post.warning;
    run.efficiency =
        efficiency_upper_bound(c.stats.empirical, c.post.kl, c.stats.beta, c.stats.l_tau, dn.size(), run_cfg.delta);
    run.coverage = coverage_upper_bound(BoundInputs{cfg.alpha, c.alpha_hat, run_cfg.delta, dn.size(), c.post.kl});
    best.runs.push_back(run);
    if (!have || run.efficiency.upper_bound < best.efficiency.upper_bound) {
      have = true;
      chosen = i;
      best.efficiency = run.efficiency;
      best.coverage = run.coverage;
    }
  }
  best.fallback = !have;
  if (have) {
    Candidate& c = candidates[chosen];
    best.prior = std::move(c.prior);
    best.posterior = c.post.posterior;
    best.alpha_hat = c.alpha_hat;
    best.budget = c.budget;
    best.kl = c.post.kl;
    best.curve = std::move(c.post.curve);
    c.pred.certificate = CertificateInputs{cfg.alpha,       run_cfg.delta,  c.alpha_hat,      dn.size(),    c.post.kl,
                                           c.stats.empirical, c.stats.beta, c.stats.l_tau, run_cfg.delta};
    best.predictor = std::move(c.pred);
  }
  return best;
}

}  // namespace pacconf
