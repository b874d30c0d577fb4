#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "gradcheck.hpp"
#include "pacconf/optimizer.hpp"

using namespace pacconf;

namespace {

// f == 0: the residual score of (x, y) is |y|, so only the u-network matters.
Arch zero_base() { return Arch{{1, 1}}; }

ScoreModel scaled(const Arch& u) {
  return ScoreModel::regression_scaled(zero_base(), ParamVector::zeros(zero_base().layout()), u);
}

// Noise whose scale grows with |x|, so a learned u(x) pays off.
Dataset hetero(long n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(-1.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  Dataset d{Mat(n, 1), Vec(n)};
  for (long i = 0; i < n; ++i) {
    d.x(i, 0) = ux(rng);
    d.y(i) = (0.1 + 2.0 * d.x(i, 0) * d.x(i, 0)) * g(rng);
  }
  return d;
}

OptimConfig fast_config() {
  OptimConfig c;
  c.step_rule = StepRule::adam;
  c.learning_rate = 1e-2;
  c.inner_steps = 60;
  c.outer_iterations = 3;
  c.prior_steps = 100;
  c.learned_steps = 100;
  c.minibatch = 64;
  c.theta_samples = 2;
  c.predictor_samples = 3;
  c.log_every = 0;
  return c;
}

DiagGaussian prior_for(const ScoreModel& m, unsigned seed, double variance_scale = 0.02) {
  Rng rng(seed);
  Vec mean = Vec::Zero(m.theta_layout()->size());
  const long n_u = m.u_param_count();
  mean.head(n_u) = init_mlp(m.aux_arch, rng).values;
  mean(n_u) = -2.0;
  return DiagGaussian::fan_in_scaled(ParamVector(m.theta_layout(), mean), variance_scale);
}

double log_sum_exp(const std::vector<double>& v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

}  // namespace

TEST(QuantileLevel, MatchesConformalRankOverBatch) {
  EXPECT_DOUBLE_EQ(minibatch_quantile_level(4, 0.5), 0.75);
  EXPECT_DOUBLE_EQ(minibatch_quantile_level(4, 0.01), 1.0);
  EXPECT_DOUBLE_EQ(minibatch_quantile_level(100, 0.1), 0.91);
}

// ------------------------------------------------------------------ the loss

TEST(DifferentiableLoss, HandComputedRegressionBatch) {
  // u-net is a single affine unit: ff = w x + b.
  const Arch u{{1, 1}, Activation::relu, Activation::identity};
  const ScoreModel m = scaled(u);
  const double w = 0.7, b = -0.2, gate = 0.4;
  Vec theta(3);
  theta << w, b, gate;
  Dataset batch{Mat(4, 1), Vec(4)};
  batch.x << -0.8, -0.1, 0.3, 0.9;
  batch.y << 0.5, -1.4, 0.05, 2.2;

  // Hand evaluation of the score and the radius.
  const double g = 1.0 / (1.0 + std::exp(-gate));
  std::vector<double> radius, score;
  for (long i = 0; i < 4; ++i) {
    const double ff = w * batch.x(i, 0) + b;
    const double u_val = std::log1p(std::exp(ff + 0.6)) - 1.0;
    radius.push_back(1.0 + g * u_val);
    score.push_back(std::abs(batch.y(i)) / radius.back());
  }
  std::vector<double> sorted = score;
  std::sort(sorted.begin(), sorted.end());
  const double tau = sorted[2];  // rank ceil(5 * 0.5) = 3 of 4
  double mean_log_radius = 0.0;
  for (double r : radius) mean_log_radius += std::log(r) / 4.0;
  const double expected = std::log(tau) + mean_log_radius;

  OptimConfig cfg;
  cfg.soft_sort_temperature = 1e-8;
  const DiagGaussian q(ParamVector(m.theta_layout(), theta),
                       ParamVector(m.theta_layout(), Vec::Constant(3, -60.0)));
  Rng rng(1);
  const auto noise = draw_noise(rng, 1, 3);
  EXPECT_NEAR(loss_value(q, m, batch, 0.5, cfg, noise), expected, 1e-9);

  // The offset variant: log(u tau), with u recovered from the radius.
  cfg.regression_loss = RegressionLoss::log_u_tau;
  double mean_log_u = 0.0;
  for (double r : radius) mean_log_u += std::log(std::max((r - 1.0) / g, 1e-6)) / 4.0;
  EXPECT_NEAR(loss_value(q, m, batch, 0.5, cfg, noise), std::log(tau) + mean_log_u, 1e-9);
}

TEST(DifferentiableLoss, HandComputedClassificationBatch) {
  // One affine layer 2 -> 3; log-softmax scores computed by hand.
  const Arch arch{{2, 3}};
  Vec params(9);
  params << 1.0, -0.5, 0.3, 0.8, -1.2, 0.4, 0.1, 0.0, -0.2;  // W (2x3 column-major), then b
  const ScoreModel m = ScoreModel::classification(arch, ParamVector(arch.layout(), params));
  Dataset batch{Mat(4, 2), Vec(4)};
  batch.x << 0.5, 1.0, -1.0, 0.2, 0.3, -0.7, 1.5, 0.4;
  batch.y << 0, 2, 1, 1;

  const Mat w = Eigen::Map<const Mat>(params.data(), 2, 3);
  const Vec bias = params.tail(3);
  Mat all(4, 3);
  std::vector<double> calib;
  for (long i = 0; i < 4; ++i) {
    std::vector<double> logits(3);
    for (long k = 0; k < 3; ++k) logits[k] = batch.x(i, 0) * w(0, k) + batch.x(i, 1) * w(1, k) + bias(k);
    const double lse = log_sum_exp(logits);
    for (long k = 0; k < 3; ++k) all(i, k) = lse - logits[k];
    calib.push_back(all(i, static_cast<long>(batch.y(i))));
  }
  std::vector<double> sorted = calib;
  std::sort(sorted.begin(), sorted.end());
  const double tau = sorted[2];
  double mean_count = 0.0;
  for (long i = 0; i < 4; ++i) {
    for (long k = 0; k < 3; ++k) {
      // The anchor score sits exactly at tau, where the sigmoid is 1/2.
      const double gap = all(i, k) - tau;
      if (gap == 0.0) {
        mean_count += 0.5 / 4.0;
        continue;
      }
      ASSERT_GT(std::abs(gap), 1e-4) << "instance too close to the threshold for a hard count";
      mean_count += (gap < 0.0 ? 1.0 : 0.0) / 4.0;
    }
  }
  OptimConfig cfg;
  cfg.soft_sort_temperature = 1e-8;
  cfg.set_size_temperature = 1e-7;
  const DiagGaussian q(m.default_theta(), ParamVector(m.theta_layout(), Vec::Constant(9, -60.0)));
  Rng rng(2);
  EXPECT_NEAR(loss_value(q, m, batch, 0.5, cfg, draw_noise(rng, 1, 9)), mean_count, 1e-9);
}

TEST(DifferentiableLoss, InvariantToBatchOrder) {
  const ScoreModel m = scaled(Arch{{1, 6, 1}, Activation::tanh});
  const DiagGaussian q = prior_for(m, 3);
  const Dataset batch = hetero(32, 4);
  OptimConfig cfg;
  Rng rng(5);
  const auto noise = draw_noise(rng, 3, q.size());
  const double base = loss_value(q, m, batch, 0.1, cfg, noise);
  std::vector<long> perm(32);
  std::iota(perm.begin(), perm.end(), 0L);
  std::mt19937_64 shuf(6);
  for (int rep = 0; rep < 5; ++rep) {
    std::shuffle(perm.begin(), perm.end(), shuf);
    EXPECT_NEAR(loss_value(q, m, batch.subset(perm), 0.1, cfg, noise), base, 1e-12);
  }
}

TEST(DifferentiableLoss, GradientMatchesFiniteDifferences) {
  OptimConfig cfg;
  cfg.soft_sort_temperature = 0.05;
  cfg.set_size_temperature = 0.3;
  {
    const ScoreModel m = scaled(Arch{{1, 5, 1}, Activation::tanh});
    const DiagGaussian q = prior_for(m, 7, 0.2);
    const Dataset batch = hetero(4, 8);
    Rng rng(9);
    const auto noise = draw_noise(rng, 2, q.size());
    auto f = [&](Tape&, const std::vector<Var>& v) {
      return differentiable_loss(v[0], v[1], m, batch, 0.3, cfg, noise);
    };
    EXPECT_LT(gradcheck::check(f, {q.mu.values, q.log_sigma.values}, 1e-6).rel_error, 1e-3);
  }
  {
    const Arch arch{{3, 4, 3}, Activation::tanh};
    Rng init(10);
    const ScoreModel m = ScoreModel::classification(arch, init_mlp(arch, init));
    const DiagGaussian q = DiagGaussian::fan_in_scaled(m.default_theta(), 0.05);
    std::mt19937_64 rng(11);
    std::normal_distribution<double> g(0.0, 1.0);
    Dataset batch{Mat(4, 3), Vec(4)};
    for (long i = 0; i < batch.x.size(); ++i) batch.x(i) = g(rng);
    batch.y << 0, 1, 2, 1;
    Rng nrng(12);
    const auto noise = draw_noise(nrng, 2, q.size());
    auto f = [&](Tape&, const std::vector<Var>& v) {
      return differentiable_loss(v[0], v[1], m, batch, 0.3, cfg, noise);
    };
    EXPECT_LT(gradcheck::check(f, {q.mu.values, q.log_sigma.values}, 1e-6).rel_error, 1e-3);
  }
}

TEST(DifferentiableLoss, RejectsTinyBatches) {
  const ScoreModel m = scaled(Arch{{1, 2, 1}, Activation::tanh});
  const DiagGaussian q = prior_for(m, 1);
  Rng rng(1);
  EXPECT_THROW(loss_value(q, m, hetero(1, 1), 0.1, OptimConfig{}, draw_noise(rng, 1, q.size())), DomainError);
}

// ------------------------------------------------------- posterior search

class PosteriorSearch : public ::testing::Test {
 protected:
  ScoreModel model = scaled(Arch{{1, 8, 1}, Activation::tanh});
  DiagGaussian prior = prior_for(model, 21);
  Dataset data = hetero(500, 22);
  OptimConfig cfg = fast_config();
};

TEST_F(PosteriorSearch, UnboundedBudgetDescends) {
  const auto r = optimize_posterior_with_budget(prior, model, data, cfg, 0.08, kInf, 1);
  EXPECT_LT(r.eval_loss, r.prior_eval_loss);
  EXPECT_FALSE(r.warning);
}

TEST_F(PosteriorSearch, ZeroBudgetReturnsThePrior) {
  for (double budget : {0.0, -3.0}) {
    const auto r = optimize_posterior_with_budget(prior, model, data, cfg, 0.08, budget, 1);
    EXPECT_EQ(r.posterior.mu.values, prior.mu.values);
    EXPECT_EQ(r.posterior.log_sigma.values, prior.log_sigma.values);
    EXPECT_EQ(r.kl, 0.0);
  }
}

TEST_F(PosteriorSearch, RespectsTheKlBudget) {
  const double top = budget_zero_alpha_hat(cfg.alpha, cfg.delta, data.size());
  for (double alpha_hat : {0.5 * top, 0.9 * top}) {
    const auto r = optimize_posterior(prior, model, data, cfg, alpha_hat, 3);
    const double budget = kl_budget(cfg.alpha, alpha_hat, cfg.delta, data.size());
    ASSERT_GT(budget, 0.0);
    EXPECT_LE(gaussian_kl(r.posterior, prior), budget + 1e-6);
    EXPECT_NEAR(r.kl, gaussian_kl(r.posterior, prior), 1e-12);
    EXPECT_LE(r.eval_loss, r.prior_eval_loss);
  }
}

TEST_F(PosteriorSearch, TightBudgetStillFeasible) {
  const auto r = optimize_posterior_with_budget(prior, model, data, cfg, 0.08, 1e-3, 4);
  EXPECT_LE(r.kl, 1e-3 + 1e-6);
  EXPECT_FALSE(r.warning);
}

TEST_F(PosteriorSearch, BitReproducibleUnderSeed) {
  const auto a = optimize_posterior(prior, model, data, cfg, 0.04, 9);
  const auto b = optimize_posterior(prior, model, data, cfg, 0.04, 9);
  EXPECT_EQ(a.posterior.mu.values, b.posterior.mu.values);
  EXPECT_EQ(a.posterior.log_sigma.values, b.posterior.log_sigma.values);
  EXPECT_EQ(a.eval_loss, b.eval_loss);
}

TEST_F(PosteriorSearch, RecordsTrainingCurve) {
  cfg.log_every = 20;
  const auto r = optimize_posterior(prior, model, data, cfg, 0.04, 2);
  // Three logged steps per round plus one end-of-round row.
  EXPECT_EQ(r.curve.size(), static_cast<std::size_t>(cfg.outer_iterations * 4));
  for (const auto& row : r.curve) {
    EXPECT_GE(row.lambda, 0.0);
    EXPECT_GT(row.rho, 0.0);
    EXPECT_TRUE(std::isfinite(row.loss));
  }
}

// ----------------------------------------------------------------- prior

TEST_F(PosteriorSearch, FixedPriorModeReturnsInit) {
  cfg.prior_mode = PriorMode::fixed;
  const auto p = tune_prior(prior, model, data, cfg, 0.1, 1);
  EXPECT_EQ(p.mu.values, prior.mu.values);
  EXPECT_EQ(p.log_sigma.values, prior.log_sigma.values);
}

TEST_F(PosteriorSearch, TuneMeanFreezesSigmaAndDescends) {
  const Dataset d0 = hetero(250, 30);
  cfg.prior_mode = PriorMode::tune_mean;
  cfg.prior_steps = 200;
  const auto p = tune_prior(prior, model, d0, cfg, 0.1, 2);
  EXPECT_EQ(p.log_sigma.values, prior.log_sigma.values);
  EXPECT_NE(p.mu.values, prior.mu.values);
  Rng rng(31);
  const auto noise = draw_noise(rng, 8, prior.size());
  EXPECT_LT(loss_value(p, model, d0, 0.1, cfg, noise), loss_value(prior, model, d0, 0.1, cfg, noise));

  cfg.prior_mode = PriorMode::tune_mean_var;
  const auto pv = tune_prior(prior, model, d0, cfg, 0.1, 2);
  EXPECT_NE(pv.log_sigma.values, prior.log_sigma.values);
  EXPECT_LT(loss_value(pv, model, d0, 0.1, cfg, noise), loss_value(prior, model, d0, 0.1, cfg, noise));
}

// --------------------------------------------------------------- baselines

TEST_F(PosteriorSearch, LearnedWithoutTrainingEqualsStandard) {
  cfg.learned_steps = 0;
  const ParamVector theta = prior.mu;
  for (IcpBound bound : {IcpBound::vovk2a, IcpBound::vovk2b}) {
    const auto std_run = standard_baseline(model, theta, data, cfg.alpha, cfg.delta, bound);
    const auto learned = learned_baseline(model, theta, Dataset{Mat(0, 1), Vec(0)}, data, cfg, bound, 5);
    EXPECT_EQ(learned.alpha_hat, std_run.alpha_hat);
    EXPECT_EQ(learned.predictor.samples[0].tau, std_run.predictor.samples[0].tau);
    EXPECT_EQ(learned.theta.values, std_run.theta.values);
  }
  EXPECT_EQ(standard_baseline(model, theta, data, 0.1, 0.05, IcpBound::vovk2a).alpha_hat,
            vovk_2a_alpha_hat(0.1, 0.05, data.size()));
}

TEST_F(PosteriorSearch, Vovk2bNeverGivesLargerThresholds) {
  const Dataset d0 = hetero(300, 40);
  for (unsigned seed = 0; seed < 4; ++seed) {
    const Dataset dn = hetero(200 + 100 * seed, 41 + seed);
    const auto a = learned_baseline(model, prior.mu, d0, dn, cfg, IcpBound::vovk2a, seed);
    const auto b = learned_baseline(model, prior.mu, d0, dn, cfg, IcpBound::vovk2b, seed);
    EXPECT_GE(b.alpha_hat, a.alpha_hat);
    // Same optimisation target only if the levels coincide; compare on a's theta.
    const double tau_b_on_a = calibrate(model, a.theta, dn, b.alpha_hat);
    EXPECT_LE(tau_b_on_a, a.predictor.samples[0].tau);
  }
  EXPECT_THROW(learned_baseline(model, prior.mu, d0, Dataset{Mat(0, 1), Vec(0)}, cfg, IcpBound::vovk2a, 1),
               InfeasibleError);
}

TEST_F(PosteriorSearch, LearnedTrainingShrinksIntervals) {
  const Dataset d0 = hetero(500, 50);
  const Dataset dn = hetero(500, 51);
  const Dataset test = hetero(20000, 52);
  cfg.learned_steps = 300;
  const auto std_run = standard_baseline(model, prior.mu, dn, cfg.alpha, cfg.delta, IcpBound::vovk2a);
  const auto learned = learned_baseline(model, prior.mu, d0, dn, cfg, IcpBound::vovk2a, 5);
  EXPECT_LT(evaluate(learned.predictor, test, 1).mean_efficiency, evaluate(std_run.predictor, test, 1).mean_efficiency);
}

// ------------------------------------------------------------ grid search

TEST_F(PosteriorSearch, SingleLevelGridIsOnePlainRun) {
  const Dataset d0 = hetero(200, 60);
  cfg.alpha_hat_grid = {0.8};
  const auto g = alpha_hat_grid_search(prior, model, d0, data, cfg, 77);
  ASSERT_FALSE(g.fallback);
  EXPECT_EQ(g.delta_per_run, cfg.delta);
  const double a = 0.8 * budget_zero_alpha_hat(cfg.alpha, cfg.delta, data.size());
  EXPECT_DOUBLE_EQ(g.alpha_hat, a);
  const std::uint64_t run_seed = stream_key({77, 0});
  const DiagGaussian p = tune_prior(prior, model, d0, cfg, a, run_seed);
  const auto r = optimize_posterior(p, model, data, cfg, a, run_seed);
  EXPECT_EQ(g.posterior.mu.values, r.posterior.mu.values);
  EXPECT_EQ(g.posterior.log_sigma.values, r.posterior.log_sigma.values);
  EXPECT_EQ(g.kl, r.kl);
  EXPECT_LE(g.kl, g.budget + 1e-6);
  ASSERT_TRUE(g.predictor.certificate.has_value());
  EXPECT_EQ(g.predictor.certificate->kl_qp, g.kl);
  EXPECT_EQ(static_cast<long>(g.predictor.samples.size()), cfg.predictor_samples);
}

TEST_F(PosteriorSearch, FiveLevelGridSplitsDeltaAndTakesTheArgmin) {
  const Dataset d0 = hetero(200, 61);
  cfg.alpha_hat_grid = {0.2, 0.35, 0.5, 0.65, 0.8};
  cfg.inner_steps = 30;
  cfg.prior_steps = 30;
  const auto g = alpha_hat_grid_search(prior, model, d0, data, cfg, 5);
  EXPECT_DOUBLE_EQ(g.delta_per_run, 0.01);
  ASSERT_EQ(g.runs.size(), 5U);
  for (const auto& run : g.runs) {
    EXPECT_LE(g.efficiency.upper_bound, run.efficiency.upper_bound);
    EXPECT_LE(run.kl, run.budget + 1e-6);
    EXPECT_LE(run.coverage.upper_bound, cfg.alpha + 1e-9);
  }
  EXPECT_EQ(g.predictor.certificate->delta, 0.01);
}

TEST_F(PosteriorSearch, GridLevelsShareOneScoreBound) {
  const Dataset d0 = hetero(200, 62);
  cfg.alpha_hat_grid = {0.3, 0.6, 0.9};
  cfg.inner_steps = 20;
  cfg.prior_steps = 20;
  cfg.l_tau = 0.5;
  const auto g = alpha_hat_grid_search(prior, model, d0, data, cfg, 9);
  ASSERT_EQ(g.runs.size(), 3U);
  // With L fixed, equal Lipschitz terms mean equal beta across levels.
  for (const auto& run : g.runs) EXPECT_EQ(run.efficiency.lipschitz_term, g.runs[0].efficiency.lipschitz_term);
  // The shared beta bounds every level's calibration scores.
  const double n = static_cast<double>(data.size());
  EXPECT_NEAR(g.predictor.certificate->beta, g.runs[0].efficiency.lipschitz_term * std::sqrt(n) / (2.0 * 0.5), 1e-9);
  for (const auto& pair : g.predictor.samples) {
    EXPECT_LE(scores(model, pair.theta, data).maxCoeff(), g.predictor.certificate->beta + 1e-12);
  }

  cfg.beta = 7.0;
  const auto fixed = alpha_hat_grid_search(prior, model, d0, data, cfg, 9);
  EXPECT_EQ(fixed.predictor.certificate->beta, 7.0);
  EXPECT_NEAR(fixed.runs[1].efficiency.lipschitz_term, 2.0 * 7.0 * 0.5 / std::sqrt(n), 1e-12);
}

TEST_F(PosteriorSearch, TinyCalibrationSetFallsBack) {
  const auto g = alpha_hat_grid_search(prior, model, hetero(50, 70), hetero(8, 71), cfg, 1);
  EXPECT_TRUE(g.fallback);
  EXPECT_TRUE(g.runs.empty());
}

TEST(OptimConfig, ValidationRejectsNonsense) {
  OptimConfig c;
  EXPECT_NO_THROW(c.validate());
  c.minibatch = 1;
  EXPECT_THROW(c.validate(), DomainError);
  c = OptimConfig{};
  c.alpha_hat_grid = {};
  EXPECT_THROW(c.validate(), DomainError);
  c = OptimConfig{};
  c.data_split = 1.0;
  EXPECT_THROW(c.validate(), DomainError);
  c = OptimConfig{};
  c.rho_growth = 0.5;
  EXPECT_THROW(c.validate(), DomainError);
}
