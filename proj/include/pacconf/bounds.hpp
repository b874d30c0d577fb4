#pragma once

// Closed-form certificates for inductive conformal prediction: Bernoulli KL
// and its inverse, the two classical PAC calibration corrections, and the
// PAC-Bayes coverage / efficiency bounds together with the KL budget they
// imply for a data-dependent posterior.

#include <cmath>
#include <string>

#include "pacconf/error.hpp"
#include "pacconf/numeric.hpp"

namespace pacconf {

/// kl(p || q) between Bernoulli(p) and Bernoulli(q). Returns +inf when q is
/// 0 or 1 and p differs from it.
inline double bernoulli_kl(double p, double q) {
  if (p < 0.0 || p > 1.0 || q < 0.0 || q > 1.0 || std::isnan(p) || std::isnan(q)) {
    throw DomainError("bernoulli_kl: arguments must lie in [0, 1]");
  }
  double out = 0.0;
  if (p > 0.0) {
    if (q == 0.0) return kInf;
    out += p * std::log(p / q);
  }
  if (p < 1.0) {
    if (q == 1.0) return kInf;
    out += (1.0 - p) * std::log((1.0 - p) / (1.0 - q));
  }
  return out;
}

/// Largest q in [p, 1] with kl(p || q) <= c, by bisection to 1e-12.
inline double kl_inverse_upper(double p, double c) {
  if (p < 0.0 || p > 1.0) throw DomainError("kl_inverse_upper: p must lie in [0, 1]");
  if (!std::isfinite(c)) throw DomainError("kl_inverse_upper: radius must be finite");
  if (c <= 0.0 || p >= 1.0) return p;
  double lo = p;
  double hi = 1.0;
  while (hi - lo > 1e-12) {
    const double mid = 0.5 * (lo + hi);
    if (bernoulli_kl(p, mid) <= c) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return lo;
}

/// Calibration level alpha_hat = alpha - sqrt(-ln(delta) / 2N) giving
/// test miscoverage <= alpha with probability >= 1 - delta (Hoeffding form).
/// Throws InfeasibleError when the correction consumes all of alpha.
inline double vovk_2a_alpha_hat(double alpha, double delta, long n) {
  if (n < 1) throw DomainError("vovk_2a_alpha_hat: n must be >= 1");
  if (!(alpha > 0.0 && alpha < 1.0) || !(delta > 0.0 && delta <= 1.0)) {
    throw DomainError("vovk_2a_alpha_hat: alpha in (0,1), delta in (0,1] required");
  }
  const double alpha_hat = alpha - std::sqrt(-std::log(delta) / (2.0 * static_cast<double>(n)));
  if (alpha_hat <= 0.0) {
    throw InfeasibleError("calibration set too small for this guarantee (n = " + std::to_string(n) + ")");
  }
  return alpha_hat;
}

/// Largest alpha_hat in (0, alpha) with
///   delta >= I_{1-alpha}(N - m, m + 1),  m = floor(alpha_hat (N+1) - 1).
///
/// Every alpha_hat in [(m+1)/(N+1), (m+2)/(N+1)) induces the same
/// calibration threshold, so the search runs over the integer m. The value
/// returned sits just below the upper end of the feasible class.
inline double vovk_2b_alpha_hat(double alpha, double delta, long n) {
  if (n < 1) throw DomainError("vovk_2b_alpha_hat: n must be >= 1");
  if (!(alpha > 0.0 && alpha < 1.0) || !(delta > 0.0 && delta <= 1.0)) {
    throw DomainError("vovk_2b_alpha_hat: alpha in (0,1), delta in (0,1] required");
  }
  const double n1 = static_cast<double>(n + 1);
  // Largest m whose class still starts strictly below alpha.
  long m_max = ceil_count(alpha * n1) - 2;
  m_max = std::min(m_max, n - 1);
  const auto tail = [&](long m) {
    return regularized_incomplete_beta(1.0 - alpha, static_cast<double>(n - m), static_cast<double>(m + 1));
  };
  if (m_max < 0 || tail(0) > delta) {
    throw InfeasibleError("calibration set too small for this guarantee (n = " + std::to_string(n) + ")");
  }
  // The tail probability is nondecreasing in m: binary search for the last feasible m.
  long lo = 0;
  long hi = m_max;
  while (lo < hi) {
    const long mid = lo + (hi - lo + 1) / 2;
    if (tail(mid) <= delta) {
      lo = mid;
    } else {
      hi = mid - 1;
    }
  }
  const double upper = std::min((static_cast<double>(lo) + 2.0) / n1, alpha);
  return upper - 1e-7 / n1;
}

/// k = floor((N+1) alpha_hat), the rank driving the PAC-Bayes coverage bound.
inline long coverage_rank(double alpha_hat, long n) {
  return floor_count(static_cast<double>(n + 1) * alpha_hat);
}

/// ln B(N) where B(N) is the Beta(k, N+1-k) density at (k-1)/(N-1).
inline double log_b_constant(double alpha_hat, long n) {
  if (n < 2) throw DomainError("log_b_constant: n must be >= 2");
  const long k = coverage_rank(alpha_hat, n);
  if (k < 1 || k > n) {
    throw DomainError("log_b_constant: requires n > 1/alpha_hat - 1 (k = " + std::to_string(k) + ")");
  }
  const double a = static_cast<double>(k - 1) / static_cast<double>(n - 1);
  return beta_log_pdf(a, static_cast<double>(k), static_cast<double>(n + 1 - k));
}

struct BoundInputs {
  double alpha = 0.1;
  double alpha_hat = 0.1;
  double delta = 0.05;
  long n = 0;
  double kl_qp = 0.0;

  void validate() const {
    if (!(alpha_hat > 0.0 && alpha_hat <= alpha && alpha < 1.0)) {
      throw DomainError("BoundInputs: require 0 < alpha_hat <= alpha < 1");
    }
    if (!(delta > 0.0 && delta < 1.0)) throw DomainError("BoundInputs: require 0 < delta < 1");
    if (!(kl_qp >= 0.0)) throw DomainError("BoundInputs: KL(Q||P) must be non-negative");
    if (n < 2 || !(static_cast<double>(n) > 1.0 / alpha_hat - 1.0)) {
      throw DomainError("BoundInputs: require n > 1/alpha_hat - 1");
    }
  }
};

struct CoverageCertificate {
  double upper_bound = 1.0;     ///< bound on randomized test miscoverage
  double empirical_rate = 0.0;  ///< (floor((N+1) alpha_hat) - 1) / (N - 1)
  double kl_radius = 0.0;       ///< (KL + ln B(N) + ln(1/delta)) / (N - 1)
};

struct EfficiencyCertificate {
  double upper_bound = 0.0;
  double empirical_mean = 0.0;
  double lipschitz_term = 0.0;  ///< 2 beta L_tau / sqrt(N)
  double kl_term = 0.0;         ///< sqrt(KL/2 + ln(2N/gamma)/2) / sqrt(N-1)
};

/// Upper bound on the randomized miscoverage of any posterior Q, obtained by
/// inverting the kl form of the PAC-Bayes coverage bound.
inline CoverageCertificate coverage_upper_bound(const BoundInputs& b) {
  b.validate();
  const long k = coverage_rank(b.alpha_hat, b.n);
  const double nm1 = static_cast<double>(b.n - 1);
  CoverageCertificate cert;
  cert.empirical_rate = static_cast<double>(k - 1) / nm1;
  cert.kl_radius = (b.kl_qp + log_b_constant(b.alpha_hat, b.n) - std::log(b.delta)) / nm1;
  cert.upper_bound = kl_inverse_upper(cert.empirical_rate, std::max(cert.kl_radius, 0.0));
  return cert;
}

/// Largest KL(Q||P) for which test miscoverage <= alpha stays certified.
/// Negative values mean no posterior (not even Q = P) is certifiable; they
/// are returned unclamped.
inline double kl_budget(double alpha, double alpha_hat, double delta, long n) {
  BoundInputs b{alpha, alpha_hat, delta, n, 0.0};
  b.validate();
  const long k = coverage_rank(alpha_hat, n);
  const double rate = static_cast<double>(k - 1) / static_cast<double>(n - 1);
  return static_cast<double>(n - 1) * bernoulli_kl(rate, alpha) - (log_b_constant(alpha_hat, n) - std::log(delta));
}

/// Largest alpha_hat (on the lattice k/(N+1)) whose KL budget is still
/// non-negative: the zero crossing of kl_budget. Throws InfeasibleError when
/// no level is certifiable.
inline double budget_zero_alpha_hat(double alpha, double delta, long n) {
  if (n < 2) throw DomainError("budget_zero_alpha_hat: n must be >= 2");
  const double n1 = static_cast<double>(n + 1);
  const long k_max = floor_count(alpha * n1);
  for (long k = std::min(k_max, n); k >= 1; --k) {
    const double alpha_hat = static_cast<double>(k) / n1;
    if (alpha_hat > alpha || !(static_cast<double>(n) > 1.0 / alpha_hat - 1.0)) continue;
    if (kl_budget(alpha, alpha_hat, delta, n) >= 0.0) return alpha_hat;
  }
  throw InfeasibleError("no certifiable alpha_hat for n = " + std::to_string(n));
}

/// PAC-Bayes bound on expected test efficiency (efficiency scaled to [0, 1]).
inline EfficiencyCertificate efficiency_upper_bound(double empirical_mean, double kl_qp, double beta, double l_tau,
                                                    long n, double gamma) {
  if (empirical_mean < 0.0 || empirical_mean > 1.0) {
    throw DomainError("efficiency_upper_bound: empirical mean must lie in [0, 1]");
  }
  if (!(beta > 0.0) || !(l_tau > 0.0)) throw DomainError("efficiency_upper_bound: beta, L_tau must be positive");
  if (n < 2) throw DomainError("efficiency_upper_bound: n must be >= 2");
  if (!(gamma > 0.0 && gamma < 1.0)) throw DomainError("efficiency_upper_bound: gamma must lie in (0, 1)");
  if (!(kl_qp >= 0.0)) throw DomainError("efficiency_upper_bound: KL must be non-negative");
  const double nd = static_cast<double>(n);
  EfficiencyCertificate cert;
  cert.empirical_mean = empirical_mean;
  cert.lipschitz_term = 2.0 * beta * l_tau / std::sqrt(nd);
  cert.kl_term = std::sqrt(0.5 * kl_qp + 0.5 * std::log(2.0 * nd / gamma)) / std::sqrt(nd - 1.0);
  cert.upper_bound = cert.empirical_mean + cert.lipschitz_term + cert.kl_term;
  return cert;
}

}  // namespace pacconf
