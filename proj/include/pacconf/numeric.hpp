#pragma once

// Special functions and integer-rounding helpers used by the bound
// calculus. Everything here is pure and thread-safe.

#include <cmath>
#include <limits>

#include "pacconf/error.hpp"

namespace pacconf {

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// Slack absorbed by count rounding so that e.g. 0.29 * 100 floors to 29.
inline constexpr double kCountSlack = 1e-9;

/// floor(x) for quantities that are mathematically integer counts.
inline long floor_count(double x) { return static_cast<long>(std::floor(x + kCountSlack)); }

/// ceil(x) for quantities that are mathematically integer counts.
inline long ceil_count(double x) { return static_cast<long>(std::ceil(x - kCountSlack)); }

/// ln Gamma(x) for x > 0. Reentrant (does not touch the global signgam).
inline double log_gamma(double x) {
#if defined(__GLIBC__)
  int sign = 0;
  return ::lgamma_r(x, &sign);
#else
  return std::lgamma(x);
#endif
}

inline double log_beta_function(double a, double b) {
  return log_gamma(a) + log_gamma(b) - log_gamma(a + b);
}

/// x * ln(y) with the 0 * ln(0) = 0 convention.
inline double xlogy(double x, double y) {
  if (x == 0.0) return 0.0;
  return x * std::log(y);
}

/// ln of the Beta(a, b) density at x in [0, 1].
inline double beta_log_pdf(double x, double a, double b) {
  if (!(a > 0.0) || !(b > 0.0)) throw DomainError("beta_log_pdf: shape parameters must be positive");
  if (x < 0.0 || x > 1.0) return -kInf;
  return xlogy(a - 1.0, x) + xlogy(b - 1.0, 1.0 - x) - log_beta_function(a, b);
}

namespace detail {

// Modified Lentz evaluation of the continued fraction for I_x(a, b).
inline double incbeta_continued_fraction(double x, double a, double b) {
  constexpr double kTiny = 1e-300;
  constexpr double kEps = 1e-16;
  constexpr int kMaxIter = 200000;

  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) return h;
  }
  throw DomainError("regularized_incomplete_beta: continued fraction did not converge");
}

}  // namespace detail

/// Regularized incomplete beta function I_x(a, b).
///
/// The prefactor x^a (1-x)^b / (a B(a, b)) is formed in log space, so large
/// integer shapes (calibration sets of 10^5 points) do not overflow.
inline double regularized_incomplete_beta(double x, double a, double b) {
  if (!(a > 0.0) || !(b > 0.0)) throw DomainError("regularized_incomplete_beta: a, b must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw DomainError("regularized_incomplete_beta: x must lie in [0,1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front = a * std::log(x) + b * std::log1p(-x) - log_beta_function(a, b);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return std::exp(log_front) * detail::incbeta_continued_fraction(x, a, b) / a;
  }
  return 1.0 - std::exp(log_front) * detail::incbeta_continued_fraction(1.0 - x, b, a) / b;
}

inline double beta_cdf(double x, double a, double b) { return regularized_incomplete_beta(x, a, b); }

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// ln(1 + e^z) without overflow.
inline double softplus(double z) {
  if (z > 0.0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

}  // namespace pacconf
