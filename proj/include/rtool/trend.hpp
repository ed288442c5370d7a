#pragma once

// Least-squares slope with a one-tailed t-test, Student t / incomplete beta, and the
// exact binomial upper tail used as a meta-test across families.

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rtool/error.hpp"

namespace rtool {

namespace stats {

namespace detail {

// Continued fraction for the incomplete beta (modified Lentz).
inline double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
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
  return h;
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b) for a, b > 0 and x in [0, 1].
inline double incomplete_beta(double a, double b, double x) {
  if (!(a > 0) || !(b > 0)) throw ValidationError("incomplete_beta: a and b must be positive");
  if (x <= 0) return 0.0;
  if (x >= 1) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                           b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::betacf(a, b, x) / a;
  return 1.0 - front * detail::betacf(b, a, 1.0 - x) / b;
}

/// P(T <= t) for Student's t with df degrees of freedom.
inline double student_t_cdf(double t, double df) {
  if (!(df > 0)) throw ValidationError("student_t_cdf: df must be positive");
  if (t == 0) return 0.5;
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double x = df / (df + t * t);
  // tail = P(T > |t|); use the complementary argument when x is close to 1
  double tail;
  if (x > 0.5) {
    tail = 0.5 * (1.0 - incomplete_beta(0.5, 0.5 * df, t * t / (df + t * t)));
  } else {
    tail = 0.5 * incomplete_beta(0.5 * df, 0.5, x);
  }
  return t > 0 ? 1.0 - tail : tail;
}

/// P(T >= t).
inline double student_t_sf(double t, double df) { return student_t_cdf(-t, df); }

}  // namespace stats

enum class Direction { positive, negative };

struct SlopeFit {
  double slope = 0;
  double intercept = 0;
  double stderr_ = std::numeric_limits<double>::quiet_NaN();
  double t_stat = std::numeric_limits<double>::quiet_NaN();
  double p_one_tailed = std::numeric_limits<double>::quiet_NaN();
  std::size_t n = 0;
  /// False when n < 3: slope and intercept are still meaningful.
  bool inference_available = false;
  /// Residuals vanish, so the standard error is zero and t is unbounded.
  bool degenerate = false;
};

/// Ordinary least squares of y on x with a one-tailed test of the slope in `direction`.
inline SlopeFit slope_test(std::span<const double> x, std::span<const double> y,
                           Direction direction = Direction::positive) {
  if (x.size() != y.size()) throw ValidationError("slope_test: x and y differ in length");
  const std::size_t n = x.size();
  if (n < 2) throw ValidationError("slope_test: need at least two points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (sxx == 0) throw ValidationError("slope_test: x is constant");
  SlopeFit f;
  f.n = n;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  if (n < 3) return f;
  f.inference_available = true;
  double sse = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = y[i] - (f.intercept + f.slope * x[i]);
    sse += r * r;
  }
  const double df = static_cast<double>(n - 2);
  if (sse <= 1e-24 * syy || syy == 0) {
    f.degenerate = true;
    f.stderr_ = 0;
    if (f.slope == 0) {
      f.t_stat = 0;
      f.p_one_tailed = 0.5;
    } else {
      f.t_stat = f.slope > 0 ? HUGE_VAL : -HUGE_VAL;
      const bool agrees = (f.slope > 0) == (direction == Direction::positive);
      f.p_one_tailed = agrees ? 0.0 : 1.0;
    }
    return f;
  }
  f.stderr_ = std::sqrt(sse / df / sxx);
  f.t_stat = f.slope / f.stderr_;
  f.p_one_tailed = direction == Direction::positive ? stats::student_t_sf(f.t_stat, df)
                                                    : stats::student_t_cdf(f.t_stat, df);
  return f;
}

/// P(X >= k) for X ~ Binomial(n, p0), summed term by term.
inline double binomial_tail(long k, long n, double p0) {
  if (n < 0) throw ValidationError("binomial_tail: n must be >= 0");
  if (!(p0 >= 0 && p0 <= 1)) throw ValidationError("binomial_tail: p0 must be in [0, 1]");
  if (k <= 0) return 1.0;
  if (k > n) return 0.0;
  if (p0 == 0) return 0.0;
  if (p0 == 1) return 1.0;
  const long double lp = std::log(static_cast<long double>(p0));
  const long double lq = std::log1p(-static_cast<long double>(p0));
  const long double lgn = std::lgamma(static_cast<long double>(n) + 1);
  long double sum = 0;
  for (long i = k; i <= n; ++i) {
    const long double lchoose = lgn - std::lgamma(static_cast<long double>(i) + 1) -
                                std::lgamma(static_cast<long double>(n - i) + 1);
    sum += std::exp(lchoose + i * lp + (n - i) * lq);
  }
  return static_cast<double>(std::min<long double>(sum, 1.0L));
}

struct VariantPoint {
  double perplexity = 0;
  double metric = 0;
};

/// Slope of `metric` against natural-log perplexity. ΔLL is tested in the positive
/// direction, MSE in the negative one.
inline SlopeFit fit_trend(std::span<const VariantPoint> variants, Direction direction) {
  if (variants.size() < 2) throw ValidationError("fit_trend: need at least two variants");
  std::vector<double> x, y;
  for (const auto& v : variants) {
    if (!(v.perplexity > 0)) throw ValidationError("fit_trend: perplexity must be positive");
    x.push_back(std::log(v.perplexity));
    y.push_back(v.metric);
  }
  return slope_test(x, y, direction);
}

}  // namespace rtool
