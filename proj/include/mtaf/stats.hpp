#pragma once

#include <string>
#include <vector>

#include "mtaf/common.hpp"

namespace mtaf::stats {

// Regularized incomplete beta I_x(a, b), continued-fraction evaluation
// (modified Lentz). Absolute accuracy ~1e-14 over the usual ANOVA range.
double regularized_incomplete_beta(double x, double a, double b);

// F-distribution CDF with d1, d2 degrees of freedom.
double f_cdf(double x, double d1, double d2);

// Student's t CDF, and the two-sided tail 2*(1 - cdf(|t|)).
double t_cdf(double x, double df);
double t_two_sided_p(double t, double df);

// CDF of the studentized range statistic with k groups and df residual
// degrees of freedom: outer integration over the chi-based scale, inner over
// the normal location, fixed-order Gauss-Legendre panels refined until the
// result is stable to `tol`. Throws NumericError when refinement fails.
double studentized_range_cdf(double q, int k, double df, double tol = 1e-6);

struct EffectRow {
  std::string name;
  double ss = 0.0;
  long long df = 0;
  double ms = 0.0;
  double f = 0.0;
  double p = 1.0;
};

struct AnovaTable {
  std::vector<EffectRow> effects;  // factors (+ interaction), residual last
  double ss_total = 0.0;
  const EffectRow& effect(const std::string& name) const;
  const EffectRow& residual() const { return effects.back(); }
};

AnovaTable anova_one_way(const std::vector<std::vector<double>>& groups);

// Balanced two-way ANOVA with interaction. Every (A, B) cell must hold the
// same count >= 2; anything else is an error naming the offending cell.
AnovaTable anova_two_way(const std::vector<double>& values,
                         const std::vector<std::string>& factor_a,
                         const std::vector<std::string>& factor_b);

struct TukeyPair {
  size_t group_i = 0;
  size_t group_j = 0;
  double mean_diff = 0.0;  // mean_i - mean_j
  double q = 0.0;
  double p = 1.0;
  bool significant = false;
};

struct TukeyResult {
  std::vector<TukeyPair> pairs;
  double ms_within = 0.0;
  long long df_within = 0;
};

// Tukey HSD over equal-sized groups.
TukeyResult tukey_hsd(const std::vector<std::vector<double>>& groups, double alpha = 0.05);

struct Correlation {
  double rho = 0.0;
  double p = 1.0;
};

// Spearman rank correlation with average ranks for ties; p from the
// t approximation, two-sided.
Correlation spearman(const std::vector<double>& x, const std::vector<double>& y);
// Pearson, exposed for comparison.
Correlation pearson(const std::vector<double>& x, const std::vector<double>& y);

// Average ranks (1-based) with ties sharing their mean rank.
std::vector<double> average_ranks(const std::vector<double>& v);

}  // namespace mtaf::stats
