#include "mtaf/stats.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>

namespace mtaf::stats {

namespace {

double log_beta(double a, double b) { return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b); }

// Continued fraction for the incomplete beta (modified Lentz).
double incbeta_cf(double x, double a, double b) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-16;
  double c = 1.0;
  double d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double result = d;
  for (int m = 1; m <= 400; ++m) {
    double m2 = 2.0 * m;
    // even term
    double num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + num * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    result *= d * c;
    // odd term
    num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + num * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    double delta = d * c;
    result *= delta;
    if (std::fabs(delta - 1.0) < eps) return result;
  }
  throw NumericError("incomplete beta continued fraction did not converge");
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z * M_SQRT1_2); }
double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI); }

// 20-point Gauss-Legendre nodes/weights on [-1, 1].
constexpr std::array<double, 10> kGlNodes = {
    0.0765265211334973, 0.2277858511416451, 0.3737060887154196, 0.5108670019508271,
    0.6360536807265150, 0.7463319064601508, 0.8391169718222188, 0.9122344282513259,
    0.9639719272779138, 0.9931285991850949};
constexpr std::array<double, 10> kGlWeights = {
    0.1527533871307258, 0.1491729864726037, 0.1420961093183820, 0.1316886384491766,
    0.1181945319615184, 0.1019301198172404, 0.0832767415767048, 0.0626720483341091,
    0.0406014298003869, 0.0176140071391521};

// Composite 20-point Gauss-Legendre over [lo, hi] split into n panels.
template <typename F>
double gauss_legendre(F&& f, double lo, double hi, int panels) {
  double total = 0.0;
  double width = (hi - lo) / panels;
  for (int p = 0; p < panels; ++p) {
    double a = lo + p * width;
    double mid = a + 0.5 * width;
    double half = 0.5 * width;
    for (size_t i = 0; i < kGlNodes.size(); ++i) {
      total += kGlWeights[i] * half *
               (f(mid - half * kGlNodes[i]) + f(mid + half * kGlNodes[i]));
    }
  }
  return total;
}

// P(range of k iid standard normals <= w); z integrates over the location of
// the maximum.
double normal_range_cdf(double w, int k, int panels) {
  if (w <= 0.0) return 0.0;
  auto integrand = [&](double z) {
    double span = normal_cdf(z) - normal_cdf(z - w);
    if (span <= 0.0) return 0.0;
    return k * normal_pdf(z) * std::pow(span, k - 1);
  };
  return gauss_legendre(integrand, -9.0, 9.0, panels);
}

// Density of s = chi_df / sqrt(df), evaluated in log space for large df.
double chi_scale_log_pdf(double s, double df) {
  if (s <= 0.0) return -std::numeric_limits<double>::infinity();
  double half = 0.5 * df;
  return half * std::log(half) - std::lgamma(half) + std::log(2.0) + (df - 1.0) * std::log(s) -
         half * s * s;
}

double studentized_range_cdf_once(double q, int k, double df, int panels) {
  // Integration bounds for the scale: the chi_df/sqrt(df) density piles up
  // around 1 with spread ~ 1/sqrt(2 df).
  double spread = 1.0 / std::sqrt(2.0 * df);
  double lo = std::max(0.0, 1.0 - 12.0 * spread);
  double hi = 1.0 + 12.0 * spread;
  if (df < 50.0) {
    lo = 0.0;
    hi = std::max(3.0, 1.0 + 20.0 * spread);
  }
  auto outer = [&](double s) {
    double lp = chi_scale_log_pdf(s, df);
    if (lp < -700.0) return 0.0;
    return std::exp(lp) * normal_range_cdf(q * s, k, panels);
  };
  return gauss_legendre(outer, lo, hi, panels);
}

}  // namespace

double regularized_incomplete_beta(double x, double a, double b) {
  if (a <= 0.0 || b <= 0.0) throw UsageError("incomplete beta requires a, b > 0");
  if (x < 0.0 || x > 1.0) throw UsageError("incomplete beta requires x in [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  double front = std::exp(a * std::log(x) + b * std::log1p(-x) - log_beta(a, b));
  if (x < (a + 1.0) / (a + b + 2.0)) return front * incbeta_cf(x, a, b) / a;
  return 1.0 - std::exp(b * std::log1p(-x) + a * std::log(x) - log_beta(a, b)) *
                   incbeta_cf(1.0 - x, b, a) / b;
}

double f_cdf(double x, double d1, double d2) {
  if (d1 <= 0.0 || d2 <= 0.0) throw UsageError("f_cdf requires positive degrees of freedom");
  if (x < 0.0) throw UsageError("f_cdf requires x >= 0");
  if (x == 0.0) return 0.0;
  return regularized_incomplete_beta(d1 * x / (d1 * x + d2), 0.5 * d1, 0.5 * d2);
}

double t_cdf(double x, double df) {
  if (df <= 0.0) throw UsageError("t_cdf requires df > 0");
  double ib = regularized_incomplete_beta(df / (x * x + df), 0.5 * df, 0.5);
  return x >= 0.0 ? 1.0 - 0.5 * ib : 0.5 * ib;
}

double t_two_sided_p(double t, double df) {
  return regularized_incomplete_beta(df / (t * t + df), 0.5 * df, 0.5);
}

double studentized_range_cdf(double q, int k, double df, double tol) {
  if (k < 2) throw UsageError("studentized range requires k >= 2");
  if (df < 1.0) throw UsageError("studentized range requires df >= 1");
  if (q < 0.0) throw UsageError("studentized range requires q >= 0");
  if (q == 0.0) return 0.0;

  // With enormous df the scale is a point mass at 1.
  if (df >= 1e7) {
    double coarse = normal_range_cdf(q, k, 32);
    double fine = normal_range_cdf(q, k, 64);
    if (std::fabs(fine - coarse) > tol)
      throw NumericError("studentized range integration did not converge; achieved " +
                         std::to_string(std::fabs(fine - coarse)));
    return std::clamp(fine, 0.0, 1.0);
  }

  double prev = studentized_range_cdf_once(q, k, df, 16);
  for (int panels = 32; panels <= 128; panels *= 2) {
    double cur = studentized_range_cdf_once(q, k, df, panels);
    if (std::fabs(cur - prev) <= tol) return std::clamp(cur, 0.0, 1.0);
    prev = cur;
  }
  double final_pass = studentized_range_cdf_once(q, k, df, 256);
  if (std::fabs(final_pass - prev) <= tol) return std::clamp(final_pass, 0.0, 1.0);
  throw NumericError("studentized range integration did not converge; achieved " +
                     std::to_string(std::fabs(final_pass - prev)));
}

const EffectRow& AnovaTable::effect(const std::string& name) const {
  for (const auto& e : effects)
    if (e.name == name) return e;
  throw UsageError("no such effect in ANOVA table: " + name);
}

AnovaTable anova_one_way(const std::vector<std::vector<double>>& groups) {
  if (groups.size() < 2) throw UsageError("one-way ANOVA needs at least 2 groups");
  size_t n_total = 0;
  for (const auto& g : groups) {
    if (g.size() < 2) throw UsageError("one-way ANOVA needs at least 2 values per group");
    n_total += g.size();
  }
  double grand = 0.0;
  for (const auto& g : groups) grand = std::accumulate(g.begin(), g.end(), grand);
  grand /= static_cast<double>(n_total);

  double ss_between = 0.0, ss_within = 0.0;
  for (const auto& g : groups) {
    double mean = std::accumulate(g.begin(), g.end(), 0.0) / g.size();
    ss_between += g.size() * (mean - grand) * (mean - grand);
    for (double v : g) ss_within += (v - mean) * (v - mean);
  }
  long long df_between = static_cast<long long>(groups.size()) - 1;
  long long df_within = static_cast<long long>(n_total) - static_cast<long long>(groups.size());
  if (ss_within <= 0.0) throw DataError("zero residual variance");

  AnovaTable t;
  EffectRow between{"between", ss_between, df_between, ss_between / df_between, 0.0, 1.0};
  EffectRow residual{"residual", ss_within, df_within, ss_within / df_within, 0.0, 1.0};
  between.f = between.ms / residual.ms;
  between.p = 1.0 - f_cdf(between.f, static_cast<double>(df_between), static_cast<double>(df_within));
  t.effects = {between, residual};
  t.ss_total = ss_between + ss_within;
  return t;
}

AnovaTable anova_two_way(const std::vector<double>& values, const std::vector<std::string>& factor_a,
                         const std::vector<std::string>& factor_b) {
  const size_t n = values.size();
  if (factor_a.size() != n || factor_b.size() != n)
    throw UsageError("two-way ANOVA: factor label lengths must match the values");
  if (n == 0) throw UsageError("two-way ANOVA: empty data");

  std::vector<std::string> levels_a, levels_b;
  for (const auto& a : factor_a)
    if (std::find(levels_a.begin(), levels_a.end(), a) == levels_a.end()) levels_a.push_back(a);
  for (const auto& b : factor_b)
    if (std::find(levels_b.begin(), levels_b.end(), b) == levels_b.end()) levels_b.push_back(b);
  if (levels_a.size() < 2) throw UsageError("single-level factor: A");
  if (levels_b.size() < 2) throw UsageError("single-level factor: B");

  std::map<std::pair<std::string, std::string>, std::vector<double>> cells;
  for (size_t i = 0; i < n; ++i) cells[{factor_a[i], factor_b[i]}].push_back(values[i]);

  size_t cell_n = 0;
  for (const auto& a : levels_a) {
    for (const auto& b : levels_b) {
      auto it = cells.find({a, b});
      if (it == cells.end())
        throw DataError("incomplete design: empty cell (" + a + ", " + b + ")");
      if (cell_n == 0) cell_n = it->second.size();
      if (it->second.size() != cell_n)
        throw DataError("unbalanced design at cell (" + a + ", " + b + "): " +
                        std::to_string(it->second.size()) + " vs " + std::to_string(cell_n));
    }
  }
  if (cell_n < 2) throw DataError("two-way ANOVA needs at least 2 replicates per cell");

  const double grand = std::accumulate(values.begin(), values.end(), 0.0) / n;
  const size_t ka = levels_a.size(), kb = levels_b.size();

  std::map<std::string, double> mean_a, mean_b;
  for (const auto& a : levels_a) {
    double s = 0.0;
    for (const auto& b : levels_b)
      s += std::accumulate(cells[{a, b}].begin(), cells[{a, b}].end(), 0.0);
    mean_a[a] = s / (kb * cell_n);
  }
  for (const auto& b : levels_b) {
    double s = 0.0;
    for (const auto& a : levels_a)
      s += std::accumulate(cells[{a, b}].begin(), cells[{a, b}].end(), 0.0);
    mean_b[b] = s / (ka * cell_n);
  }

  double ss_a = 0.0, ss_b = 0.0, ss_ab = 0.0, ss_e = 0.0;
  for (const auto& a : levels_a) ss_a += (mean_a[a] - grand) * (mean_a[a] - grand);
  ss_a *= kb * cell_n;
  for (const auto& b : levels_b) ss_b += (mean_b[b] - grand) * (mean_b[b] - grand);
  ss_b *= ka * cell_n;
  for (const auto& a : levels_a) {
    for (const auto& b : levels_b) {
      const auto& cell = cells[{a, b}];
      double cm = std::accumulate(cell.begin(), cell.end(), 0.0) / cell.size();
      double dev = cm - mean_a[a] - mean_b[b] + grand;
      ss_ab += dev * dev;
      for (double v : cell) ss_e += (v - cm) * (v - cm);
    }
  }
  ss_ab *= cell_n;
  if (ss_e <= 0.0) throw DataError("zero residual variance");

  long long df_a = static_cast<long long>(ka) - 1;
  long long df_b = static_cast<long long>(kb) - 1;
  long long df_ab = df_a * df_b;
  long long df_e = static_cast<long long>(ka * kb) * (static_cast<long long>(cell_n) - 1);

  AnovaTable t;
  EffectRow ra{"A", ss_a, df_a, ss_a / df_a, 0.0, 1.0};
  EffectRow rb{"B", ss_b, df_b, ss_b / df_b, 0.0, 1.0};
  EffectRow rab{"AxB", ss_ab, df_ab, ss_ab / df_ab, 0.0, 1.0};
  EffectRow re{"residual", ss_e, df_e, ss_e / df_e, 0.0, 1.0};
  for (EffectRow* r : {&ra, &rb, &rab}) {
    r->f = r->ms / re.ms;
    r->p = 1.0 - f_cdf(r->f, static_cast<double>(r->df), static_cast<double>(df_e));
  }
  t.effects = {ra, rb, rab, re};
  t.ss_total = ss_a + ss_b + ss_ab + ss_e;
  return t;
}

TukeyResult tukey_hsd(const std::vector<std::vector<double>>& groups, double alpha) {
  if (groups.size() < 2) throw UsageError("Tukey HSD needs at least 2 groups");
  const size_t group_n = groups.front().size();
  for (const auto& g : groups) {
    if (g.size() < 2) throw UsageError("Tukey HSD needs at least 2 values per group");
    if (g.size() != group_n) throw UsageError("Tukey HSD requires equal group sizes");
  }

  const size_t k = groups.size();
  std::vector<double> means(k);
  double ss_within = 0.0;
  for (size_t i = 0; i < k; ++i) {
    means[i] = std::accumulate(groups[i].begin(), groups[i].end(), 0.0) / group_n;
    for (double v : groups[i]) ss_within += (v - means[i]) * (v - means[i]);
  }
  long long df_within = static_cast<long long>(k * (group_n - 1));
  double ms_within = ss_within / df_within;
  if (ms_within <= 0.0) throw DataError("zero within-group variance");

  double se = std::sqrt(ms_within / static_cast<double>(group_n));
  TukeyResult result;
  result.ms_within = ms_within;
  result.df_within = df_within;
  for (size_t i = 0; i < k; ++i) {
    for (size_t j = i + 1; j < k; ++j) {
      TukeyPair pair;
      pair.group_i = i;
      pair.group_j = j;
      pair.mean_diff = means[i] - means[j];
      pair.q = std::fabs(pair.mean_diff) / se;
      pair.p = 1.0 - studentized_range_cdf(pair.q, static_cast<int>(k),
                                           static_cast<double>(df_within));
      pair.p = std::clamp(pair.p, 0.0, 1.0);
      pair.significant = pair.p < alpha;
      result.pairs.push_back(pair);
    }
  }
  return result;
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  const size_t n = v.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    double avg = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

Correlation pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw UsageError("correlation inputs must have equal length");
  const size_t n = x.size();
  if (n < 3) throw UsageError("correlation needs at least 3 observations");
  double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw DataError("undefined correlation: constant vector");
  Correlation c;
  c.rho = sxy / std::sqrt(sxx * syy);
  double r = std::clamp(c.rho, -1.0, 1.0);
  if (std::fabs(r) >= 1.0) {
    c.p = 0.0;
  } else {
    double t = r * std::sqrt((n - 2) / (1.0 - r * r));
    c.p = t_two_sided_p(t, static_cast<double>(n - 2));
  }
  return c;
}

Correlation spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw UsageError("correlation inputs must have equal length");
  if (x.size() < 3) throw UsageError("correlation needs at least 3 observations");
  return pearson(average_ranks(x), average_ranks(y));
}

}  // namespace mtaf::stats
