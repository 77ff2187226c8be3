#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mtaf/common.hpp"
#include "mtaf/stats.hpp"

using namespace mtaf;
using namespace mtaf::stats;

TEST_CASE("f_cdf boundary and analytic values") {
  CHECK(f_cdf(0.0, 3, 7) == 0.0);
  // F(1,1) at 1 equals P(|T_1| <= 1) = 2*atan(1)/pi = 0.5
  CHECK(f_cdf(1.0, 1, 1) == doctest::Approx(0.5).epsilon(1e-9));
  CHECK_THROWS_AS(f_cdf(-1.0, 1, 1), UsageError);
  CHECK_THROWS_AS(f_cdf(1.0, 0, 1), UsageError);
}

TEST_CASE("I_x(1,1) = x identity") {
  for (double x : {0.0, 0.05, 0.2, 0.5, 0.77, 0.99, 1.0})
    CHECK(regularized_incomplete_beta(x, 1.0, 1.0) == doctest::Approx(x).epsilon(1e-12));
}

TEST_CASE("incomplete beta symmetry and t-distribution spot checks") {
  // I_x(a,b) = 1 - I_{1-x}(b,a)
  Rng rng(11);
  for (int i = 0; i < 50; ++i) {
    double x = rng.uniform();
    double a = 0.5 + 5.0 * rng.uniform();
    double b = 0.5 + 5.0 * rng.uniform();
    CHECK(regularized_incomplete_beta(x, a, b) ==
          doctest::Approx(1.0 - regularized_incomplete_beta(1.0 - x, b, a)).epsilon(1e-10));
  }
  // t(inf) ~ normal: t_cdf(1.96, huge df) ~ 0.975
  CHECK(t_cdf(1.959964, 1e8) == doctest::Approx(0.975).epsilon(1e-4));
  CHECK(t_cdf(0.0, 5) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("one-way ANOVA hand case") {
  auto table = anova_one_way({{1, 2, 3}, {4, 5, 6}});
  const auto& between = table.effect("between");
  const auto& resid = table.residual();
  CHECK(between.ss == doctest::Approx(13.5).epsilon(1e-9));
  CHECK(resid.ss == doctest::Approx(4.0).epsilon(1e-9));
  CHECK(between.df == 1);
  CHECK(resid.df == 4);
  CHECK(between.f == doctest::Approx(13.5).epsilon(1e-9));
  CHECK(std::fabs(between.p - 0.021) < 1e-3);
}

TEST_CASE("one-way ANOVA: identical group means, nonzero spread") {
  auto table = anova_one_way({{1, 3}, {1, 3}});
  CHECK(table.effect("between").f == doctest::Approx(0.0));
  CHECK(table.effect("between").p == doctest::Approx(1.0));
}

TEST_CASE("one-way ANOVA shift invariance") {
  Rng rng(5);
  std::vector<std::vector<double>> groups(3);
  for (auto& g : groups)
    for (int i = 0; i < 6; ++i) g.push_back(rng.normal());
  auto base = anova_one_way(groups);
  for (auto& g : groups)
    for (auto& v : g) v += 17.25;
  auto shifted = anova_one_way(groups);
  CHECK(shifted.effect("between").f == doctest::Approx(base.effect("between").f).epsilon(1e-9));
}

TEST_CASE("one-way ANOVA degenerate errors") {
  CHECK_THROWS_AS(anova_one_way({{1, 1}, {1, 1}}), DataError);      // zero residual
  CHECK_THROWS_AS(anova_one_way({{1.0, 2.0}}), UsageError);         // one group
  CHECK_THROWS_AS(anova_one_way({{1.0}, {2.0, 3.0}}), UsageError);  // group too small
}

TEST_CASE("two-way ANOVA hand case") {
  std::vector<double> values = {1, 3, 1, 3, 2, 4, 2, 4};
  std::vector<std::string> fa = {"a1", "a1", "a1", "a1", "a2", "a2", "a2", "a2"};
  std::vector<std::string> fb = {"b1", "b1", "b2", "b2", "b1", "b1", "b2", "b2"};
  auto table = anova_two_way(values, fa, fb);
  CHECK(table.effect("A").ss == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(table.effect("B").ss == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(table.effect("AxB").ss == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(table.residual().ss == doctest::Approx(8.0).epsilon(1e-9));
  CHECK(table.effect("A").df == 1);
  CHECK(table.residual().df == 4);
  CHECK(table.effect("A").f == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(std::fabs(table.effect("A").p - 0.374) < 1e-3);
}

TEST_CASE("two-way ANOVA rejects degenerate inputs") {
  std::vector<double> equal = {2, 2, 2, 2, 2, 2, 2, 2};
  std::vector<std::string> fa = {"a1", "a1", "a1", "a1", "a2", "a2", "a2", "a2"};
  std::vector<std::string> fb = {"b1", "b1", "b2", "b2", "b1", "b1", "b2", "b2"};
  CHECK_THROWS_WITH_AS(anova_two_way(equal, fa, fb), "zero residual variance", DataError);

  // unbalanced: drop one observation from cell (a2, b2)
  std::vector<double> vals = {1, 3, 1, 3, 2, 4, 2};
  std::vector<std::string> fa2(fa.begin(), fa.end() - 1), fb2(fb.begin(), fb.end() - 1);
  CHECK_THROWS_WITH_AS(anova_two_way(vals, fa2, fb2),
                       "unbalanced design at cell (a2, b2): 1 vs 2", DataError);
}

TEST_CASE("two-way ANOVA invariant under within-cell permutation") {
  std::vector<double> values = {1, 3, 1, 3, 2, 4, 2, 4};
  std::vector<std::string> fa = {"a1", "a1", "a1", "a1", "a2", "a2", "a2", "a2"};
  std::vector<std::string> fb = {"b1", "b1", "b2", "b2", "b1", "b1", "b2", "b2"};
  auto base = anova_two_way(values, fa, fb);
  std::vector<double> permuted = {3, 1, 3, 1, 4, 2, 4, 2};
  auto perm = anova_two_way(permuted, fa, fb);
  for (size_t i = 0; i < base.effects.size(); ++i) {
    CHECK(perm.effects[i].ss == doctest::Approx(base.effects[i].ss).epsilon(1e-12));
    CHECK(perm.effects[i].p == doctest::Approx(base.effects[i].p).epsilon(1e-12));
  }
}

TEST_CASE("two-way ANOVA decomposition and scale invariance properties") {
  Rng rng(99);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> values;
    std::vector<std::string> fa, fb;
    int na = 2 + static_cast<int>(rng.below(3));
    int nb = 2 + static_cast<int>(rng.below(3));
    int reps = 2 + static_cast<int>(rng.below(3));
    for (int a = 0; a < na; ++a)
      for (int b = 0; b < nb; ++b)
        for (int r = 0; r < reps; ++r) {
          values.push_back(rng.normal() + a * 0.3 - b * 0.2);
          fa.push_back("a" + std::to_string(a));
          fb.push_back("b" + std::to_string(b));
        }
    auto table = anova_two_way(values, fa, fb);

    // SS_total equals the direct total sum of squares (1e-9 relative)
    double direct = 0.0, mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    for (double v : values) direct += (v - mean) * (v - mean);
    CHECK(table.ss_total == doctest::Approx(direct).epsilon(1e-9));

    // scaling all observations leaves F unchanged
    std::vector<double> scaled(values);
    for (auto& v : scaled) v *= -2.5;
    auto table2 = anova_two_way(scaled, fa, fb);
    CHECK(table2.effect("A").f == doctest::Approx(table.effect("A").f).epsilon(1e-9));
    CHECK(table2.effect("AxB").f == doctest::Approx(table.effect("AxB").f).epsilon(1e-9));

    for (const auto& e : table.effects) {
      CHECK(e.p >= 0.0);
      CHECK(e.p <= 1.0);
      CHECK(e.ss >= -1e-12);
    }
  }
}

TEST_CASE("studentized range CDF basics") {
  CHECK(studentized_range_cdf(0.0, 3, 10) == 0.0);
  CHECK_THROWS_AS(studentized_range_cdf(1.0, 1, 10), UsageError);
  CHECK_THROWS_AS(studentized_range_cdf(-1.0, 3, 10), UsageError);

  // monotone nondecreasing in q
  double prev = 0.0;
  for (double q = 0.0; q <= 8.0; q += 0.5) {
    double c = studentized_range_cdf(q, 3, 30);
    CHECK(c >= prev - 1e-12);
    CHECK(c <= 1.0);
    prev = c;
  }
}

TEST_CASE("studentized range CDF matches known critical values") {
  // q_{0.05}(k=3, df=inf) = 3.314 -> CDF ~ 0.95
  CHECK(studentized_range_cdf(3.314, 3, 1e9) == doctest::Approx(0.95).epsilon(0.002));
  // q_{0.05}(k=2, df=inf) = 2.772 (sqrt(2) * 1.96)
  CHECK(studentized_range_cdf(2.7718, 2, 1e9) == doctest::Approx(0.95).epsilon(0.002));
  // q_{0.05}(k=3, df=10) = 3.88 (tabulated)
  CHECK(studentized_range_cdf(3.877, 3, 10) == doctest::Approx(0.95).epsilon(0.005));
  // q_{0.05}(k=4, df=20) = 3.96 (tabulated)
  CHECK(studentized_range_cdf(3.958, 4, 20) == doctest::Approx(0.95).epsilon(0.005));
}

TEST_CASE("Tukey HSD identical groups") {
  auto result = tukey_hsd({{1, 2, 3}, {1, 2, 3}, {1, 2, 3}});
  REQUIRE(result.pairs.size() == 3);
  for (const auto& p : result.pairs) {
    CHECK(p.q == doctest::Approx(0.0));
    CHECK(p.p == doctest::Approx(1.0));
    CHECK_FALSE(p.significant);
  }
}

TEST_CASE("Tukey HSD separated pair") {
  auto result = tukey_hsd({{0.0, 0.1}, {10.0, 10.1}});
  REQUIRE(result.pairs.size() == 1);
  CHECK(result.pairs[0].p < 0.001);
  CHECK(result.pairs[0].significant);
}

TEST_CASE("Tukey HSD relabeling permutes pairs but not p-values") {
  std::vector<std::vector<double>> groups = {{1, 2, 3}, {2, 3, 4}, {5, 6, 9}};
  auto base = tukey_hsd(groups);
  std::vector<std::vector<double>> relabeled = {groups[2], groups[0], groups[1]};
  auto perm = tukey_hsd(relabeled);
  std::vector<double> p1, p2;
  for (const auto& p : base.pairs) p1.push_back(p.p);
  for (const auto& p : perm.pairs) p2.push_back(p.p);
  std::sort(p1.begin(), p1.end());
  std::sort(p2.begin(), p2.end());
  for (size_t i = 0; i < p1.size(); ++i) CHECK(p1[i] == doctest::Approx(p2[i]).epsilon(1e-9));
}

TEST_CASE("Tukey HSD error paths") {
  CHECK_THROWS_AS(tukey_hsd({{1, 1}, {1, 1}}), DataError);      // zero MS_W
  CHECK_THROWS_AS(tukey_hsd({{1, 2}, {1, 2, 3}}), UsageError);  // unequal sizes
}

TEST_CASE("Spearman hand case with ties") {
  Correlation c = spearman({1, 2, 2, 4}, {1, 3, 2, 4});
  CHECK(c.rho == doctest::Approx(4.5 / std::sqrt(22.5)).epsilon(1e-6));
}

TEST_CASE("Spearman monotone, antisymmetry and transform invariance") {
  std::vector<double> x = {1, 2, 3, 4, 5, 6};
  std::vector<double> y = {2, 4, 9, 16, 30, 100};
  CHECK(spearman(x, y).rho == doctest::Approx(1.0));
  std::vector<double> neg(y);
  for (auto& v : neg) v = -v;
  CHECK(spearman(x, neg).rho == doctest::Approx(-1.0));

  Rng rng(3);
  std::vector<double> a, b;
  for (int i = 0; i < 30; ++i) {
    a.push_back(rng.normal());
    b.push_back(rng.normal());
  }
  auto base = spearman(a, b);
  CHECK(base.rho >= -1.0);
  CHECK(base.rho <= 1.0);
  CHECK(base.p >= 0.0);
  CHECK(base.p <= 1.0);
  // strictly monotone transform of an input leaves ranks alone
  std::vector<double> ax(a);
  for (auto& v : ax) v = std::exp(v);
  CHECK(spearman(ax, b).rho == doctest::Approx(base.rho).epsilon(1e-12));
  // reversing y negates rho
  std::vector<double> bneg(b);
  for (auto& v : bneg) v = -v;
  CHECK(spearman(a, bneg).rho == doctest::Approx(-base.rho).epsilon(1e-12));
}

TEST_CASE("Spearman constant vector error") {
  CHECK_THROWS_WITH_AS(spearman({1, 1, 1, 1}, {1, 2, 3, 4}),
                       "undefined correlation: constant vector", DataError);
}

TEST_CASE("average ranks") {
  auto r = average_ranks({10.0, 20.0, 20.0, 5.0});
  CHECK(r[0] == doctest::Approx(2.0));
  CHECK(r[1] == doctest::Approx(3.5));
  CHECK(r[2] == doctest::Approx(3.5));
  CHECK(r[3] == doctest::Approx(1.0));
}
