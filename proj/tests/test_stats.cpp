#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "fedsurf/random.hpp"
#include "fedsurf/stats.hpp"

using namespace fedsurf;
using Groups = std::vector<std::vector<double>>;

namespace {

// Phi(x) = 1/2 + phi(x) * sum x^(2n+1) / (1*3*...*(2n+1)), all terms positive.
long double normal_cdf_series(long double x) {
  long double term = x, sum = x;
  for (int n = 1; n < 500; ++n) {
    term *= x * x / (2 * n + 1);
    sum += term;
    if (std::fabs(term) < 1e-30L * std::fabs(sum)) break;
  }
  const long double pdf = std::exp(-x * x / 2) / std::sqrt(2 * 3.141592653589793238462643383279502884L);
  return 0.5L + pdf * sum;
}

// Upper regularized gamma: series below a+1, Lentz continued fraction above.
long double gamma_q_ref(long double a, long double x) {
  const long double lead = std::exp(a * std::log(x) - x - std::lgamma(a));
  if (x < a + 1) {
    long double term = 1 / a, sum = term;
    for (int n = 1; n < 10000; ++n) {
      term *= x / (a + n);
      sum += term;
      if (term < sum * 1e-22L) break;
    }
    return 1 - lead * sum;
  }
  const long double tiny = 1e-300L;
  long double b = x + 1 - a, c = 1 / tiny, d = 1 / b, h = d;
  for (int i = 1; i < 10000; ++i) {
    const long double an = -i * (i - a);
    b += 2;
    d = an * d + b;
    if (std::fabs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1 / d;
    const long double delta = d * c;
    h *= delta;
    if (std::fabs(delta - 1) < 1e-22L) break;
  }
  return lead * h;
}

// Tie-corrected H in its general form: (N-1) * between / total rank variance.
double h_oracle(const Groups& groups) {
  std::vector<double> all;
  for (const auto& g : groups) all.insert(all.end(), g.begin(), g.end());
  auto rank_of = [&](double v) {
    double less = 0, equal = 0;
    for (double w : all) {
      less += w < v;
      equal += w == v;
    }
    return less + (equal + 1) / 2;
  };
  const double n = static_cast<double>(all.size());
  const double mean = (n + 1) / 2;
  double between = 0, total = 0;
  for (const auto& g : groups) {
    double s = 0;
    for (double v : g) {
      const double r = rank_of(v);
      s += r;
      total += (r - mean) * (r - mean);
    }
    const double m = s / static_cast<double>(g.size());
    between += static_cast<double>(g.size()) * (m - mean) * (m - mean);
  }
  return total == 0 ? 0.0 : (n - 1) * between / total;
}

}  // namespace

TEST_CASE("normal cdf against the series") {
  double worst = 0;
  for (int i = -800; i <= 800; ++i) {
    const double x = i / 100.0;
    worst = std::max(worst, static_cast<double>(std::fabs(normal_cdf(x) - normal_cdf_series(x))));
  }
  CHECK(worst < 1e-12);
  CHECK(normal_cdf(0.0) == 0.5);
}

TEST_CASE("chi-square tail against the reference") {
  double worst = 0;
  for (int k = 1; k <= 20; ++k) {
    const double df = 0.5 * k;
    for (double x = 0.01; x < 60; x *= 1.3) {
      const double ref = static_cast<double>(gamma_q_ref(df / 2, x / 2));
      worst = std::max(worst, std::abs(chi_square_sf(x, df) - ref) / ref);
    }
  }
  CHECK(worst < 1e-10);
  CHECK(chi_square_sf(0.0, 3) == 1.0);
  CHECK(chi_square_sf(3.841458820694124, 1) == doctest::Approx(0.05).epsilon(1e-12));
}

TEST_CASE("kruskal-wallis fixtures") {
  const auto sep = kruskal_wallis({{1, 2, 3}, {4, 5, 6}});
  CHECK(sep.statistic == doctest::Approx(27.0 / 7.0).epsilon(1e-14));
  CHECK(sep.p_value == doctest::Approx(0.04953461343562649).epsilon(1e-12));
  CHECK(sep.mean_ranks == std::vector<double>{2, 5});

  const auto same = kruskal_wallis({{1, 2, 3}, {1, 2, 3}});
  CHECK(same.statistic == 0.0);
  CHECK(same.p_value == doctest::Approx(1.0));

  const auto flat = kruskal_wallis({{4, 4}, {4}, {4, 4, 4}});
  CHECK(flat.statistic == 0.0);
  CHECK(flat.p_value == 1.0);

  CHECK_THROWS_AS(kruskal_wallis({{1, 2}}), std::invalid_argument);
  CHECK_THROWS_AS(kruskal_wallis({{1, 2}, {}}), std::invalid_argument);
  CHECK_THROWS_AS(kruskal_wallis({{1, NAN}, {2}}), std::invalid_argument);
}

TEST_CASE("kruskal-wallis matches the general tie formula") {
  Rng rng(4);
  for (int rep = 0; rep < 300; ++rep) {
    Groups g(2 + rng.below(4));
    for (auto& grp : g) {
      grp.resize(1 + rng.below(8));
      for (auto& v : grp) v = static_cast<double>(rng.below(6));
    }
    const auto r = kruskal_wallis(g);
    CHECK(r.statistic == doctest::Approx(h_oracle(g)).epsilon(1e-10));
    CHECK(r.p_value >= 0.0);
    CHECK(r.p_value <= 1.0);
  }
}

TEST_CASE("kruskal-wallis is rank invariant") {
  Rng rng(6);
  for (int rep = 0; rep < 50; ++rep) {
    Groups g(3);
    for (auto& grp : g) {
      grp.resize(5);
      for (auto& v : grp) v = rng.normal();
    }
    Groups t = g;
    for (auto& grp : t)
      for (auto& v : grp) v = std::exp(3 * v) + 1;
    CHECK(kruskal_wallis(t).statistic == doctest::Approx(kruskal_wallis(g).statistic).epsilon(1e-12));
  }
}

TEST_CASE("kruskal-wallis calibration under the null") {
  Rng rng(99);
  int rejected = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    Groups g(3, std::vector<double>(10));
    for (auto& grp : g)
      for (auto& v : grp) v = rng.normal();
    rejected += kruskal_wallis(g).p_value < 0.05;
  }
  CHECK(rejected >= 30);
  CHECK(rejected <= 70);
}

TEST_CASE("dunn fixtures") {
  const auto r = dunn_test({{1, 2, 3}, {101, 102, 103}, {201, 202, 203}});
  REQUIRE(r.pairwise);
  const auto& pw = *r.pairwise;
  CHECK(pw.z[0][2] == doctest::Approx(2.6832815729997477).epsilon(1e-12));
  CHECK(pw.p_adjusted[0][2] == doctest::Approx(0.021871074274606914).epsilon(1e-10));
  CHECK(pw.significant[0][2]);
  CHECK(pw.z[0][1] == doctest::Approx(3.0 / std::sqrt(5.0)).epsilon(1e-12));
  CHECK(pw.p_adjusted[0][1] == doctest::Approx(0.5391).epsilon(1e-3));
  CHECK_FALSE(pw.significant[0][1]);
  CHECK_FALSE(pw.significant[1][2]);
  // unadjusted two-sided p for the extreme pair
  CHECK(std::erfc(pw.z[0][2] / std::sqrt(2.0)) == doctest::Approx(0.007290358091535638).epsilon(1e-10));

  const auto same = dunn_test({{1, 2, 3}, {1, 2, 3}, {1, 2, 3}});
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = 0; b < 3; ++b) CHECK_FALSE(same.pairwise->significant[a][b]);
  CHECK_THROWS_AS(dunn_test({{1}, {2}}, 0.0), std::invalid_argument);
}

TEST_CASE("dunn matrix properties") {
  Rng rng(12);
  for (int rep = 0; rep < 100; ++rep) {
    Groups g(2 + rng.below(4));
    for (std::size_t k = 0; k < g.size(); ++k) {
      g[k].resize(2 + rng.below(6));
      for (auto& v : g[k]) v = std::round(rng.normal() * 3 + static_cast<double>(k));
    }
    const auto r = dunn_test(g);
    const auto& pw = *r.pairwise;
    const std::size_t n = g.size();
    for (std::size_t a = 0; a < n; ++a) {
      CHECK_FALSE(pw.significant[a][a]);
      CHECK(pw.p_adjusted[a][a] == 1.0);
      for (std::size_t b = 0; b < n; ++b) {
        CHECK(pw.z[a][b] == pw.z[b][a]);
        CHECK(pw.p_adjusted[a][b] == pw.p_adjusted[b][a]);
        CHECK(pw.p_adjusted[a][b] <= 1.0);
        CHECK(std::erfc(pw.z[a][b] / std::sqrt(2.0)) <= pw.p_adjusted[a][b] + 1e-15);
      }
    }
    // reversing group order reverses the matrix
    Groups rev(g.rbegin(), g.rend());
    const auto rr = dunn_test(rev);
    const auto& pr = *rr.pairwise;
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b) {
        CHECK(pr.z[n - 1 - a][n - 1 - b] == doctest::Approx(pw.z[a][b]).epsilon(1e-12));
        CHECK(pr.significant[n - 1 - a][n - 1 - b] == pw.significant[a][b]);
      }
  }
}
