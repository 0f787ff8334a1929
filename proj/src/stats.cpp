#include "fedsurf/stats.hpp"

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fedsurf {
namespace {

struct Ranked {
  std::vector<double> mean_ranks;
  std::vector<std::size_t> sizes;
  std::size_t n = 0;
  double tie_sum = 0.0;  // sum of t^3 - t over tie groups
};

Ranked rank_groups(const std::vector<std::vector<double>>& groups) {
  if (groups.size() < 2) throw std::invalid_argument("rank test: need at least two groups");
  std::vector<std::pair<double, std::size_t>> pooled;
  Ranked r;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) throw std::invalid_argument("rank test: empty group");
    r.sizes.push_back(groups[g].size());
    for (double v : groups[g]) {
      if (!std::isfinite(v)) throw std::invalid_argument("rank test: non-finite observation");
      pooled.emplace_back(v, g);
    }
  }
  std::sort(pooled.begin(), pooled.end());
  r.n = pooled.size();
  std::vector<double> rank_sum(groups.size(), 0.0);
  for (std::size_t i = 0; i < pooled.size();) {
    std::size_t j = i;
    while (j < pooled.size() && pooled[j].first == pooled[i].first) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    const double t = static_cast<double>(j - i);
    r.tie_sum += t * t * t - t;
    for (std::size_t k = i; k < j; ++k) rank_sum[pooled[k].second] += mid;
    i = j;
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    r.mean_ranks.push_back(rank_sum[g] / static_cast<double>(r.sizes[g]));
  }
  return r;
}

}  // namespace

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double chi_square_sf(double x, double df) {
  if (!(df > 0.0)) throw std::invalid_argument("chi_square_sf: df must be positive");
  if (x <= 0.0) return 1.0;
  return boost::math::gamma_q(0.5 * df, 0.5 * x);
}

TestResult kruskal_wallis(const std::vector<std::vector<double>>& groups) {
  const Ranked r = rank_groups(groups);
  TestResult out;
  out.mean_ranks = r.mean_ranks;
  const double n = static_cast<double>(r.n);
  const double correction = 1.0 - r.tie_sum / (n * n * n - n);
  if (correction <= 0.0) return out;  // all observations equal
  double h = 0.0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double d = r.mean_ranks[g] - 0.5 * (n + 1.0);
    h += static_cast<double>(r.sizes[g]) * d * d;
  }
  h *= 12.0 / (n * (n + 1.0));
  out.statistic = h / correction;
  out.p_value = chi_square_sf(out.statistic, static_cast<double>(groups.size() - 1));
  return out;
}

TestResult dunn_test(const std::vector<std::vector<double>>& groups, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("dunn_test: alpha must be in (0, 1)");
  TestResult out = kruskal_wallis(groups);
  const Ranked r = rank_groups(groups);
  const std::size_t g = groups.size();
  const double n = static_cast<double>(r.n);
  const double variance = n * (n + 1.0) / 12.0 - r.tie_sum / (12.0 * (n - 1.0));
  const double pairs = static_cast<double>(g * (g - 1) / 2);

  PairwiseComparison pw;
  pw.z.assign(g, std::vector<double>(g, 0.0));
  pw.p_adjusted.assign(g, std::vector<double>(g, 1.0));
  pw.significant.assign(g, std::vector<bool>(g, false));
  for (std::size_t a = 0; a < g; ++a) {
    for (std::size_t b = a + 1; b < g; ++b) {
      double z = 0.0;
      double p = 1.0;
      if (variance > 0.0) {
        const double se = std::sqrt(variance * (1.0 / static_cast<double>(r.sizes[a]) +
                                                1.0 / static_cast<double>(r.sizes[b])));
        z = std::abs(r.mean_ranks[a] - r.mean_ranks[b]) / se;
        p = std::min(1.0, pairs * std::erfc(z / std::sqrt(2.0)));
      }
      pw.z[a][b] = pw.z[b][a] = z;
      pw.p_adjusted[a][b] = pw.p_adjusted[b][a] = p;
      pw.significant[a][b] = pw.significant[b][a] = p < alpha;
    }
  }
  out.pairwise = std::move(pw);
  return out;
}

}  // namespace fedsurf
