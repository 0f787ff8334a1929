#pragma once

#include <cstddef>
#include <optional>
#include <vector>

namespace fedsurf {

struct PairwiseComparison {
  // g x g, symmetric. Diagonal: z 0, p 1, not significant.
  std::vector<std::vector<double>> z;           // |mean rank difference| / SE
  std::vector<std::vector<double>> p_adjusted;  // Bonferroni over g(g-1)/2 pairs, capped at 1
  std::vector<std::vector<bool>> significant;   // p_adjusted < alpha
};

struct TestResult {
  double statistic = 0.0;
  double p_value = 1.0;
  std::vector<double> mean_ranks;  // per group, mid-ranks over the pooled sample
  std::optional<PairwiseComparison> pairwise;
};

/// Standard normal CDF.
double normal_cdf(double x);
/// P(X > x) for X ~ chi-square with df degrees of freedom.
double chi_square_sf(double x, double df);

/// H with tie correction, chi-square p on (groups - 1) df. All observations
/// equal gives H = 0, p = 1. Throws std::invalid_argument with fewer than two
/// groups, an empty group or a non-finite value.
TestResult kruskal_wallis(const std::vector<std::vector<double>>& groups);

/// Kruskal-Wallis plus Dunn's pairwise z with tie-corrected variance,
/// two-sided normal p and Bonferroni adjustment.
TestResult dunn_test(const std::vector<std::vector<double>>& groups, double alpha = 0.05);

}  // namespace fedsurf
