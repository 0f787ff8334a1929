#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsurf/survival.hpp"

namespace fedsurf {

/// Raised when a metric is not defined on the given data (no comparable
/// pairs, censoring survival reaching zero where a weight is needed, ...).
class MetricUndefined : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Weights below this are treated as zero and raise MetricUndefined.
inline constexpr double kMinCensoringSurvival = 1e-12;

struct EvaluationGrid {
  std::vector<double> times;  // strictly increasing
  double tau = 0.0;           // IPCW truncation time

  [[nodiscard]] double lo() const { return times.front(); }
  [[nodiscard]] double hi() const { return times.back(); }
};

/// `n_points` equally spaced times between the 10th and 90th percentile of
/// the observed times (linear-interpolated percentiles), restricted to the
/// open interval (min time, max time). tau is the 90th percentile.
EvaluationGrid default_grid(const SurvivalDataset& test, std::size_t n_points = 100);

/// Kaplan-Meier of the censoring distribution (indicator flipped).
StepCurve censoring_km(const SurvivalDataset& train);

/// Harrell's C. Pair (i, j) comparable iff t_i < t_j and delta_i = 1;
/// concordant iff risk_i > risk_j; tied risks score 0.5.
double concordance_index(std::span<const double> risks, const SurvivalDataset& test);

/// Uno's IPCW C: as above, restricted to anchors t_i <= tau, each pair
/// weighted by G(t_i-)^-2.
double concordance_index_ipcw(std::span<const double> risks, const SurvivalDataset& test,
                              const StepCurve& censoring, double tau);

/// IPCW Brier score at time t given per-record predicted S_i(t).
double brier_score(std::span<const double> surv_at_t, const SurvivalDataset& test, double t,
                   const StepCurve& censoring);

/// Trapezoidal average of the Brier score over the grid.
double integrated_brier_score(std::span<const StepCurve> survival_curves, const SurvivalDataset& test,
                              const EvaluationGrid& grid, const StepCurve& censoring);

/// Same as integrated_brier_score with predictions already evaluated:
/// `surv[k][i]` is S_i(grid.times[k]).
double integrated_brier_score(const std::vector<std::vector<double>>& surv,
                              const SurvivalDataset& test, const EvaluationGrid& grid,
                              const StepCurve& censoring);

/// Cumulative/dynamic AUC at one time t. Cases t_i <= t with an event,
/// weighted 1/G(t_i-); controls t_i > t. Throws MetricUndefined when there
/// are no cases or no controls.
double time_dependent_auc(std::span<const double> risks, const SurvivalDataset& test, double t,
                          const StepCurve& censoring);

/// Time-dependent AUC integrated over the grid with weights
/// S(t_{k-1}) - S(t_k) from the Kaplan-Meier of `test` (S(t_0) = 1),
/// normalized by the total weight of the grid points that were evaluated.
/// Grid points without cases or controls are skipped.
double cumulative_auc(std::span<const double> risks, const SurvivalDataset& test,
                      const EvaluationGrid& grid, const StepCurve& censoring);

}  // namespace fedsurf
