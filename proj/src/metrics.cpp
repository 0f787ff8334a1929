#include "fedsurf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

namespace fedsurf {
namespace {

void check_sizes(std::size_t n_pred, const SurvivalDataset& test, const char* what) {
  if (n_pred != test.size()) {
    throw std::invalid_argument(std::string(what) + ": " + std::to_string(n_pred) +
                                " predictions for " + std::to_string(test.size()) + " records");
  }
}

double percentile(std::vector<double> sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

double inverse_weight(const StepCurve& censoring, double t, bool left_limit) {
  const double g = left_limit ? censoring.left_limit(t) : censoring.value(t);
  if (g < kMinCensoringSurvival) {
    throw MetricUndefined("censoring survival is zero at t=" + std::to_string(t) +
                          "; shrink the evaluation horizon");
  }
  return 1.0 / g;
}

// Binary indexed tree over risk ranks, counting inserted records.
class RankCounter {
 public:
  explicit RankCounter(std::size_t n) : tree_(n + 1, 0) {}
  void add(std::size_t rank) {
    for (std::size_t i = rank + 1; i < tree_.size(); i += i & (~i + 1)) ++tree_[i];
  }
  // Number of inserted ranks < rank.
  [[nodiscard]] std::size_t count_below(std::size_t rank) const {
    std::size_t s = 0;
    for (std::size_t i = rank; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }

 private:
  std::vector<std::size_t> tree_;
};

double weighted_concordance(std::span<const double> risks, const SurvivalDataset& test,
                            const StepCurve* censoring, double tau) {
  const std::size_t n = test.size();
  std::vector<double> unique_risks(risks.begin(), risks.end());
  std::sort(unique_risks.begin(), unique_risks.end());
  unique_risks.erase(std::unique(unique_risks.begin(), unique_risks.end()), unique_risks.end());
  std::vector<std::size_t> rank(n);
  for (std::size_t i = 0; i < n; ++i) {
    rank[i] = static_cast<std::size_t>(
        std::lower_bound(unique_risks.begin(), unique_risks.end(), risks[i]) - unique_risks.begin());
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return test[a].time > test[b].time; });

  // Walk from the longest survivor down; every inserted record has a strictly
  // larger time than the group being queried.
  RankCounter later(unique_risks.size());
  std::size_t inserted = 0;
  double numerator = 0.0;
  double denominator = 0.0;
  std::size_t g = 0;
  while (g < n) {
    std::size_t end = g;
    while (end < n && test[order[end]].time == test[order[g]].time) ++end;
    for (std::size_t k = g; k < end; ++k) {
      const auto& rec = test[order[k]];
      if (!rec.event || inserted == 0) continue;
      double w = 1.0;
      if (censoring != nullptr) {
        if (rec.time > tau) continue;
        const double inv = inverse_weight(*censoring, rec.time, true);
        w = inv * inv;
      }
      const std::size_t r = rank[order[k]];
      const auto below = static_cast<double>(later.count_below(r));
      const auto tied = static_cast<double>(later.count_below(r + 1)) - below;
      numerator += w * (below + 0.5 * tied);
      denominator += w * static_cast<double>(inserted);
    }
    for (std::size_t k = g; k < end; ++k) {
      later.add(rank[order[k]]);
      ++inserted;
    }
    g = end;
  }
  if (denominator <= 0.0) throw MetricUndefined("concordance: no comparable pairs");
  return numerator / denominator;
}

// AUC at t, or nullopt when there are no cases or no controls.
std::optional<double> auc_at(std::span<const double> risks, const SurvivalDataset& test, double t,
                             const StepCurve& censoring) {
  std::vector<double> control_risks;
  std::vector<std::size_t> cases;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (test[i].time > t) {
      control_risks.push_back(risks[i]);
    } else if (test[i].event) {
      cases.push_back(i);
    }
  }
  if (cases.empty() || control_risks.empty()) return std::nullopt;
  std::sort(control_risks.begin(), control_risks.end());
  double numerator = 0.0;
  double case_weight = 0.0;
  for (auto i : cases) {
    const double w = inverse_weight(censoring, test[i].time, true);
    const auto lo = std::lower_bound(control_risks.begin(), control_risks.end(), risks[i]);
    const auto hi = std::upper_bound(lo, control_risks.end(), risks[i]);
    const auto below = static_cast<double>(lo - control_risks.begin());
    const auto tied = static_cast<double>(hi - lo);
    numerator += w * (below + 0.5 * tied);
    case_weight += w;
  }
  return numerator / (case_weight * static_cast<double>(control_risks.size()));
}

}  // namespace

EvaluationGrid default_grid(const SurvivalDataset& test, std::size_t n_points) {
  if (test.empty()) throw MetricUndefined("evaluation grid: empty dataset");
  if (n_points == 0) throw std::invalid_argument("evaluation grid: n_points must be positive");
  std::vector<double> times = test.times();
  std::sort(times.begin(), times.end());
  const double lo = percentile(times, 0.10);
  const double hi = percentile(times, 0.90);
  const double t_min = times.front();
  const double t_max = times.back();

  EvaluationGrid grid;
  grid.tau = hi;
  const std::size_t n = (hi > lo) ? n_points : 1;
  for (std::size_t k = 0; k < n; ++k) {
    const double t = (n == 1) ? lo
                              : lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(n - 1);
    if (t <= t_min || t >= t_max) continue;
    if (!grid.times.empty() && !(t > grid.times.back())) continue;
    grid.times.push_back(t);
  }
  if (grid.times.empty()) {
    throw MetricUndefined("evaluation grid: no time strictly inside the follow-up range");
  }
  return grid;
}

StepCurve censoring_km(const SurvivalDataset& train) { return kaplan_meier(train, true); }

double concordance_index(std::span<const double> risks, const SurvivalDataset& test) {
  check_sizes(risks.size(), test, "concordance_index");
  return weighted_concordance(risks, test, nullptr, 0.0);
}

double concordance_index_ipcw(std::span<const double> risks, const SurvivalDataset& test,
                              const StepCurve& censoring, double tau) {
  check_sizes(risks.size(), test, "concordance_index_ipcw");
  return weighted_concordance(risks, test, &censoring, tau);
}

double brier_score(std::span<const double> surv_at_t, const SurvivalDataset& test, double t,
                   const StepCurve& censoring) {
  check_sizes(surv_at_t.size(), test, "brier_score");
  if (test.empty()) throw MetricUndefined("brier_score: empty dataset");
  double sum = 0.0;
  std::optional<double> at_t_weight;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& rec = test[i];
    const double s = surv_at_t[i];
    if (rec.time <= t) {
      if (rec.event) sum += s * s * inverse_weight(censoring, rec.time, true);
    } else {
      if (!at_t_weight) at_t_weight = inverse_weight(censoring, t, false);
      sum += (1.0 - s) * (1.0 - s) * *at_t_weight;
    }
  }
  return sum / static_cast<double>(test.size());
}

double integrated_brier_score(const std::vector<std::vector<double>>& surv,
                              const SurvivalDataset& test, const EvaluationGrid& grid,
                              const StepCurve& censoring) {
  if (surv.size() != grid.times.size()) {
    throw std::invalid_argument("integrated_brier_score: one prediction row per grid time required");
  }
  std::vector<double> scores;
  scores.reserve(grid.times.size());
  for (std::size_t k = 0; k < grid.times.size(); ++k) {
    scores.push_back(brier_score(surv[k], test, grid.times[k], censoring));
  }
  if (scores.size() == 1) return scores.front();
  double area = 0.0;
  for (std::size_t k = 0; k + 1 < scores.size(); ++k) {
    area += 0.5 * (scores[k] + scores[k + 1]) * (grid.times[k + 1] - grid.times[k]);
  }
  return area / (grid.hi() - grid.lo());
}

double integrated_brier_score(std::span<const StepCurve> survival_curves, const SurvivalDataset& test,
                              const EvaluationGrid& grid, const StepCurve& censoring) {
  check_sizes(survival_curves.size(), test, "integrated_brier_score");
  std::vector<std::vector<double>> surv(grid.times.size(), std::vector<double>(test.size()));
  for (std::size_t k = 0; k < grid.times.size(); ++k) {
    for (std::size_t i = 0; i < test.size(); ++i) surv[k][i] = survival_curves[i](grid.times[k]);
  }
  return integrated_brier_score(surv, test, grid, censoring);
}

double time_dependent_auc(std::span<const double> risks, const SurvivalDataset& test, double t,
                          const StepCurve& censoring) {
  check_sizes(risks.size(), test, "time_dependent_auc");
  const auto auc = auc_at(risks, test, t, censoring);
  if (!auc) throw MetricUndefined("time_dependent_auc: no cases or no controls");
  return *auc;
}

double cumulative_auc(std::span<const double> risks, const SurvivalDataset& test,
                      const EvaluationGrid& grid, const StepCurve& censoring) {
  check_sizes(risks.size(), test, "cumulative_auc");
  const StepCurve km = kaplan_meier(test);
  double prev_s = 1.0;
  double weighted = 0.0;
  double total_weight = 0.0;
  double plain = 0.0;
  std::size_t evaluated = 0;
  for (double t : grid.times) {
    const double s = km(t);
    const double w = prev_s - s;
    prev_s = s;
    const auto auc = auc_at(risks, test, t, censoring);
    if (!auc) continue;
    weighted += w * *auc;
    total_weight += w;
    plain += *auc;
    ++evaluated;
  }
  if (evaluated == 0) throw MetricUndefined("cumulative_auc: no grid time has both cases and controls");
  if (total_weight <= 0.0) return plain / static_cast<double>(evaluated);
  return weighted / total_weight;
}

}  // namespace fedsurf
