#pragma once

// Brute-force reference computations. These enumerate records, pairs and
// terms directly from the textbook definitions and share no code with the
// library's estimators or metrics.

#include <cmath>
#include <set>
#include <vector>

#include "fedsurf/survival.hpp"

namespace fedsurf::oracle {

struct Obs {
  double time;
  bool event;
};

inline std::vector<Obs> observations(const SurvivalDataset& data, bool flip = false) {
  std::vector<Obs> out;
  for (const auto& r : data.records()) out.push_back({r.time, r.event != flip});
  return out;
}

inline std::set<double> event_times(const std::vector<Obs>& obs) {
  std::set<double> out;
  for (const auto& o : obs)
    if (o.event) out.insert(o.time);
  return out;
}

inline double deaths_at(const std::vector<Obs>& obs, double u) {
  double d = 0;
  for (const auto& o : obs) d += (o.event && o.time == u) ? 1 : 0;
  return d;
}

inline double at_risk(const std::vector<Obs>& obs, double u) {
  double r = 0;
  for (const auto& o : obs) r += (o.time >= u) ? 1 : 0;
  return r;
}

/// Product over event times u with u <= t (strict=false) or u < t (strict=true).
inline double km(const std::vector<Obs>& obs, double t, bool strict = false) {
  double s = 1.0;
  for (double u : event_times(obs)) {
    if (strict ? !(u < t) : !(u <= t)) continue;
    s *= 1.0 - deaths_at(obs, u) / at_risk(obs, u);
  }
  return s;
}

inline double na(const std::vector<Obs>& obs, double t) {
  double h = 0.0;
  for (double u : event_times(obs)) {
    if (u <= t) h += deaths_at(obs, u) / at_risk(obs, u);
  }
  return h;
}

inline double harrell(const std::vector<double>& risk, const SurvivalDataset& test) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    for (std::size_t j = 0; j < test.size(); ++j) {
      if (!test[i].event || !(test[i].time < test[j].time)) continue;
      den += 1;
      if (risk[i] > risk[j]) num += 1;
      if (risk[i] == risk[j]) num += 0.5;
    }
  }
  return num / den;
}

inline double uno(const std::vector<double>& risk, const SurvivalDataset& test,
                  const SurvivalDataset& train, double tau) {
  const auto cens = observations(train, true);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    for (std::size_t j = 0; j < test.size(); ++j) {
      if (!test[i].event || !(test[i].time < test[j].time) || test[i].time > tau) continue;
      const double g = km(cens, test[i].time, true);
      const double w = 1.0 / (g * g);
      den += w;
      if (risk[i] > risk[j]) num += w;
      if (risk[i] == risk[j]) num += 0.5 * w;
    }
  }
  return num / den;
}

inline double brier(const std::vector<double>& surv, const SurvivalDataset& test,
                    const SurvivalDataset& train, double t) {
  const auto cens = observations(train, true);
  double total = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (test[i].time <= t && test[i].event) {
      total += surv[i] * surv[i] / km(cens, test[i].time, true);
    } else if (test[i].time > t) {
      total += (1 - surv[i]) * (1 - surv[i]) / km(cens, t, false);
    }
  }
  return total / static_cast<double>(test.size());
}

/// surv[k][i] = S_i(grid[k])
inline double ibs(const std::vector<std::vector<double>>& surv, const SurvivalDataset& test,
                  const SurvivalDataset& train, const std::vector<double>& grid) {
  if (grid.size() == 1) return brier(surv[0], test, train, grid[0]);
  double area = 0;
  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    const double a = brier(surv[k], test, train, grid[k]);
    const double b = brier(surv[k + 1], test, train, grid[k + 1]);
    area += (grid[k + 1] - grid[k]) * (a + b) / 2;
  }
  return area / (grid.back() - grid.front());
}

/// Returns NaN when a time has no cases or no controls.
inline double auc_at(const std::vector<double>& risk, const SurvivalDataset& test,
                     const SurvivalDataset& train, double t) {
  const auto cens = observations(train, true);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (!(test[i].time <= t && test[i].event)) continue;
    const double w = 1.0 / km(cens, test[i].time, true);
    for (std::size_t j = 0; j < test.size(); ++j) {
      if (!(test[j].time > t)) continue;
      den += w;
      if (risk[i] > risk[j]) num += w;
      if (risk[i] == risk[j]) num += 0.5 * w;
    }
  }
  return den > 0 ? num / den : std::nan("");
}

inline double cumulative_auc(const std::vector<double>& risk, const SurvivalDataset& test,
                             const SurvivalDataset& train, const std::vector<double>& grid) {
  const auto obs = observations(test);
  double prev = 1.0, num = 0, den = 0, plain = 0;
  int used = 0;
  for (double t : grid) {
    const double s = km(obs, t);
    const double w = prev - s;
    prev = s;
    const double a = auc_at(risk, test, train, t);
    if (std::isnan(a)) continue;
    num += w * a;
    den += w;
    plain += a;
    ++used;
  }
  return den > 0 ? num / den : plain / used;
}

/// Two-sample log-rank chi-square by enumerating pooled event times.
inline double logrank(const SurvivalDataset& a, const SurvivalDataset& b) {
  const auto oa = observations(a);
  const auto ob = observations(b);
  std::vector<Obs> pooled = oa;
  pooled.insert(pooled.end(), ob.begin(), ob.end());
  double o_minus_e = 0, var = 0;
  for (double u : event_times(pooled)) {
    const double y = at_risk(pooled, u), ya = at_risk(oa, u);
    const double d = deaths_at(pooled, u), da = deaths_at(oa, u);
    o_minus_e += da - ya * d / y;
    if (y > 1) var += ya * (y - ya) * d * (y - d) / (y * y * (y - 1));
  }
  return var > 0 ? o_minus_e * o_minus_e / var : 0.0;
}

}  // namespace fedsurf::oracle
