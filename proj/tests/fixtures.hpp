#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedsurf/random.hpp"
#include "fedsurf/survival.hpp"

namespace fedsurf::testing {

inline SurvivalDataset make_data(const std::vector<double>& times, const std::vector<int>& events,
                                 const std::vector<std::vector<double>>& features = {}) {
  const std::size_t d = features.empty() ? 1 : features.front().size();
  std::vector<std::string> names;
  for (std::size_t j = 0; j < d; ++j) names.push_back("x" + std::to_string(j));
  SurvivalDataset out(names);
  for (std::size_t i = 0; i < times.size(); ++i) {
    SurvivalRecord r;
    r.time = times[i];
    r.event = events[i] != 0;
    r.features = features.empty() ? std::vector<double>{0.0} : features[i];
    out.add(std::move(r));
  }
  return out;
}

/// Small random dataset with ties in times (integer-valued) when `ties`.
inline SurvivalDataset random_data(Rng& rng, std::size_t n, bool ties, double censor_prob = 0.3,
                                   std::size_t d = 1) {
  std::vector<std::string> names;
  for (std::size_t j = 0; j < d; ++j) names.push_back("x" + std::to_string(j));
  SurvivalDataset out(names);
  for (std::size_t i = 0; i < n; ++i) {
    SurvivalRecord r;
    r.time = ties ? static_cast<double>(1 + rng.below(6)) : 0.1 + rng.uniform() * 10.0;
    r.event = rng.uniform() >= censor_prob;
    for (std::size_t j = 0; j < d; ++j) r.features.push_back(rng.normal());
    out.add(std::move(r));
  }
  return out;
}

}  // namespace fedsurf::testing
