#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "fedsurf/random.hpp"
#include "fedsurf/survival.hpp"

namespace fedsurf {

inline constexpr double kInfiniteAlpha = std::numeric_limits<double>::infinity();

struct SplitConfig {
  std::size_t n_clients = 10;
  double alpha = kInfiniteAlpha;
  double test_fraction = 0.30;
  double validation_fraction = 0.30;
  std::size_t n_label_bins = 4;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Partition {
  SurvivalDataset first;
  SurvivalDataset second;
};

/// Stratified by event indicator; |test| = round(N * test_fraction). Both
/// parts keep the original record order. Throws std::invalid_argument if
/// either part would have no event.
Partition train_test_split(const SurvivalDataset& data, double test_fraction, Rng& rng);

/// Same stratification for a client's local data: (local_train, local_val).
/// Only the training part is required to contain an event.
Partition validation_split(const SurvivalDataset& local, double fraction, Rng& rng);

/// Label per record: event * n_bins + time bin, where the bins are cut at
/// the j/n_bins quantiles (linear interpolation) of all times.
std::vector<std::size_t> skew_labels(const SurvivalDataset& data, std::size_t n_bins);

/// Record indices per client. Each label class is spread over the clients by
/// p ~ Dirichlet(alpha, ..., alpha) and one categorical draw per record;
/// alpha = infinity deals each shuffled class round-robin instead, the
/// dealing position carrying over from one class to the next. An empty
/// client then takes the last record of the largest client (lowest id on
/// ties). Client lists are ascending.
std::vector<std::vector<std::size_t>> label_skew_indices(const SurvivalDataset& train, const SplitConfig& config,
                                                         Rng& rng);
std::vector<SurvivalDataset> label_skew_split(const SurvivalDataset& train, const SplitConfig& config, Rng& rng);

/// Coefficients of the synthetic hazard: 0.5 * (-1)^j for j < ceil(d/2),
/// zero after.
std::vector<double> synth_coefficients(std::size_t d);

/// Censoring rate lambda such that E[lambda / (lambda + exp(b'x))] equals
/// censor_rate for x ~ N(0, I).
double synth_censoring_rate(std::size_t d, double censor_rate);

/// x ~ N(0, I_d); event time ~ Exp(exp(b'x)); censoring time ~ Exp(lambda)
/// calibrated by synth_censoring_rate; censor_rate 0 disables censoring.
SurvivalDataset synth_survival(std::size_t n, std::size_t d, double censor_rate, Rng& rng);

}  // namespace fedsurf
