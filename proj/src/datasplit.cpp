#include "fedsurf/datasplit.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace fedsurf {
namespace {

void check_fraction(double f, const char* what) {
  if (!(f > 0.0 && f < 1.0)) throw std::invalid_argument(std::string(what) + " must be in (0, 1)");
}

std::size_t round_count(std::size_t n, double fraction) {
  return static_cast<std::size_t>(std::llround(static_cast<double>(n) * fraction));
}

// Stratified selection of round(N * fraction) records, strata = event flag.
std::vector<bool> stratified_mask(const SurvivalDataset& data, double fraction, Rng& rng) {
  std::vector<std::size_t> strata[2];
  for (std::size_t i = 0; i < data.size(); ++i) strata[data[i].event ? 1 : 0].push_back(i);
  const std::size_t total = round_count(data.size(), fraction);
  std::size_t take_events = std::min({round_count(strata[1].size(), fraction), strata[1].size(), total});
  std::size_t take_censored = total - take_events;
  if (take_censored > strata[0].size()) {
    take_censored = strata[0].size();
    take_events = total - take_censored;
  }
  std::vector<bool> selected(data.size(), false);
  const std::size_t take[2] = {take_censored, take_events};
  for (int s = 0; s < 2; ++s) {
    rng.shuffle(strata[s]);
    for (std::size_t j = 0; j < take[s]; ++j) selected[strata[s][j]] = true;
  }
  return selected;
}

Partition apply_mask(const SurvivalDataset& data, const std::vector<bool>& selected_second) {
  Partition out{SurvivalDataset(data.feature_names()), SurvivalDataset(data.feature_names())};
  for (std::size_t i = 0; i < data.size(); ++i) (selected_second[i] ? out.second : out.first).add(data[i]);
  return out;
}

double percentile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

void SplitConfig::validate() const {
  if (n_clients < 1) throw std::invalid_argument("SplitConfig: n_clients must be >= 1");
  if (!(alpha > 0.0)) throw std::invalid_argument("SplitConfig: alpha must be positive or infinite");
  check_fraction(test_fraction, "SplitConfig: test_fraction");
  check_fraction(validation_fraction, "SplitConfig: validation_fraction");
  if (n_label_bins < 1) throw std::invalid_argument("SplitConfig: n_label_bins must be >= 1");
}

Partition train_test_split(const SurvivalDataset& data, double test_fraction, Rng& rng) {
  check_fraction(test_fraction, "train_test_split: fraction");
  auto parts = apply_mask(data, stratified_mask(data, test_fraction, rng));
  if (parts.first.n_events() == 0 || parts.second.n_events() == 0) {
    throw std::invalid_argument("train_test_split: dataset too small for both parts to contain an event");
  }
  return parts;
}

Partition validation_split(const SurvivalDataset& local, double fraction, Rng& rng) {
  check_fraction(fraction, "validation_split: fraction");
  auto parts = apply_mask(local, stratified_mask(local, fraction, rng));
  if (parts.first.n_events() == 0) throw std::invalid_argument("validation_split: training part has no event");
  return parts;
}

std::vector<std::size_t> skew_labels(const SurvivalDataset& data, std::size_t n_bins) {
  if (n_bins < 1) throw std::invalid_argument("skew_labels: n_bins must be >= 1");
  std::vector<std::size_t> labels(data.size());
  if (data.empty()) return labels;
  auto times = data.times();
  std::sort(times.begin(), times.end());
  std::vector<double> cuts;
  for (std::size_t j = 1; j < n_bins; ++j) {
    cuts.push_back(percentile(times, static_cast<double>(j) / static_cast<double>(n_bins)));
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto bin = static_cast<std::size_t>(std::lower_bound(cuts.begin(), cuts.end(), data[i].time) - cuts.begin());
    labels[i] = (data[i].event ? n_bins : 0) + bin;
  }
  return labels;
}

std::vector<std::vector<std::size_t>> label_skew_indices(const SurvivalDataset& train, const SplitConfig& config,
                                                         Rng& rng) {
  config.validate();
  const std::size_t k = config.n_clients;
  if (k > train.size()) {
    throw std::invalid_argument("label_skew_split: " + std::to_string(k) + " clients for " +
                                std::to_string(train.size()) + " records");
  }
  const auto labels = skew_labels(train, config.n_label_bins);
  const std::size_t n_labels = 2 * config.n_label_bins;
  std::vector<std::vector<std::size_t>> classes(n_labels);
  for (std::size_t i = 0; i < train.size(); ++i) classes[labels[i]].push_back(i);

  std::vector<std::vector<std::size_t>> clients(k);
  const bool uniform = std::isinf(config.alpha);
  std::size_t deal = 0;
  std::vector<double> p(k);
  for (auto& members : classes) {
    if (members.empty()) continue;
    if (uniform) {
      rng.shuffle(members);
      for (auto i : members) clients[deal++ % k].push_back(i);
      continue;
    }
    double total = 0.0;
    for (auto& v : p) total += (v = rng.gamma(config.alpha));
    if (!(total > 0.0)) {
      std::fill(p.begin(), p.end(), 1.0);
      total = static_cast<double>(k);
    }
    for (auto i : members) {
      const double u = rng.uniform() * total;
      double acc = 0.0;
      std::size_t c = 0;
      for (; c + 1 < k; ++c) {
        acc += p[c];
        if (u < acc) break;
      }
      clients[c].push_back(i);
    }
  }

  for (auto& c : clients) std::sort(c.begin(), c.end());
  for (std::size_t c = 0; c < k; ++c) {
    if (!clients[c].empty()) continue;
    std::size_t donor = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (clients[j].size() > clients[donor].size()) donor = j;
    clients[c].push_back(clients[donor].back());
    clients[donor].pop_back();
  }
  return clients;
}

std::vector<SurvivalDataset> label_skew_split(const SurvivalDataset& train, const SplitConfig& config, Rng& rng) {
  std::vector<SurvivalDataset> out;
  for (const auto& idx : label_skew_indices(train, config, rng)) out.push_back(train.subset(idx));
  return out;
}

std::vector<double> synth_coefficients(std::size_t d) {
  std::vector<double> beta(d, 0.0);
  for (std::size_t j = 0; j < (d + 1) / 2; ++j) beta[j] = (j % 2 == 0) ? 0.5 : -0.5;
  return beta;
}

double synth_censoring_rate(std::size_t d, double censor_rate) {
  if (!(censor_rate >= 0.0 && censor_rate < 1.0)) throw std::invalid_argument("synth: censor_rate must be in [0, 1)");
  if (censor_rate == 0.0) return 0.0;
  double var = 0.0;
  for (double b : synth_coefficients(d)) var += b * b;
  const double sd = std::sqrt(var);
  // E over z ~ N(0,1) of lambda / (lambda + exp(sd z)), trapezoid on [-10, 10]
  auto censored = [&](double lambda) {
    constexpr int kSteps = 4000;
    const double h = 20.0 / kSteps;
    double sum = 0.0;
    for (int s = 0; s <= kSteps; ++s) {
      const double z = -10.0 + h * s;
      const double w = (s == 0 || s == kSteps) ? 0.5 : 1.0;
      sum += w * std::exp(-0.5 * z * z) * lambda / (lambda + std::exp(sd * z));
    }
    return sum * h / std::sqrt(2.0 * std::numbers::pi);
  };
  double lo = -40.0, hi = 40.0;  // log lambda
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (censored(std::exp(mid)) < censor_rate ? lo : hi) = mid;
  }
  return std::exp(0.5 * (lo + hi));
}

SurvivalDataset synth_survival(std::size_t n, std::size_t d, double censor_rate, Rng& rng) {
  if (n < 1 || d < 1) throw std::invalid_argument("synth: n and d must be >= 1");
  const auto beta = synth_coefficients(d);
  const double lambda = synth_censoring_rate(d, censor_rate);
  std::vector<std::string> names;
  for (std::size_t j = 0; j < d; ++j) names.push_back("x" + std::to_string(j));
  SurvivalDataset out(names);
  for (std::size_t i = 0; i < n; ++i) {
    SurvivalRecord r;
    r.features.resize(d);
    double eta = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      r.features[j] = rng.normal();
      eta += beta[j] * r.features[j];
    }
    const double event_time = rng.exponential(std::exp(eta));
    if (lambda > 0.0) {
      const double censor_time = rng.exponential(lambda);
      r.event = event_time <= censor_time;
      r.time = std::min(event_time, censor_time);
    } else {
      r.event = true;
      r.time = event_time;
    }
    out.add(std::move(r));
  }
  return out;
}

}  // namespace fedsurf
