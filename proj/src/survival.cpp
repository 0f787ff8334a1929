#include "fedsurf/survival.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <utility>

namespace fedsurf {

SurvivalDataset::SurvivalDataset(std::vector<std::string> feature_names)
    : feature_names_(std::move(feature_names)) {}

SurvivalDataset::SurvivalDataset(std::vector<std::string> feature_names,
                                 std::vector<SurvivalRecord> records)
    : feature_names_(std::move(feature_names)) {
  for (const auto& r : records) check(r);
  records_ = std::move(records);
}

void SurvivalDataset::check(const SurvivalRecord& record) const {
  if (record.features.size() != feature_names_.size()) {
    throw std::invalid_argument("record has " + std::to_string(record.features.size()) +
                                " features, dataset expects " +
                                std::to_string(feature_names_.size()));
  }
  if (!(record.time > 0.0) || !std::isfinite(record.time)) {
    throw std::invalid_argument("survival time must be positive and finite");
  }
}

void SurvivalDataset::add(SurvivalRecord record) {
  check(record);
  records_.push_back(std::move(record));
}

std::vector<double> SurvivalDataset::times() const {
  std::vector<double> out;
  out.reserve(records_.size());
  for (const auto& r : records_) out.push_back(r.time);
  return out;
}

std::vector<std::uint8_t> SurvivalDataset::events() const {
  std::vector<std::uint8_t> out;
  out.reserve(records_.size());
  for (const auto& r : records_) out.push_back(r.event ? 1 : 0);
  return out;
}

std::size_t SurvivalDataset::n_events() const {
  return static_cast<std::size_t>(
      std::count_if(records_.begin(), records_.end(), [](const auto& r) { return r.event; }));
}

SurvivalDataset SurvivalDataset::subset(std::span<const std::size_t> rows) const {
  SurvivalDataset out(feature_names_);
  out.records_.reserve(rows.size());
  for (auto i : rows) out.records_.push_back(records_.at(i));
  return out;
}

StepCurve::StepCurve(std::vector<double> times, std::vector<double> values, double pre_value)
    : times_(std::move(times)), values_(std::move(values)), pre_value_(pre_value) {
  if (times_.size() != values_.size()) {
    throw std::invalid_argument("StepCurve: times and values differ in length");
  }
  for (std::size_t i = 1; i < times_.size(); ++i) {
    if (!(times_[i - 1] < times_[i])) {
      throw std::invalid_argument("StepCurve: times must be strictly increasing");
    }
  }
  for (double v : values_) {
    if (!std::isfinite(v)) throw std::invalid_argument("StepCurve: non-finite value");
  }
}

double StepCurve::value(double t) const {
  auto it = std::upper_bound(times_.begin(), times_.end(), t);
  if (it == times_.begin()) return pre_value_;
  return values_[static_cast<std::size_t>(it - times_.begin()) - 1];
}

double StepCurve::left_limit(double t) const {
  auto it = std::lower_bound(times_.begin(), times_.end(), t);
  if (it == times_.begin()) return pre_value_;
  return values_[static_cast<std::size_t>(it - times_.begin()) - 1];
}

bool StepCurve::is_survival() const {
  if (pre_value_ != 1.0) return false;
  double prev = 1.0;
  for (double v : values_) {
    if (v < 0.0 || v > prev) return false;
    prev = v;
  }
  return true;
}

bool StepCurve::is_cumulative_hazard() const {
  if (pre_value_ != 0.0) return false;
  double prev = 0.0;
  for (double v : values_) {
    if (v < prev) return false;
    prev = v;
  }
  return true;
}

RiskTable build_risk_table(std::span<const double> times, std::span<const std::uint8_t> events,
                           bool use_censoring_as_event) {
  if (times.size() != events.size()) {
    throw std::invalid_argument("build_risk_table: times and events differ in length");
  }
  const std::size_t n = times.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });

  RiskTable table;
  std::size_t remaining = n;
  std::size_t i = 0;
  while (i < n) {
    const double t = times[order[i]];
    std::size_t tied = 0;
    std::size_t deaths = 0;
    while (i < n && times[order[i]] == t) {
      const bool is_event = (events[order[i]] != 0) != use_censoring_as_event;
      deaths += is_event ? 1 : 0;
      ++tied;
      ++i;
    }
    if (deaths > 0) {
      table.event_times.push_back(t);
      table.deaths.push_back(deaths);
      table.at_risk.push_back(remaining);
    }
    remaining -= tied;
  }
  return table;
}

RiskTable build_risk_table(const SurvivalDataset& data, bool use_censoring_as_event) {
  const auto t = data.times();
  const auto e = data.events();
  return build_risk_table(t, e, use_censoring_as_event);
}

StepCurve kaplan_meier(std::span<const double> times, std::span<const std::uint8_t> events,
                       bool use_censoring_as_event) {
  const RiskTable table = build_risk_table(times, events, use_censoring_as_event);
  std::vector<double> values;
  values.reserve(table.size());
  double s = 1.0;
  for (std::size_t j = 0; j < table.size(); ++j) {
    s *= 1.0 - static_cast<double>(table.deaths[j]) / static_cast<double>(table.at_risk[j]);
    values.push_back(s);
  }
  return StepCurve(table.event_times, std::move(values), 1.0);
}

StepCurve kaplan_meier(const SurvivalDataset& data, bool use_censoring_as_event) {
  const auto t = data.times();
  const auto e = data.events();
  return kaplan_meier(t, e, use_censoring_as_event);
}

StepCurve nelson_aalen(std::span<const double> times, std::span<const std::uint8_t> events) {
  const RiskTable table = build_risk_table(times, events, false);
  std::vector<double> values;
  values.reserve(table.size());
  double h = 0.0;
  for (std::size_t j = 0; j < table.size(); ++j) {
    h += static_cast<double>(table.deaths[j]) / static_cast<double>(table.at_risk[j]);
    values.push_back(h);
  }
  return StepCurve(table.event_times, std::move(values), 0.0);
}

StepCurve nelson_aalen(const SurvivalDataset& data) {
  const auto t = data.times();
  const auto e = data.events();
  return nelson_aalen(t, e);
}

StepCurve chf_to_survival(const StepCurve& chf) {
  if (chf.pre_value() < 0.0) throw std::invalid_argument("chf_to_survival: negative hazard");
  std::vector<double> values;
  values.reserve(chf.size());
  for (double h : chf.values()) {
    if (h < 0.0) throw std::invalid_argument("chf_to_survival: negative hazard");
    values.push_back(std::exp(-h));
  }
  return StepCurve(chf.times(), std::move(values), std::exp(-chf.pre_value()));
}

}  // namespace fedsurf
