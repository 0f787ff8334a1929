#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fedsurf {

struct SurvivalRecord {
  std::vector<double> features;
  bool event = false;
  double time = 0.0;  // event time if event, censoring time otherwise

  friend bool operator==(const SurvivalRecord&, const SurvivalRecord&) = default;
};

/// A right-censored survival dataset: rows of (x, delta, t) sharing one
/// feature dimensionality.
class SurvivalDataset {
 public:
  SurvivalDataset() = default;
  explicit SurvivalDataset(std::vector<std::string> feature_names);
  SurvivalDataset(std::vector<std::string> feature_names, std::vector<SurvivalRecord> records);

  /// Throws std::invalid_argument on dimension mismatch or non-positive time.
  void add(SurvivalRecord record);

  [[nodiscard]] std::size_t size() const { return records_.size(); }
  [[nodiscard]] bool empty() const { return records_.empty(); }
  [[nodiscard]] std::size_t n_features() const { return feature_names_.size(); }
  [[nodiscard]] const std::vector<std::string>& feature_names() const { return feature_names_; }
  [[nodiscard]] const std::vector<SurvivalRecord>& records() const { return records_; }
  [[nodiscard]] const SurvivalRecord& operator[](std::size_t i) const { return records_[i]; }

  [[nodiscard]] std::vector<double> times() const;
  [[nodiscard]] std::vector<std::uint8_t> events() const;
  [[nodiscard]] std::size_t n_events() const;

  /// Rows at the given positions, in the given order (duplicates allowed).
  [[nodiscard]] SurvivalDataset subset(std::span<const std::size_t> rows) const;

  friend bool operator==(const SurvivalDataset&, const SurvivalDataset&) = default;

 private:
  void check(const SurvivalRecord& record) const;

  std::vector<std::string> feature_names_;
  std::vector<SurvivalRecord> records_;
};

/// Right-continuous step function on a strictly increasing grid.
///
/// `value(t)` is `pre_value` for t below the first grid point and otherwise
/// the value attached to the last grid point <= t. `left_limit(t)` uses the
/// last grid point strictly below t, which is the convention of the
/// product-limit formula written over t_j < t.
class StepCurve {
 public:
  StepCurve() = default;
  StepCurve(std::vector<double> times, std::vector<double> values, double pre_value);

  static StepCurve constant(double value) { return StepCurve({}, {}, value); }

  [[nodiscard]] double operator()(double t) const { return value(t); }
  [[nodiscard]] double value(double t) const;
  [[nodiscard]] double left_limit(double t) const;

  [[nodiscard]] const std::vector<double>& times() const { return times_; }
  [[nodiscard]] const std::vector<double>& values() const { return values_; }
  [[nodiscard]] double pre_value() const { return pre_value_; }
  [[nodiscard]] std::size_t size() const { return times_.size(); }

  /// pre_value 1, values in [0,1], non-increasing.
  [[nodiscard]] bool is_survival() const;
  /// pre_value 0, values >= 0, non-decreasing.
  [[nodiscard]] bool is_cumulative_hazard() const;

  friend bool operator==(const StepCurve&, const StepCurve&) = default;

 private:
  std::vector<double> times_;
  std::vector<double> values_;
  double pre_value_ = 0.0;
};

struct RiskTable {
  std::vector<double> event_times;
  std::vector<std::size_t> deaths;
  std::vector<std::size_t> at_risk;

  [[nodiscard]] std::size_t size() const { return event_times.size(); }
  [[nodiscard]] bool empty() const { return event_times.empty(); }
};

/// Events pooled at tied times; records censored at an event time stay in
/// that time's risk set. With `use_censoring_as_event` the indicator is
/// flipped (used for the censoring distribution).
RiskTable build_risk_table(std::span<const double> times, std::span<const std::uint8_t> events,
                           bool use_censoring_as_event = false);
RiskTable build_risk_table(const SurvivalDataset& data, bool use_censoring_as_event = false);

StepCurve kaplan_meier(std::span<const double> times, std::span<const std::uint8_t> events,
                       bool use_censoring_as_event = false);
StepCurve kaplan_meier(const SurvivalDataset& data, bool use_censoring_as_event = false);

StepCurve nelson_aalen(std::span<const double> times, std::span<const std::uint8_t> events);
StepCurve nelson_aalen(const SurvivalDataset& data);

/// S(t) = exp(-H(t)) on the same grid. Throws on negative hazard values.
StepCurve chf_to_survival(const StepCurve& chf);

}  // namespace fedsurf
