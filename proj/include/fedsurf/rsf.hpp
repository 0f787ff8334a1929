#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "fedsurf/survival.hpp"

namespace fedsurf {

struct RsfParams {
  std::size_t n_trees = 100;
  std::optional<std::size_t> max_depth;  // nullopt: unbounded
  std::size_t min_samples_split = 6;
  std::size_t min_samples_leaf = 3;
  std::uint64_t seed = 0;
  std::size_t n_threads = 1;  // 0: one per core. Never changes results.

  /// Throws std::invalid_argument if T < 1, depth 0, s < 2 or l < 1.
  void validate() const;

  friend bool operator==(const RsfParams&, const RsfParams&) = default;
};

/// floor(sqrt(d)), at least 1.
std::size_t max_features_for(std::size_t n_features);

struct SplitNode {
  std::size_t feature = 0;
  double threshold = 0.0;  // x[feature] <= threshold goes left
  std::size_t left = 0;
  std::size_t right = 0;

  friend bool operator==(const SplitNode&, const SplitNode&) = default;
};

struct LeafNode {
  StepCurve chf;  // Nelson-Aalen of the in-bag samples reaching the leaf
  std::size_t n_samples = 0;

  friend bool operator==(const LeafNode&, const LeafNode&) = default;
};

using TreeNode = std::variant<SplitNode, LeafNode>;

/// Binary survival tree stored as a flat node array in breadth-first order
/// with the root at index 0.
class SurvivalTree {
 public:
  SurvivalTree() = default;
  /// Validates the structure: node 0 is the root, children listed in
  /// breadth-first order, every node reachable exactly once, features
  /// within range, leaf curves hazard-typed.
  SurvivalTree(std::vector<TreeNode> nodes, std::size_t n_features, std::uint64_t bootstrap_seed);

  [[nodiscard]] const std::vector<TreeNode>& nodes() const { return nodes_; }
  [[nodiscard]] std::size_t n_features() const { return n_features_; }
  [[nodiscard]] std::uint64_t bootstrap_seed() const { return bootstrap_seed_; }

  [[nodiscard]] std::size_t leaf_index(std::span<const double> x) const;
  [[nodiscard]] const LeafNode& leaf(std::span<const double> x) const;
  [[nodiscard]] const LeafNode& leaf_at(std::size_t node) const { return std::get<LeafNode>(nodes_[node]); }

  /// Longest root-to-leaf path in edges.
  [[nodiscard]] std::size_t depth() const;
  [[nodiscard]] std::size_t n_leaves() const;

  friend bool operator==(const SurvivalTree&, const SurvivalTree&) = default;

 private:
  std::vector<TreeNode> nodes_;
  std::size_t n_features_ = 0;
  std::uint64_t bootstrap_seed_ = 0;
};

/// Bag of trees sharing one event-time grid. Ensemble curves are the mean of
/// the per-tree leaf curves, read off at the grid points.
class SurvivalForest {
 public:
  SurvivalForest() = default;
  /// Requires at least one tree, equal feature dimension across trees and a
  /// strictly increasing grid.
  SurvivalForest(std::vector<SurvivalTree> trees, std::vector<double> event_grid, RsfParams params);

  [[nodiscard]] const std::vector<SurvivalTree>& trees() const { return trees_; }
  [[nodiscard]] const std::vector<double>& event_grid() const { return grid_; }
  [[nodiscard]] const RsfParams& params() const { return params_; }
  [[nodiscard]] std::size_t size() const { return trees_.size(); }
  [[nodiscard]] std::size_t n_features() const;

  /// Forest of the given trees (in the given order) keeping this grid.
  [[nodiscard]] SurvivalForest subset(std::span<const std::size_t> tree_ids) const;

  [[nodiscard]] StepCurve predict_chf(std::span<const double> x) const;
  [[nodiscard]] StepCurve predict_survival(std::span<const double> x) const;
  /// Ensemble cumulative hazard summed over the grid.
  [[nodiscard]] double risk_score(std::span<const double> x) const;

  [[nodiscard]] std::vector<double> risk_scores(const SurvivalDataset& data) const;
  /// out[k][i] = ensemble H_i at times[k], read as predict_chf(x_i)(times[k]).
  [[nodiscard]] std::vector<std::vector<double>> chf_at(const SurvivalDataset& data,
                                                        std::span<const double> times) const;
  /// exp(-chf_at).
  [[nodiscard]] std::vector<std::vector<double>> survival_at(const SurvivalDataset& data,
                                                             std::span<const double> times) const;

  friend bool operator==(const SurvivalForest&, const SurvivalForest&) = default;

 private:
  void check_dimension(std::size_t d) const;

  std::vector<SurvivalTree> trees_;
  std::vector<double> grid_;
  RsfParams params_;
};

struct Split {
  std::size_t feature = 0;
  double threshold = 0.0;
  double statistic = 0.0;

  friend bool operator==(const Split&, const Split&) = default;
};

/// Two-sample log-rank chi-square (O-E)^2/V of group a against b over the
/// pooled event times. 0 when V = 0.
double logrank_statistic(const SurvivalDataset& group_a, const SurvivalDataset& group_b);

/// Best log-rank split over the candidate features and all midpoints between
/// consecutive distinct values, both children holding >= min_leaf samples.
/// Ties: higher statistic, then lower feature index, then lower threshold;
/// statistics within a relative 1e-9 of each other count as tied.
/// nullopt when no admissible split has a positive statistic.
std::optional<Split> best_split(const SurvivalDataset& samples, std::span<const std::size_t> candidate_features,
                                std::size_t min_leaf);

/// One tree on a bootstrap sample drawn from `seed`.
SurvivalTree fit_tree(const SurvivalDataset& data, const RsfParams& params, std::uint64_t seed);

/// params.n_trees trees; tree i uses derive_seed(params.seed, i). The grid is
/// the set of distinct event times in `data`.
SurvivalForest fit_forest(const SurvivalDataset& data, const RsfParams& params);

/// Sorted distinct event times.
std::vector<double> event_time_grid(const SurvivalDataset& data);

}  // namespace fedsurf
