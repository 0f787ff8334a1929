#include "fedsurf/rsf.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include "fedsurf/parallel.hpp"
#include "fedsurf/random.hpp"

namespace fedsurf {
namespace {

using Columns = std::vector<std::vector<double>>;

constexpr double kTieTolerance = 1e-9;

Columns column_major(const SurvivalDataset& data) {
  Columns cols(data.n_features(), std::vector<double>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& x = data[i].features;
    for (std::size_t f = 0; f < x.size(); ++f) cols[f][i] = x[f];
  }
  return cols;
}

// Fenwick tree over positions 0..n-1 holding a count and a sum per position.
class PrefixCounter {
 public:
  void reset(std::size_t n) {
    count_.assign(n + 1, 0);
    sum_.assign(n + 1, 0.0);
  }
  void add(std::size_t pos, double value) {
    for (std::size_t i = pos + 1; i < count_.size(); i += i & (~i + 1)) {
      ++count_[i];
      sum_[i] += value;
    }
  }
  // (count, sum) over positions < pos.
  [[nodiscard]] std::pair<std::size_t, double> below(std::size_t pos) const {
    std::size_t c = 0;
    double s = 0.0;
    for (std::size_t i = pos; i > 0; i -= i & (~i + 1)) {
      c += count_[i];
      s += sum_[i];
    }
    return {c, s};
  }

 private:
  std::vector<std::size_t> count_;
  std::vector<double> sum_;
};

double split_threshold(double lo, double hi) {
  const double mid = (lo + hi) / 2.0;
  return (mid >= hi) ? lo : mid;
}

// Log-rank split search for one node. For the node's distinct event times
// u_1 < ... < u_m let k_i = #{u_j <= t_i}; a record is at risk at u_j iff
// j <= k_i. With a_j = d_j/Y_j and c_j = d_j (Y_j - d_j) / (Y_j^2 (Y_j - 1)):
//   E_L = sum_{i in L} A(k_i)
//   V   = sum_{i in L} B(k_i) - sum_{i,i' in L} C(min(k_i, k_i'))
// where A, B, C are prefix sums of a_j, c_j Y_j and c_j. Sweeping records in
// feature order keeps each statistic update at O(log m).
class SplitFinder {
 public:
  SplitFinder(const Columns& cols, std::span<const double> times, std::span<const std::uint8_t> events)
      : cols_(cols), times_(times), events_(events) {}

  std::optional<Split> find(std::span<const std::uint32_t> rows, std::span<const std::size_t> features,
                            std::size_t min_leaf) {
    const std::size_t n = rows.size();
    if (n < 2) return std::nullopt;
    prepare_node(rows);
    if (m_ == 0) return std::nullopt;

    std::optional<Split> best;
    for (std::size_t f : features) {
      const auto& col = cols_[f];
      order_.resize(n);
      std::iota(order_.begin(), order_.end(), std::uint32_t{0});
      std::sort(order_.begin(), order_.end(), [&](std::uint32_t a, std::uint32_t b) {
        const double xa = col[rows[a]];
        const double xb = col[rows[b]];
        return xa < xb || (xa == xb && a < b);
      });
      if (col[rows[order_.front()]] == col[rows[order_.back()]]) continue;

      suffix_max_k_.resize(n + 1);
      suffix_max_k_[n] = 0;
      for (std::size_t p = n; p-- > 0;) suffix_max_k_[p] = std::max(suffix_max_k_[p + 1], k_[order_[p]]);

      counter_.reset(m_ + 1);
      double expected = 0.0, observed = 0.0, v1 = 0.0, quad = 0.0;
      std::size_t max_k_left = 0;
      for (std::size_t p = 0; p + 1 < n; ++p) {
        const std::uint32_t i = order_[p];
        const std::size_t k = k_[i];
        const auto [n_below, c_below] = counter_.below(k);
        const double n_at_or_above = static_cast<double>(p - n_below);
        quad += 2.0 * (c_prefix_[k] * n_at_or_above + c_below) + c_prefix_[k];
        counter_.add(k, c_prefix_[k]);
        expected += a_prefix_[k];
        v1 += b_prefix_[k];
        observed += events_[rows[i]];
        max_k_left = std::max(max_k_left, k);

        const std::size_t n_left = p + 1;
        if (n_left < min_leaf || n - n_left < min_leaf) continue;
        const double x_here = col[rows[i]];
        const double x_next = col[rows[order_[p + 1]]];
        if (!(x_here < x_next)) continue;
        // V is exactly zero iff no informative event time has records from
        // both sides at risk.
        if (informative_prefix_[std::min(max_k_left, suffix_max_k_[p + 1])] == 0) continue;
        const double variance = v1 - quad;
        if (!(variance > 0.0)) continue;
        const double diff = observed - expected;
        const double stat = diff * diff / variance;
        if (!(stat > 0.0)) continue;
        // Candidates arrive in (feature, threshold) order; a statistic within
        // rounding of the incumbent counts as a tie and keeps the earlier one.
        if (!best || stat > best->statistic * (1.0 + kTieTolerance)) {
          best = Split{f, split_threshold(x_here, x_next), stat};
        }
      }
    }
    return best;
  }

 private:
  void prepare_node(std::span<const std::uint32_t> rows) {
    const std::size_t n = rows.size();
    sorted_times_.resize(n);
    for (std::size_t i = 0; i < n; ++i) sorted_times_[i] = times_[rows[i]];
    std::sort(sorted_times_.begin(), sorted_times_.end());

    unique_events_.clear();
    deaths_.clear();
    std::vector<double>& ev = scratch_;
    ev.clear();
    for (auto r : rows)
      if (events_[r]) ev.push_back(times_[r]);
    std::sort(ev.begin(), ev.end());
    for (std::size_t j = 0; j < ev.size();) {
      std::size_t e = j;
      while (e < ev.size() && ev[e] == ev[j]) ++e;
      unique_events_.push_back(ev[j]);
      deaths_.push_back(static_cast<double>(e - j));
      j = e;
    }
    m_ = unique_events_.size();

    a_prefix_.assign(m_ + 1, 0.0);
    b_prefix_.assign(m_ + 1, 0.0);
    c_prefix_.assign(m_ + 1, 0.0);
    informative_prefix_.assign(m_ + 1, 0);
    for (std::size_t j = 0; j < m_; ++j) {
      const auto first = std::lower_bound(sorted_times_.begin(), sorted_times_.end(), unique_events_[j]);
      const auto y = static_cast<double>(sorted_times_.end() - first);
      const double d = deaths_[j];
      const double a = d / y;
      const double c = (y > 1.0) ? d * (y - d) / (y * y * (y - 1.0)) : 0.0;
      a_prefix_[j + 1] = a_prefix_[j] + a;
      b_prefix_[j + 1] = b_prefix_[j] + c * y;
      c_prefix_[j + 1] = c_prefix_[j] + c;
      informative_prefix_[j + 1] = informative_prefix_[j] + (c > 0.0 ? 1 : 0);
    }

    k_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      k_[i] = static_cast<std::size_t>(
          std::upper_bound(unique_events_.begin(), unique_events_.end(), times_[rows[i]]) - unique_events_.begin());
    }
  }

  const Columns& cols_;
  std::span<const double> times_;
  std::span<const std::uint8_t> events_;

  std::size_t m_ = 0;
  std::vector<double> sorted_times_, unique_events_, deaths_, scratch_;
  std::vector<double> a_prefix_, b_prefix_, c_prefix_;
  std::vector<std::size_t> informative_prefix_, k_, suffix_max_k_;
  std::vector<std::uint32_t> order_;
  PrefixCounter counter_;
};

StepCurve leaf_curve(std::span<const std::uint32_t> rows, std::span<const double> times,
                     std::span<const std::uint8_t> events) {
  std::vector<double> t(rows.size());
  std::vector<std::uint8_t> e(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    t[i] = times[rows[i]];
    e[i] = events[rows[i]];
  }
  return nelson_aalen(t, e);
}

std::vector<std::uint32_t> bootstrap_rows(std::size_t n, std::span<const std::uint8_t> events, Rng& rng) {
  std::vector<std::uint32_t> rows(n);
  auto has_event = [&] {
    return std::any_of(rows.begin(), rows.end(), [&](std::uint32_t r) { return events[r] != 0; });
  };
  for (int attempt = 0; attempt <= 10; ++attempt) {
    for (auto& r : rows) r = static_cast<std::uint32_t>(rng.below(n));
    if (has_event()) return rows;
  }
  std::iota(rows.begin(), rows.end(), std::uint32_t{0});
  return rows;
}

SurvivalTree grow_tree(const Columns& cols, std::span<const double> times, std::span<const std::uint8_t> events,
                       const RsfParams& params, std::uint64_t seed) {
  const std::size_t n = times.size();
  const std::size_t d = cols.size();
  const std::size_t n_candidates = max_features_for(d);
  const std::size_t depth_limit = params.max_depth.value_or(std::numeric_limits<std::size_t>::max());
  Rng rng(seed);

  struct Pending {
    std::size_t node;
    std::vector<std::uint32_t> rows;
    std::size_t depth;
  };
  std::vector<TreeNode> nodes(1);
  std::deque<Pending> queue;
  queue.push_back({0, bootstrap_rows(n, events, rng), 0});

  SplitFinder finder(cols, times, events);
  std::vector<std::size_t> features(d);
  while (!queue.empty()) {
    Pending item = std::move(queue.front());
    queue.pop_front();

    std::optional<Split> split;
    if (item.rows.size() >= params.min_samples_split && item.depth < depth_limit) {
      std::iota(features.begin(), features.end(), std::size_t{0});
      for (std::size_t j = 0; j < n_candidates; ++j) std::swap(features[j], features[j + rng.below(d - j)]);
      std::vector<std::size_t> candidates(features.begin(), features.begin() + static_cast<long>(n_candidates));
      std::sort(candidates.begin(), candidates.end());
      split = finder.find(item.rows, candidates, params.min_samples_leaf);
    }

    if (!split) {
      nodes[item.node] = LeafNode{leaf_curve(item.rows, times, events), item.rows.size()};
      continue;
    }

    std::vector<std::uint32_t> left, right;
    for (auto r : item.rows) (cols[split->feature][r] <= split->threshold ? left : right).push_back(r);
    const std::size_t left_id = nodes.size();
    nodes.emplace_back();
    nodes.emplace_back();
    nodes[item.node] = SplitNode{split->feature, split->threshold, left_id, left_id + 1};
    queue.push_back({left_id, std::move(left), item.depth + 1});
    queue.push_back({left_id + 1, std::move(right), item.depth + 1});
  }
  return SurvivalTree(std::move(nodes), d, seed);
}

void check_trainable(const SurvivalDataset& data) {
  if (data.empty()) throw std::invalid_argument("fit: empty dataset");
  if (data.n_events() == 0) throw std::invalid_argument("fit: dataset has no events");
  if (data.size() > std::numeric_limits<std::uint32_t>::max()) throw std::invalid_argument("fit: dataset too large");
}

// Number of grid points in [a, b).
double grid_count(const std::vector<double>& grid, double a, double b) {
  const auto lo = std::lower_bound(grid.begin(), grid.end(), a);
  const auto hi = std::lower_bound(lo, grid.end(), b);
  return static_cast<double>(hi - lo);
}

// Sum of H over the grid points, H right-continuous with H = 0 before its
// first time.
double grid_sum(const StepCurve& h, const std::vector<double>& grid) {
  const auto& t = h.times();
  const auto& v = h.values();
  double total = 0.0;
  for (std::size_t j = 0; j < t.size(); ++j) {
    const double next = (j + 1 < t.size()) ? t[j + 1] : std::numeric_limits<double>::infinity();
    total += v[j] * grid_count(grid, t[j], next);
  }
  return total;
}

}  // namespace

void RsfParams::validate() const {
  if (n_trees < 1) throw std::invalid_argument("RsfParams: n_trees must be >= 1");
  if (max_depth && *max_depth < 1) throw std::invalid_argument("RsfParams: max_depth must be >= 1");
  if (min_samples_split < 2) throw std::invalid_argument("RsfParams: min_samples_split must be >= 2");
  if (min_samples_leaf < 1) throw std::invalid_argument("RsfParams: min_samples_leaf must be >= 1");
}

std::size_t max_features_for(std::size_t n_features) {
  std::size_t r = static_cast<std::size_t>(std::sqrt(static_cast<double>(n_features)));
  while (r * r > n_features) --r;
  while ((r + 1) * (r + 1) <= n_features) ++r;
  return std::max<std::size_t>(1, r);
}

SurvivalTree::SurvivalTree(std::vector<TreeNode> nodes, std::size_t n_features, std::uint64_t bootstrap_seed)
    : nodes_(std::move(nodes)), n_features_(n_features), bootstrap_seed_(bootstrap_seed) {
  if (nodes_.empty()) throw std::invalid_argument("SurvivalTree: no nodes");
  // Breadth-first walk from the root must visit 0, 1, 2, ... in order.
  std::deque<std::size_t> queue{0};
  std::size_t visited = 0;
  while (!queue.empty()) {
    const std::size_t id = queue.front();
    queue.pop_front();
    if (id != visited) throw std::invalid_argument("SurvivalTree: nodes not in breadth-first order");
    ++visited;
    if (const auto* s = std::get_if<SplitNode>(&nodes_[id])) {
      if (s->left >= nodes_.size() || s->right >= nodes_.size()) {
        throw std::invalid_argument("SurvivalTree: dangling child id at node " + std::to_string(id));
      }
      if (s->feature >= n_features_) throw std::invalid_argument("SurvivalTree: feature index out of range");
      if (!std::isfinite(s->threshold)) throw std::invalid_argument("SurvivalTree: non-finite threshold");
      queue.push_back(s->left);
      queue.push_back(s->right);
    } else {
      const auto& leaf = std::get<LeafNode>(nodes_[id]);
      if (!leaf.chf.is_cumulative_hazard()) {
        throw std::invalid_argument("SurvivalTree: leaf curve is not a cumulative hazard");
      }
    }
    if (visited > nodes_.size()) break;
  }
  if (visited != nodes_.size()) throw std::invalid_argument("SurvivalTree: unreachable or shared nodes");
}

std::size_t SurvivalTree::leaf_index(std::span<const double> x) const {
  if (x.size() != n_features_) {
    throw std::invalid_argument("SurvivalTree: expected " + std::to_string(n_features_) + " features, got " +
                                std::to_string(x.size()));
  }
  std::size_t id = 0;
  while (const auto* s = std::get_if<SplitNode>(&nodes_[id])) id = (x[s->feature] <= s->threshold) ? s->left : s->right;
  return id;
}

const LeafNode& SurvivalTree::leaf(std::span<const double> x) const { return leaf_at(leaf_index(x)); }

std::size_t SurvivalTree::depth() const {
  std::vector<std::size_t> level(nodes_.size(), 0);
  std::size_t deepest = 0;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    deepest = std::max(deepest, level[id]);
    if (const auto* s = std::get_if<SplitNode>(&nodes_[id])) {
      level[s->left] = level[s->right] = level[id] + 1;
    }
  }
  return deepest;
}

std::size_t SurvivalTree::n_leaves() const {
  return static_cast<std::size_t>(
      std::count_if(nodes_.begin(), nodes_.end(), [](const TreeNode& n) { return std::holds_alternative<LeafNode>(n); }));
}

SurvivalForest::SurvivalForest(std::vector<SurvivalTree> trees, std::vector<double> event_grid, RsfParams params)
    : trees_(std::move(trees)), grid_(std::move(event_grid)), params_(params) {
  if (trees_.empty()) throw std::invalid_argument("SurvivalForest: no trees");
  for (const auto& t : trees_) {
    if (t.n_features() != trees_.front().n_features()) {
      throw std::invalid_argument("SurvivalForest: trees disagree on feature dimension");
    }
  }
  for (std::size_t k = 0; k < grid_.size(); ++k) {
    if (!std::isfinite(grid_[k]) || (k > 0 && !(grid_[k] > grid_[k - 1]))) {
      throw std::invalid_argument("SurvivalForest: event grid must be finite and strictly increasing");
    }
  }
}

std::size_t SurvivalForest::n_features() const { return trees_.empty() ? 0 : trees_.front().n_features(); }

void SurvivalForest::check_dimension(std::size_t d) const {
  if (trees_.empty()) throw std::logic_error("SurvivalForest: prediction on an empty forest");
  if (d != n_features()) {
    throw std::invalid_argument("SurvivalForest: expected " + std::to_string(n_features()) + " features, got " +
                                std::to_string(d));
  }
}

SurvivalForest SurvivalForest::subset(std::span<const std::size_t> tree_ids) const {
  std::vector<SurvivalTree> picked;
  picked.reserve(tree_ids.size());
  for (auto id : tree_ids) picked.push_back(trees_.at(id));
  RsfParams p = params_;
  p.n_trees = picked.size();
  return SurvivalForest(std::move(picked), grid_, p);
}

std::vector<std::vector<double>> SurvivalForest::chf_at(const SurvivalDataset& data,
                                                        std::span<const double> times) const {
  check_dimension(data.n_features());
  // Read leaves at the last grid point <= t; before the grid H is 0.
  std::vector<std::optional<double>> at(times.size());
  for (std::size_t k = 0; k < times.size(); ++k) {
    const auto it = std::upper_bound(grid_.begin(), grid_.end(), times[k]);
    if (it != grid_.begin()) at[k] = *std::prev(it);
  }
  std::vector<std::vector<double>> out(times.size(), std::vector<double>(data.size(), 0.0));
  std::vector<double> leaf_values;
  std::vector<std::size_t> slot;
  for (const auto& tree : trees_) {
    slot.assign(tree.nodes().size(), std::numeric_limits<std::size_t>::max());
    leaf_values.clear();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const std::size_t id = tree.leaf_index(data[i].features);
      if (slot[id] == std::numeric_limits<std::size_t>::max()) {
        slot[id] = leaf_values.size();
        const auto& chf = tree.leaf_at(id).chf;
        for (const auto& t : at) leaf_values.push_back(t ? chf(*t) : 0.0);
      }
      const double* v = leaf_values.data() + slot[id];
      for (std::size_t k = 0; k < times.size(); ++k) out[k][i] += v[k];
    }
  }
  const auto n_trees = static_cast<double>(trees_.size());
  for (auto& row : out)
    for (auto& v : row) v /= n_trees;
  return out;
}

std::vector<std::vector<double>> SurvivalForest::survival_at(const SurvivalDataset& data,
                                                             std::span<const double> times) const {
  auto out = chf_at(data, times);
  for (auto& row : out)
    for (auto& v : row) v = std::exp(-v);
  return out;
}

StepCurve SurvivalForest::predict_chf(std::span<const double> x) const {
  check_dimension(x.size());
  SurvivalDataset one(std::vector<std::string>(x.size(), ""));
  one.add({std::vector<double>(x.begin(), x.end()), false, 1.0});
  const auto values = chf_at(one, grid_);
  std::vector<double> v(grid_.size());
  for (std::size_t k = 0; k < grid_.size(); ++k) v[k] = values[k][0];
  return StepCurve(grid_, std::move(v), 0.0);
}

StepCurve SurvivalForest::predict_survival(std::span<const double> x) const {
  return chf_to_survival(predict_chf(x));
}

std::vector<double> SurvivalForest::risk_scores(const SurvivalDataset& data) const {
  check_dimension(data.n_features());
  std::vector<double> out(data.size(), 0.0);
  std::vector<double> cache;
  for (const auto& tree : trees_) {
    cache.assign(tree.nodes().size(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t i = 0; i < data.size(); ++i) {
      const std::size_t id = tree.leaf_index(data[i].features);
      if (std::isnan(cache[id])) cache[id] = grid_sum(tree.leaf_at(id).chf, grid_);
      out[i] += cache[id];
    }
  }
  const auto n_trees = static_cast<double>(trees_.size());
  for (auto& v : out) v /= n_trees;
  return out;
}

double SurvivalForest::risk_score(std::span<const double> x) const {
  check_dimension(x.size());
  SurvivalDataset one(std::vector<std::string>(x.size(), ""));
  one.add({std::vector<double>(x.begin(), x.end()), false, 1.0});
  return risk_scores(one).front();
}

double logrank_statistic(const SurvivalDataset& group_a, const SurvivalDataset& group_b) {
  auto sorted_times = [](const SurvivalDataset& g) {
    auto t = g.times();
    std::sort(t.begin(), t.end());
    return t;
  };
  const auto ta = sorted_times(group_a);
  const auto tb = sorted_times(group_b);
  std::vector<std::pair<double, bool>> deaths;  // (time, in a)
  for (const auto& r : group_a.records())
    if (r.event) deaths.emplace_back(r.time, true);
  for (const auto& r : group_b.records())
    if (r.event) deaths.emplace_back(r.time, false);
  std::sort(deaths.begin(), deaths.end());

  auto at_risk = [](const std::vector<double>& t, double u) {
    return static_cast<double>(t.end() - std::lower_bound(t.begin(), t.end(), u));
  };
  double o_minus_e = 0.0;
  double variance = 0.0;
  for (std::size_t j = 0; j < deaths.size();) {
    const double u = deaths[j].first;
    double d = 0.0, d_a = 0.0;
    for (; j < deaths.size() && deaths[j].first == u; ++j) {
      d += 1.0;
      d_a += deaths[j].second ? 1.0 : 0.0;
    }
    const double y_a = at_risk(ta, u);
    const double y = y_a + at_risk(tb, u);
    o_minus_e += d_a - y_a * d / y;
    if (y > 1.0) variance += y_a * (y - y_a) * d * (y - d) / (y * y * (y - 1.0));
  }
  return variance > 0.0 ? o_minus_e * o_minus_e / variance : 0.0;
}

std::optional<Split> best_split(const SurvivalDataset& samples, std::span<const std::size_t> candidate_features,
                                std::size_t min_leaf) {
  std::vector<std::size_t> features(candidate_features.begin(), candidate_features.end());
  std::sort(features.begin(), features.end());
  features.erase(std::unique(features.begin(), features.end()), features.end());
  for (auto f : features) {
    if (f >= samples.n_features()) throw std::invalid_argument("best_split: feature index out of range");
  }
  const auto cols = column_major(samples);
  const auto times = samples.times();
  const auto events = samples.events();
  std::vector<std::uint32_t> rows(samples.size());
  std::iota(rows.begin(), rows.end(), std::uint32_t{0});
  SplitFinder finder(cols, times, events);
  return finder.find(rows, features, std::max<std::size_t>(min_leaf, 1));
}

SurvivalTree fit_tree(const SurvivalDataset& data, const RsfParams& params, std::uint64_t seed) {
  params.validate();
  check_trainable(data);
  const auto cols = column_major(data);
  const auto times = data.times();
  const auto events = data.events();
  return grow_tree(cols, times, events, params, seed);
}

SurvivalForest fit_forest(const SurvivalDataset& data, const RsfParams& params) {
  params.validate();
  check_trainable(data);
  const auto cols = column_major(data);
  const auto times = data.times();
  const auto events = data.events();
  std::vector<SurvivalTree> trees(params.n_trees);
  parallel_for(params.n_trees, params.n_threads, [&](std::size_t i) {
    trees[i] = grow_tree(cols, times, events, params, derive_seed(params.seed, i));
  });
  return SurvivalForest(std::move(trees), event_time_grid(data), params);
}

std::vector<double> event_time_grid(const SurvivalDataset& data) {
  std::vector<double> grid;
  for (const auto& r : data.records())
    if (r.event) grid.push_back(r.time);
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return grid;
}

}  // namespace fedsurf
