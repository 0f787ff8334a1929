#include "fedsurf/protocol.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "fedsurf/datasplit.hpp"
#include "fedsurf/metrics.hpp"

namespace fedsurf {
namespace {

struct StrategyName {
  SamplingStrategy strategy;
  std::string_view id;
  std::string_view display;
};

constexpr std::array<StrategyName, 5> kNames = {{
    {SamplingStrategy::Uniform, "uniform", "FedSurF"},
    {SamplingStrategy::Concordance, "concordance", "FedSurF-C"},
    {SamplingStrategy::ConcordanceIpcw, "concordance_ipcw", "FedSurF-C-IPCW"},
    {SamplingStrategy::InverseIbs, "inverse_ibs", "FedSurF-IBS"},
    {SamplingStrategy::CumulativeAuc, "cumulative_auc", "FedSurF-AUC"},
}};

const StrategyName& entry(SamplingStrategy s) {
  for (const auto& e : kNames)
    if (e.strategy == s) return e;
  throw std::invalid_argument("unknown sampling strategy");
}

bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
         });
}

SurvivalDataset pooled(const SurvivalDataset& a, const SurvivalDataset& b) {
  SurvivalDataset out(a.feature_names(), a.records());
  for (const auto& r : b.records()) out.add(r);
  return out;
}

}  // namespace

std::string_view to_string(SamplingStrategy s) { return entry(s).id; }
std::string_view display_name(SamplingStrategy s) { return entry(s).display; }

SamplingStrategy parse_strategy(std::string_view name) {
  for (const auto& e : kNames) {
    if (iequals(name, e.id) || iequals(name, e.display)) return e.strategy;
  }
  throw std::invalid_argument("unknown sampling strategy '" + std::string(name) + "'");
}

ClientState make_client(std::uint32_t client_id, const SurvivalDataset& local, double validation_fraction,
                        std::uint64_t seed) {
  Rng rng(derive_seed(seed, kValidationStream));
  auto parts = validation_split(local, validation_fraction, rng);
  ClientState c;
  c.client_id = client_id;
  c.seed = seed;
  c.train = std::move(parts.first);
  c.validation = std::move(parts.second);
  return c;
}

void local_train(ClientState& client, const RsfParams& params) {
  RsfParams p = params;
  p.seed = derive_seed(client.seed, kTrainStream);
  client.forest = fit_forest(client.train, p);
  client.tree_weights.clear();
}

std::vector<double> evaluate_trees(const ClientState& client, SamplingStrategy strategy) {
  if (!client.forest) throw std::logic_error("evaluate_trees: client has no trained forest");
  const std::size_t n_trees = client.forest->size();
  std::vector<double> ones(n_trees, 1.0);
  if (strategy == SamplingStrategy::Uniform || client.validation.empty()) return ones;

  const auto& val = client.validation;
  const StepCurve censoring = censoring_km(pooled(client.train, client.validation));
  std::optional<EvaluationGrid> grid;
  try {
    grid = default_grid(val);
  } catch (const MetricUndefined&) {
  }

  constexpr double kUndefined = std::numeric_limits<double>::quiet_NaN();
  constexpr double kPerfect = std::numeric_limits<double>::infinity();
  std::vector<double> weights(n_trees, kUndefined);
  for (std::size_t j = 0; j < n_trees; ++j) {
    const std::vector<std::size_t> id{j};
    const SurvivalForest tree = client.forest->subset(id);
    try {
      switch (strategy) {
        case SamplingStrategy::Concordance:
          weights[j] = concordance_index(tree.risk_scores(val), val);
          break;
        case SamplingStrategy::ConcordanceIpcw:
          if (grid) weights[j] = concordance_index_ipcw(tree.risk_scores(val), val, censoring, grid->tau);
          break;
        case SamplingStrategy::InverseIbs:
          if (grid) {
            const double ibs = integrated_brier_score(tree.survival_at(val, grid->times), val, *grid, censoring);
            weights[j] = ibs > 0.0 ? 1.0 / ibs : kPerfect;
          }
          break;
        case SamplingStrategy::CumulativeAuc:
          if (grid) weights[j] = cumulative_auc(tree.risk_scores(val), val, *grid, censoring);
          break;
        case SamplingStrategy::Uniform:
          break;
      }
    } catch (const MetricUndefined&) {
    }
  }

  // A perfect IBS gets ten times the largest finite weight.
  double max_finite = 0.0;
  bool any_finite = false;
  for (double w : weights) {
    if (std::isfinite(w)) {
      max_finite = std::max(max_finite, w);
      any_finite = true;
    }
  }
  for (double& w : weights)
    if (std::isinf(w)) w = any_finite ? 10.0 * max_finite : 1.0;

  double min_defined = std::numeric_limits<double>::infinity();
  for (double w : weights)
    if (!std::isnan(w)) min_defined = std::min(min_defined, w);
  if (std::isinf(min_defined)) return ones;
  for (double& w : weights)
    if (std::isnan(w)) w = min_defined;
  return weights;
}

std::size_t FederationPlan::total() const { return std::accumulate(quotas.begin(), quotas.end(), std::size_t{0}); }

std::optional<std::size_t> FederationPlan::quota_for(std::uint32_t client_id) const {
  for (std::size_t k = 0; k < clients.size(); ++k)
    if (clients[k].client_id == client_id) return quotas[k];
  return std::nullopt;
}

FederationPlan assign_tree_counts(const std::vector<ClientSummary>& clients, std::size_t target, Rng& rng) {
  if (target < 1) throw std::invalid_argument("assign_tree_counts: T must be >= 1");
  if (clients.empty()) throw std::invalid_argument("assign_tree_counts: no clients");
  FederationPlan plan{clients, target, std::vector<std::size_t>(clients.size(), 0)};
  std::size_t available = 0;
  for (const auto& c : clients) available += c.n_trees;
  if (target > available) {
    spdlog::warn("requested {} trees but clients hold only {}; using all of them", target, available);
  }
  const std::size_t rounds = std::min(target, available);
  std::vector<std::size_t> open;
  for (std::size_t r = 0; r < rounds; ++r) {
    open.clear();
    double mass = 0.0;
    for (std::size_t k = 0; k < clients.size(); ++k) {
      if (plan.quotas[k] < clients[k].n_trees) {
        open.push_back(k);
        mass += static_cast<double>(clients[k].n_samples);
      }
    }
    std::size_t pick = open.back();
    if (mass > 0.0) {
      const double u = rng.uniform() * mass;
      double acc = 0.0;
      for (auto k : open) {
        acc += static_cast<double>(clients[k].n_samples);
        if (u < acc) {
          pick = k;
          break;
        }
      }
    } else {
      pick = open[rng.below(open.size())];
    }
    ++plan.quotas[pick];
  }
  return plan;
}

std::vector<std::size_t> sample_trees(const std::vector<double>& weights, std::size_t quota, Rng& rng) {
  for (double w : weights) {
    if (!std::isfinite(w) || w < 0.0) throw std::invalid_argument("sample_trees: weights must be finite and >= 0");
  }
  if (quota > weights.size()) throw std::invalid_argument("sample_trees: quota exceeds the number of trees");
  std::vector<std::size_t> remaining(weights.size());
  std::iota(remaining.begin(), remaining.end(), std::size_t{0});
  std::vector<std::size_t> chosen;
  chosen.reserve(quota);
  for (std::size_t draw = 0; draw < quota; ++draw) {
    double mass = 0.0;
    for (auto j : remaining) mass += weights[j];
    std::size_t slot = remaining.size() - 1;
    if (mass > 0.0) {
      const double u = rng.uniform() * mass;
      double acc = 0.0;
      for (std::size_t s = 0; s < remaining.size(); ++s) {
        acc += weights[remaining[s]];
        if (u < acc) {
          slot = s;
          break;
        }
      }
      // rounding can leave u past the last partial sum; take the last
      // positive-weight tree rather than a zero-weight one
      while (weights[remaining[slot]] == 0.0) --slot;
    } else {
      slot = rng.below(remaining.size());
    }
    chosen.push_back(remaining[slot]);
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(slot));
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

SurvivalForest merge_ensemble(std::vector<TreeBatch> batches) {
  std::sort(batches.begin(), batches.end(),
            [](const TreeBatch& a, const TreeBatch& b) { return a.client_id < b.client_id; });
  std::vector<SurvivalTree> trees;
  std::vector<double> grid;
  for (auto& b : batches) {
    for (auto& t : b.trees) trees.push_back(std::move(t));
    grid.insert(grid.end(), b.event_grid.begin(), b.event_grid.end());
  }
  if (trees.empty()) throw std::invalid_argument("merge_ensemble: no trees");
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  RsfParams params;
  params.n_trees = trees.size();
  return SurvivalForest(std::move(trees), std::move(grid), params);
}

TreeBatch respond_to_quota(ClientState& client, std::size_t quota, SamplingStrategy strategy) {
  if (!client.forest) throw std::logic_error("respond_to_quota: client has no trained forest");
  const std::size_t n_trees = client.forest->size();
  if (quota > n_trees) throw std::invalid_argument("respond_to_quota: quota exceeds local trees");
  TreeBatch batch;
  batch.client_id = client.client_id;
  batch.event_grid = client.forest->event_grid();
  std::vector<std::size_t> picked;
  if (quota == n_trees) {
    picked.resize(n_trees);
    std::iota(picked.begin(), picked.end(), std::size_t{0});
  } else if (quota > 0) {
    client.tree_weights = evaluate_trees(client, strategy);
    Rng rng(derive_seed(client.seed, kSampleStream));
    picked = sample_trees(client.tree_weights, quota, rng);
  }
  for (auto j : picked) batch.trees.push_back(client.forest->trees()[j]);
  return batch;
}

FederationPlan plan_federation(std::vector<ClientSummary> clients, std::size_t target, std::uint64_t server_seed) {
  std::sort(clients.begin(), clients.end(),
            [](const ClientSummary& a, const ClientSummary& b) { return a.client_id < b.client_id; });
  Rng rng(server_seed);
  return assign_tree_counts(clients, target, rng);
}

FederationResult federate(std::vector<ClientState>& clients, std::size_t target, SamplingStrategy strategy,
                          std::uint64_t server_seed) {
  std::vector<ClientSummary> summaries;
  std::vector<std::uint32_t> excluded;
  for (const auto& c : clients) {
    if (c.forest) summaries.push_back({c.client_id, c.n_samples(), c.n_trees()});
    else excluded.push_back(c.client_id);
  }
  if (summaries.empty()) throw std::runtime_error("federate: no client has a trained model");
  auto plan = plan_federation(summaries, target, server_seed);
  std::vector<TreeBatch> batches;
  for (auto& c : clients) {
    if (!c.forest) continue;
    if (const auto quota = plan.quota_for(c.client_id)) batches.push_back(respond_to_quota(c, *quota, strategy));
  }
  return {merge_ensemble(std::move(batches)), std::move(plan), std::move(excluded)};
}

FederationResult run_fedsurf(std::vector<ClientState>& clients, const RsfParams& params, std::size_t target,
                             SamplingStrategy strategy, std::uint64_t server_seed) {
  for (auto& c : clients) {
    try {
      local_train(c, params);
    } catch (const std::exception& e) {
      spdlog::warn("client {} excluded: {}", c.client_id, e.what());
      c.forest.reset();
    }
  }
  return federate(clients, target, strategy, server_seed);
}

}  // namespace fedsurf
