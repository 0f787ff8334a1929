#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fedsurf/random.hpp"
#include "fedsurf/rsf.hpp"
#include "fedsurf/survival.hpp"

namespace fedsurf {

enum class SamplingStrategy { Uniform, Concordance, ConcordanceIpcw, InverseIbs, CumulativeAuc };

inline constexpr std::array<SamplingStrategy, 5> kAllStrategies = {
    SamplingStrategy::Uniform, SamplingStrategy::Concordance, SamplingStrategy::ConcordanceIpcw,
    SamplingStrategy::InverseIbs, SamplingStrategy::CumulativeAuc};

/// "uniform", "concordance", "concordance_ipcw", "inverse_ibs", "cumulative_auc".
std::string_view to_string(SamplingStrategy s);
/// "FedSurF", "FedSurF-C", "FedSurF-C-IPCW", "FedSurF-IBS", "FedSurF-AUC".
std::string_view display_name(SamplingStrategy s);
/// Accepts either spelling, case-insensitive. Throws std::invalid_argument.
SamplingStrategy parse_strategy(std::string_view name);

// Streams for derive_seed(client seed, stream).
inline constexpr std::uint64_t kTrainStream = 1;
inline constexpr std::uint64_t kSampleStream = 2;
inline constexpr std::uint64_t kValidationStream = 3;

struct ClientState {
  std::uint32_t client_id = 0;
  std::uint64_t seed = 0;
  SurvivalDataset train;
  SurvivalDataset validation;
  std::optional<SurvivalForest> forest;
  std::vector<double> tree_weights;

  /// N_k: all local records, training and validation.
  [[nodiscard]] std::size_t n_samples() const { return train.size() + validation.size(); }
  [[nodiscard]] std::size_t n_trees() const { return forest ? forest->size() : 0; }
};

/// Splits `local` into train/validation with the client's validation stream.
ClientState make_client(std::uint32_t client_id, const SurvivalDataset& local, double validation_fraction,
                        std::uint64_t seed);

/// Fits the local forest on the training partition with seed
/// derive_seed(client.seed, kTrainStream).
void local_train(ClientState& client, const RsfParams& params);

/// One weight per local tree, each tree scored alone (as a one-tree forest on
/// the local grid) on the validation partition. The IPCW censoring curve is
/// the Kaplan-Meier of all local data. Trees whose metric is undefined take
/// the smallest defined weight; if none is defined every weight is 1.
std::vector<double> evaluate_trees(const ClientState& client, SamplingStrategy strategy);

struct ClientSummary {
  std::uint32_t client_id = 0;
  std::size_t n_samples = 0;  // N_k
  std::size_t n_trees = 0;    // T_k

  friend bool operator==(const ClientSummary&, const ClientSummary&) = default;
};

struct FederationPlan {
  std::vector<ClientSummary> clients;
  std::size_t target = 0;            // T
  std::vector<std::size_t> quotas;   // T'_k, aligned with clients

  [[nodiscard]] std::size_t total() const;
  [[nodiscard]] std::optional<std::size_t> quota_for(std::uint32_t client_id) const;
};

/// min(T, sum T_k) rounds; each round picks an unsaturated client with
/// probability N_k / sum of N over unsaturated clients. Clients are taken
/// in the order given.
FederationPlan assign_tree_counts(const std::vector<ClientSummary>& clients, std::size_t target, Rng& rng);

/// `quota` distinct indices drawn one at a time with probability
/// proportional to the remaining weights, returned ascending. All-zero
/// remaining weight falls back to uniform over the remaining indices.
/// Throws on negative or non-finite weights or quota > size.
std::vector<std::size_t> sample_trees(const std::vector<double>& weights, std::size_t quota, Rng& rng);

struct TreeBatch {
  std::uint32_t client_id = 0;
  std::vector<SurvivalTree> trees;
  std::vector<double> event_grid;
};

/// Trees concatenated by ascending client id; grid = sorted union.
SurvivalForest merge_ensemble(std::vector<TreeBatch> batches);

/// Client reply to a quota: weights for `strategy`, then the sampled trees
/// drawn with derive_seed(client.seed, kSampleStream).
TreeBatch respond_to_quota(ClientState& client, std::size_t quota, SamplingStrategy strategy);

/// Plan over the clients sorted by id, Rng seeded with server_seed.
FederationPlan plan_federation(std::vector<ClientSummary> clients, std::size_t target, std::uint64_t server_seed);

struct FederationResult {
  SurvivalForest model;
  FederationPlan plan;
  std::vector<std::uint32_t> excluded;  // clients whose local training failed
};

/// Planning, sampling and merge over clients whose forests are already
/// trained; untrained clients are skipped and listed as excluded.
FederationResult federate(std::vector<ClientState>& clients, std::size_t target, SamplingStrategy strategy,
                          std::uint64_t server_seed);

/// Whole algorithm in one process: local training, planning, sampling and
/// merge. Clients that fail to train are excluded.
FederationResult run_fedsurf(std::vector<ClientState>& clients, const RsfParams& params, std::size_t target,
                             SamplingStrategy strategy, std::uint64_t server_seed);

}  // namespace fedsurf
