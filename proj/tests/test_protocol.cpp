#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "doctest.h"
#include "fedsurf/datasplit.hpp"
#include "fedsurf/metrics.hpp"
#include "fedsurf/protocol.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace fedsurf;
using fedsurf::testing::make_data;

namespace {

SurvivalTree leaf_tree(StepCurve chf) { return SurvivalTree({LeafNode{std::move(chf), 1}}, 1, 0); }

SurvivalTree stump(double thr, StepCurve left, StepCurve right) {
  return SurvivalTree({SplitNode{0, thr, 1, 2}, LeafNode{std::move(left), 1}, LeafNode{std::move(right), 1}}, 1, 0);
}

std::vector<ClientState> synth_clients(std::size_t k, std::uint64_t seed, std::size_t n = 300) {
  Rng rng(seed);
  const auto data = synth_survival(n, 4, 0.3, rng);
  SplitConfig cfg;
  cfg.n_clients = k;
  std::vector<ClientState> out;
  const auto parts = label_skew_split(data, cfg, rng);
  for (std::size_t c = 0; c < parts.size(); ++c) {
    out.push_back(make_client(static_cast<std::uint32_t>(c), parts[c], 0.3, derive_seed(seed, c)));
  }
  return out;
}

}  // namespace

TEST_CASE("strategy names") {
  for (auto s : kAllStrategies) {
    CHECK(parse_strategy(to_string(s)) == s);
    CHECK(parse_strategy(display_name(s)) == s);
  }
  CHECK(parse_strategy("FEDSURF-c-ipcw") == SamplingStrategy::ConcordanceIpcw);
  CHECK(display_name(SamplingStrategy::Uniform) == "FedSurF");
  CHECK_THROWS_AS(parse_strategy("brier"), std::invalid_argument);
}

TEST_CASE("local training") {
  auto clients = synth_clients(3, 1);
  RsfParams params;
  params.n_trees = 7;
  local_train(clients[0], params);
  CHECK(clients[0].n_trees() == 7);
  auto again = synth_clients(3, 1);
  local_train(again[0], params);
  CHECK(again[0].forest == clients[0].forest);

  ClientState empty;
  empty.train = make_data({1, 2}, {0, 0});
  CHECK_THROWS(local_train(empty, params));
}

TEST_CASE("per-tree weights") {
  const StepCurve high({0.5}, {2.0}, 0.0);
  const StepCurve low({0.5}, {0.5}, 0.0);

  SUBCASE("uniform is all ones") {
    auto c = synth_clients(1, 2)[0];
    RsfParams params;
    params.n_trees = 5;
    local_train(c, params);
    CHECK(evaluate_trees(c, SamplingStrategy::Uniform) == std::vector<double>(5, 1.0));
  }
  SUBCASE("perfectly ranking single tree scores 1") {
    ClientState c;
    c.train = make_data({1, 2, 3}, {1, 1, 1}, {{0}, {1}, {2}});
    c.validation = make_data({1, 2}, {1, 1}, {{0}, {1}});
    c.forest = SurvivalForest({stump(0.5, high, low)}, {0.5}, RsfParams{});
    CHECK(evaluate_trees(c, SamplingStrategy::Concordance) == std::vector<double>{1.0});
  }
  SUBCASE("inverse IBS is the reciprocal") {
    ClientState c;
    c.train = make_data({1, 2, 3, 4, 5, 6}, {1, 1, 1, 1, 1, 1}, {{0}, {1}, {2}, {3}, {4}, {5}});
    c.validation = make_data({1.5, 2.5, 3.5, 4.5, 5.5}, {1, 1, 1, 1, 1}, {{0}, {1}, {2}, {3}, {4}});
    const StepCurve half({0.5}, {std::log(2.0)}, 0.0);
    const StepCurve quarter({0.5}, {std::log(4.0)}, 0.0);
    c.forest = SurvivalForest({leaf_tree(half), leaf_tree(quarter)}, {0.5}, RsfParams{});
    const auto w = evaluate_trees(c, SamplingStrategy::InverseIbs);
    const auto grid = default_grid(c.validation);
    const auto all = make_data({1, 2, 3, 4, 5, 6, 1.5, 2.5, 3.5, 4.5, 5.5}, std::vector<int>(11, 1));
    for (std::size_t j = 0; j < 2; ++j) {
      const double s = j == 0 ? 0.5 : 0.25;
      std::vector<std::vector<double>> surv(grid.times.size(), std::vector<double>(5, s));
      CHECK(w[j] == doctest::Approx(1.0 / oracle::ibs(surv, c.validation, all, grid.times)).epsilon(1e-12));
    }
  }
  SUBCASE("reciprocal arithmetic") {
    // constant S = 0.5 on uncensored data has Brier 0.25 everywhere -> weight 4
    ClientState c;
    c.train = make_data({1, 2, 3, 4}, {1, 1, 1, 1});
    c.validation = make_data({1, 2, 3, 4}, {1, 1, 1, 1});
    c.forest = SurvivalForest({leaf_tree(StepCurve({0.5}, {std::log(2.0)}, 0.0))}, {0.5}, RsfParams{});
    CHECK(evaluate_trees(c, SamplingStrategy::InverseIbs)[0] == doctest::Approx(4.0).epsilon(1e-12));
  }
  SUBCASE("perfect IBS gets ten times the largest weight") {
    ClientState c;
    c.train = make_data({1, 2, 3, 4}, {1, 1, 1, 1}, {{0}, {1}, {2}, {3}});
    c.validation = make_data({1, 2, 3, 4}, {1, 1, 1, 1}, {{0}, {1}, {2}, {3}});
    // exact step predictor: S jumps from 1 to 0 at each record's own time
    std::vector<TreeNode> nodes{SplitNode{0, 1.5, 1, 2}, SplitNode{0, 0.5, 3, 4}, SplitNode{0, 2.5, 5, 6}};
    const double inf_h = 800.0;
    for (double t : {1.0, 2.0, 3.0, 4.0}) nodes.push_back(LeafNode{StepCurve({t}, {inf_h}, 0.0), 1});
    SurvivalTree exact(std::move(nodes), 1, 0);
    c.forest = SurvivalForest({exact, leaf_tree(StepCurve({0.5}, {std::log(2.0)}, 0.0))}, {0.5, 1, 2, 3, 4},
                              RsfParams{});
    const auto w = evaluate_trees(c, SamplingStrategy::InverseIbs);
    CHECK(w[1] == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(w[0] == doctest::Approx(40.0).epsilon(1e-12));
  }
  SUBCASE("undefined rank metrics fall back to uniform") {
    ClientState c;
    c.train = make_data({1, 2, 3}, {1, 1, 1});
    c.validation = make_data({1, 2}, {0, 0});
    c.forest = SurvivalForest({leaf_tree(high), leaf_tree(low)}, {0.5}, RsfParams{});
    // no events in validation: no comparable pairs and no AUC cases
    for (auto s : {SamplingStrategy::Concordance, SamplingStrategy::ConcordanceIpcw, SamplingStrategy::CumulativeAuc}) {
      CHECK(evaluate_trees(c, s) == std::vector<double>{1.0, 1.0});
    }
  }
  SUBCASE("fitted client weights are valid for every strategy") {
    auto c = synth_clients(1, 3)[0];
    RsfParams params;
    params.n_trees = 10;
    local_train(c, params);
    for (auto s : kAllStrategies) {
      const auto w = evaluate_trees(c, s);
      REQUIRE(w.size() == 10);
      for (double v : w) {
        CHECK(std::isfinite(v));
        CHECK(v >= 0.0);
      }
    }
  }
}

TEST_CASE("tree quota assignment") {
  SUBCASE("single client") {
    Rng rng(1);
    const auto plan = assign_tree_counts({{0, 100, 50}}, 10, rng);
    CHECK(plan.quotas == std::vector<std::size_t>{10});
  }
  SUBCASE("symmetric clients split evenly on average") {
    Rng rng(2);
    double sum = 0;
    for (int run = 0; run < 10000; ++run) {
      const auto plan = assign_tree_counts({{0, 100, 50}, {1, 100, 50}}, 10, rng);
      CHECK(plan.total() == 10);
      sum += static_cast<double>(plan.quotas[0]);
    }
    CHECK(std::abs(sum / 10000 - 5.0) <= 0.15);
  }
  SUBCASE("saturation hands the rest to the other client") {
    Rng rng(3);
    for (int run = 0; run < 100; ++run) {
      const auto plan = assign_tree_counts({{0, 1000, 3}, {1, 1, 100}}, 10, rng);
      CHECK(plan.quotas == std::vector<std::size_t>{3, 7});
    }
  }
  SUBCASE("conservation and bounds") {
    Rng rng(4);
    for (int run = 0; run < 500; ++run) {
      std::vector<ClientSummary> clients;
      std::size_t available = 0;
      const std::size_t k = 1 + rng.below(8);
      for (std::size_t c = 0; c < k; ++c) {
        clients.push_back({static_cast<std::uint32_t>(c), rng.below(200), rng.below(30)});
        available += clients.back().n_trees;
      }
      const std::size_t target = 1 + rng.below(120);
      const auto plan = assign_tree_counts(clients, target, rng);
      CHECK(plan.total() == std::min(target, available));
      for (std::size_t c = 0; c < k; ++c) CHECK(plan.quotas[c] <= clients[c].n_trees);
    }
  }
  SUBCASE("larger T never lowers expected quotas") {
    const std::vector<ClientSummary> clients{{0, 500, 20}, {1, 100, 40}, {2, 50, 40}};
    std::vector<double> prev(3, 0.0);
    for (std::size_t target : {10, 20, 40, 60, 100}) {
      Rng rng(target);
      std::vector<double> mean(3, 0.0);
      for (int run = 0; run < 4000; ++run) {
        const auto plan = assign_tree_counts(clients, target, rng);
        for (std::size_t c = 0; c < 3; ++c) mean[c] += static_cast<double>(plan.quotas[c]) / 4000;
      }
      for (std::size_t c = 0; c < 3; ++c) CHECK(mean[c] >= prev[c] - 0.1);
      prev = mean;
    }
  }
  SUBCASE("errors") {
    Rng rng(5);
    CHECK_THROWS_AS(assign_tree_counts({}, 10, rng), std::invalid_argument);
    CHECK_THROWS_AS(assign_tree_counts({{0, 1, 1}}, 0, rng), std::invalid_argument);
  }
}

TEST_CASE("weighted tree sampling") {
  SUBCASE("degenerate mass") {
    Rng rng(1);
    for (int run = 0; run < 100; ++run) CHECK(sample_trees({0, 0, 5}, 1, rng) == std::vector<std::size_t>{2});
  }
  SUBCASE("full quota returns everything") {
    Rng rng(2);
    CHECK(sample_trees({3, 0, 1, 0}, 4, rng) == std::vector<std::size_t>{0, 1, 2, 3});
  }
  SUBCASE("symmetric weights give equal inclusion") {
    Rng rng(3);
    std::vector<double> hits(4, 0.0);
    for (int run = 0; run < 40000; ++run)
      for (auto j : sample_trees({1, 1, 1, 1}, 2, rng)) hits[j] += 1;
    for (double h : hits) CHECK(std::abs(h / 40000 - 0.5) <= 0.02);
  }
  SUBCASE("all zero falls back to uniform") {
    Rng rng(4);
    std::vector<double> hits(3, 0.0);
    for (int run = 0; run < 6000; ++run) hits[sample_trees({0, 0, 0}, 1, rng)[0]] += 1;
    for (double h : hits) CHECK(std::abs(h / 6000 - 1.0 / 3) <= 0.03);
  }
  SUBCASE("positive rescaling does not change the draw") {
    Rng gen(5);
    for (int run = 0; run < 200; ++run) {
      std::vector<double> w(2 + gen.below(10));
      for (auto& v : w) v = gen.uniform() < 0.2 ? 0.0 : gen.uniform();
      const std::size_t quota = gen.below(w.size() + 1);
      for (double c : {0.25, 2.0, 1024.0}) {
        std::vector<double> scaled;
        for (double v : w) scaled.push_back(c * v);
        Rng a(run), b(run);
        CHECK(sample_trees(w, quota, a) == sample_trees(scaled, quota, b));
      }
    }
  }
  SUBCASE("zero weights never drawn while positive weight remains") {
    Rng rng(6);
    for (int run = 0; run < 2000; ++run) {
      std::vector<double> w(1 + rng.below(12));
      std::size_t positive = 0;
      for (auto& v : w) {
        v = rng.uniform() < 0.4 ? 0.0 : rng.uniform();
        positive += v > 0 ? 1 : 0;
      }
      const std::size_t quota = rng.below(w.size() + 1);
      const auto picked = sample_trees(w, quota, rng);
      CHECK(picked.size() == quota);
      CHECK(std::set<std::size_t>(picked.begin(), picked.end()).size() == quota);
      std::size_t zero_picked = 0;
      for (auto j : picked) zero_picked += w[j] == 0.0 ? 1 : 0;
      CHECK(zero_picked == (quota > positive ? quota - positive : 0));
    }
  }
  SUBCASE("errors") {
    Rng rng(7);
    CHECK_THROWS_AS(sample_trees({1, -1}, 1, rng), std::invalid_argument);
    CHECK_THROWS_AS(sample_trees({1, 1}, 3, rng), std::invalid_argument);
  }
}

TEST_CASE("ensemble merge") {
  const StepCurve h1({1.0}, {1.0}, 0.0);
  const StepCurve h2({3.0}, {3.0}, 0.0);
  SUBCASE("grid union and client order") {
    std::vector<TreeBatch> batches{{7, {leaf_tree(h2)}, {2, 3}}, {2, {leaf_tree(h1)}, {1, 3}}};
    const auto forest = merge_ensemble(batches);
    CHECK(forest.event_grid() == std::vector<double>{1, 2, 3});
    CHECK(forest.trees()[0] == leaf_tree(h1));
    CHECK(forest.trees()[1] == leaf_tree(h2));
    const auto h = forest.predict_chf(std::vector<double>{0.0});
    CHECK(h.values() == std::vector<double>{0.5, 0.5, 2.0});
  }
  SUBCASE("single client equals its sub-forest") {
    Rng rng(1);
    const auto data = synth_survival(100, 2, 0.2, rng);
    RsfParams params;
    params.n_trees = 6;
    const auto local = fit_forest(data, params);
    const std::vector<std::size_t> pick{1, 4};
    const auto sub = local.subset(pick);
    const auto merged = merge_ensemble({{0, sub.trees(), local.event_grid()}});
    CHECK(merged.risk_scores(data) == sub.risk_scores(data));
  }
  SUBCASE("dimension mismatch and empty input") {
    SurvivalTree two_d({LeafNode{h1, 1}}, 2, 0);
    CHECK_THROWS_AS(merge_ensemble({{0, {leaf_tree(h1)}, {1}}, {1, {two_d}, {1}}}), std::invalid_argument);
    CHECK_THROWS_AS(merge_ensemble({{0, {}, {1}}}), std::invalid_argument);
  }
}

TEST_CASE("whole-algorithm run") {
  RsfParams params;
  params.n_trees = 8;
  params.max_depth = 3;
  SUBCASE("one client degenerates to a sub-sampled local forest") {
    auto clients = synth_clients(1, 4);
    const auto result = run_fedsurf(clients, params, 5, SamplingStrategy::Concordance, 11);
    CHECK(result.model.size() == 5);
    for (const auto& t : result.model.trees()) {
      const auto& local = clients[0].forest->trees();
      CHECK(std::find(local.begin(), local.end(), t) != local.end());
    }
  }
  SUBCASE("ensemble size and determinism") {
    for (std::size_t target : {4, 20, 100}) {
      auto a = synth_clients(4, 5);
      auto b = synth_clients(4, 5);
      const auto ra = run_fedsurf(a, params, target, SamplingStrategy::CumulativeAuc, 3);
      const auto rb = run_fedsurf(b, params, target, SamplingStrategy::CumulativeAuc, 3);
      CHECK(ra.model.size() == std::min<std::size_t>(target, 32));
      CHECK(ra.model == rb.model);
    }
  }
  SUBCASE("a client that cannot train is excluded") {
    auto clients = synth_clients(3, 6);
    ClientState broken;
    broken.client_id = 9;
    broken.train = make_data({1, 2, 3}, {0, 0, 0}, {{0, 0, 0, 0}, {0, 0, 0, 0}, {0, 0, 0, 0}});
    clients.push_back(broken);
    const auto result = run_fedsurf(clients, params, 10, SamplingStrategy::Uniform, 1);
    CHECK(result.excluded == std::vector<std::uint32_t>{9});
    CHECK(result.plan.clients.size() == 3);
    CHECK(result.model.size() == 10);
  }
}
