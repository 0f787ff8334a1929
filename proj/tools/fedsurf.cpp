#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <regex>
#include <sstream>

#include "fedsurf/harness.hpp"
#include "fedsurf/serialize.hpp"
#include "fedsurf/transport.hpp"

using namespace fedsurf;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json(const fs::path& p) {
  try {
    return json::parse(read_file(p), nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(p.string() + ": " + e.what());
  }
}

CsvSchema schema_for(const fs::path& data, const std::string& time_col, const std::string& event_col) {
  CsvSchema s = csv_preset(data.stem().string()).value_or(CsvSchema{});
  if (!time_col.empty()) s.time_column = time_col;
  if (!event_col.empty()) s.event_column = event_col;
  return s;
}

double parse_alpha_arg(const std::string& a) {
  if (a == "inf" || a == "Infinity" || a == "infinity") return kInfiniteAlpha;
  return parse_double(a);
}

int cmd_run(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed,
            std::optional<std::size_t> threads) {
  ExperimentConfig cfg = load_config(config_path);
  if (seed) cfg.seed = *seed;
  if (threads) cfg.threads = *threads;
  const auto report = run_experiment(cfg);
  emit_report(report, out);
  std::cout << report_csv(report);
  spdlog::info("{} repetitions in {:.1f} s; report in {}", report.repetitions.size(), report.wall_seconds, out);
  return report.failures.empty() ? 0 : 1;
}

int cmd_split(const std::string& data_path, std::size_t k, const std::string& alpha, const std::string& out,
              std::uint64_t seed, double test_fraction, const std::string& time_col, const std::string& event_col) {
  const CsvSchema schema = schema_for(data_path, time_col, event_col);
  const SurvivalDataset data = load_csv(data_path, schema);
  Rng rng(seed);
  auto parts = train_test_split(data, test_fraction, rng);
  SplitConfig sc;
  sc.n_clients = k;
  sc.alpha = parse_alpha_arg(alpha);
  sc.seed = seed;
  const auto clients = label_skew_split(parts.first, sc, rng);
  fs::create_directories(out);
  write_csv(fs::path(out) / "train.csv", parts.first, schema.time_column, schema.event_column);
  write_csv(fs::path(out) / "test.csv", parts.second, schema.time_column, schema.event_column);
  for (std::size_t c = 0; c < clients.size(); ++c) {
    write_csv(fs::path(out) / ("client_" + std::to_string(c) + ".csv"), clients[c], schema.time_column,
              schema.event_column);
    std::cout << "client_" << c << ".csv " << clients[c].size() << " records, " << clients[c].n_events()
              << " events\n";
  }
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data_path, const std::string& censoring_path,
             const std::string& time_col, const std::string& event_col) {
  const SurvivalForest model = deserialize_forest(read_file(model_path));
  const SurvivalDataset data = load_csv(data_path, schema_for(data_path, time_col, event_col));
  const SurvivalDataset pool =
      censoring_path.empty() ? data : load_csv(censoring_path, schema_for(censoring_path, time_col, event_col));
  const Evaluation e = evaluate_model(model, data, pool);
  json j{{"c_ipcw", e.c_ipcw}, {"ibs", e.ibs}, {"cumulative_auc", e.cumulative_auc},
         {"n_trees", model.size()},  {"n_records", data.size()}, {"digest", forest_digest(model)}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_serve(const std::string& bind, std::size_t k, std::size_t t, const std::string& strategy, std::uint64_t seed,
              double timeout_s, const std::string& out) {
  ServerConfig cfg;
  cfg.expected_clients = k;
  cfg.target = t;
  cfg.strategy = parse_strategy(strategy);
  cfg.seed = seed;
  cfg.timeout = std::chrono::milliseconds(static_cast<long long>(timeout_s * 1000));
  const auto outcome = run_server(bind, cfg);
  if (!out.empty()) {
    std::ofstream f(out, std::ios::binary);
    f << serialize_forest(outcome.model);
    if (!f) throw std::runtime_error("cannot write " + out);
  }
  json log = json::array();
  for (const auto& c : outcome.log.clients) {
    json counts;
    for (auto kind : {MessageKind::Hello, MessageKind::Quota, MessageKind::TreeUpload, MessageKind::Complete,
                      MessageKind::Error}) {
      counts[std::string(to_string(kind))] = {{"sent", c.counts.sent_of(kind)}, {"received", c.counts.received_of(kind)}};
    }
    log.push_back({{"client_id", c.client_id}, {"quota", outcome.plan.quota_for(c.client_id).value_or(0)},
                   {"messages", counts}});
  }
  json excluded = json::array();
  for (const auto& e : outcome.excluded)
    excluded.push_back({{"client_id", e.client_id ? json(*e.client_id) : json(nullptr)}, {"reason", e.reason}});
  std::cout << json{{"digest", outcome.digest}, {"n_trees", outcome.model.size()}, {"clients", log},
                    {"excluded", excluded}}
                   .dump(2)
            << "\n";
  return 0;
}

int cmd_join(const std::string& server, const std::string& data_path, const std::string& config_path,
             std::uint64_t seed, std::optional<std::uint32_t> id, double timeout_s) {
  json j = read_json(config_path);
  j["dataset"].erase("synth");
  j["dataset"]["path"] = fs::absolute(data_path).string();
  const ExperimentConfig cfg = parse_config(j, fs::path(config_path).parent_path());
  if (!id) {
    static const std::regex trailing(R"((\d+)$)");
    std::smatch m;
    const std::string stem = fs::path(data_path).stem().string();
    if (!std::regex_search(stem, m, trailing)) throw std::invalid_argument("join: pass --id (no number in file name)");
    id = static_cast<std::uint32_t>(std::stoul(m[1]));
  }
  const SurvivalDataset local = load_csv(data_path, cfg.dataset.schema);
  ClientState client = make_client(*id, local, cfg.split.validation_fraction, seed);
  RsfParams params = cfg.rsf;
  params.n_threads = 0;
  const auto out = run_client(server, client, params, std::chrono::milliseconds(static_cast<long long>(timeout_s * 1000)));
  if (out.status == kClientOk) {
    std::cout << json{{"client_id", *id}, {"quota", out.quota}, {"digest", out.digest}}.dump() << "\n";
  } else {
    spdlog::error("client {} failed: {} ({})", *id, out.error_code, out.message);
    std::cerr << out.error_code << "\n";
  }
  return out.status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated random survival forests"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error, off");

  auto* run = app.add_subcommand("run", "Run an experiment from a JSON config");
  std::string config, out = "results";
  std::optional<std::uint64_t> run_seed;
  std::optional<std::size_t> threads;
  run->add_option("--config", config)->required()->check(CLI::ExistingFile);
  run->add_option("--out", out, "Report directory");
  run->add_option("--seed", run_seed);
  run->add_option("--threads", threads, "Repetitions in flight, 0 = all cores");

  auto* split = app.add_subcommand("split", "Write per-client CSVs of a label-skewed federation");
  std::string data, alpha = "inf", split_out, time_col, event_col;
  std::size_t k = 10;
  std::uint64_t seed = 0;
  double test_fraction = 0.3;
  split->add_option("--data", data)->required()->check(CLI::ExistingFile);
  split->add_option("--k", k)->required();
  split->add_option("--alpha", alpha, "Dirichlet concentration or inf");
  split->add_option("--out", split_out)->required();
  split->add_option("--seed", seed);
  split->add_option("--test-fraction", test_fraction);
  split->add_option("--time-column", time_col);
  split->add_option("--event-column", event_col);

  auto* eval = app.add_subcommand("eval", "Metrics of a serialized model on a CSV");
  std::string model, censoring;
  eval->add_option("--model", model)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data)->required()->check(CLI::ExistingFile);
  eval->add_option("--censoring-data", censoring, "CSV for the censoring curve (default: --data)");
  eval->add_option("--time-column", time_col);
  eval->add_option("--event-column", event_col);

  auto* serve = app.add_subcommand("serve", "Federation server");
  std::string bind, strategy = "uniform", model_out;
  std::size_t clients = 0, ensemble = 0;
  double timeout = 120.0;
  serve->add_option("--bind", bind)->required();
  serve->add_option("--clients", clients)->required();
  serve->add_option("--ensemble-size", ensemble)->required();
  serve->add_option("--strategy", strategy);
  serve->add_option("--seed", seed);
  serve->add_option("--timeout", timeout, "Seconds per phase");
  serve->add_option("--out", model_out, "Write the global model here");

  auto* join = app.add_subcommand("join", "Federation client");
  std::string server;
  std::optional<std::uint32_t> id;
  join->add_option("--server", server)->required();
  join->add_option("--data", data)->required()->check(CLI::ExistingFile);
  join->add_option("--config", config)->required()->check(CLI::ExistingFile);
  join->add_option("--seed", seed);
  join->add_option("--id", id, "Client id (default: trailing number of the data file name)");
  join->add_option("--timeout", timeout, "Seconds");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));
  spdlog::set_default_logger(spdlog::stderr_color_mt("fedsurf"));
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*run) return cmd_run(config, out, run_seed, threads);
    if (*split) return cmd_split(data, k, alpha, split_out, seed, test_fraction, time_col, event_col);
    if (*eval) return cmd_eval(model, data, censoring, time_col, event_col);
    if (*serve) return cmd_serve(bind, clients, ensemble, strategy, seed, timeout, model_out);
    if (*join) return cmd_join(server, data, config, seed, id, timeout);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
