#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "fedsurf/harness.hpp"
#include "fedsurf/serialize.hpp"

using namespace fedsurf;
namespace fs = std::filesystem;

namespace {

fs::path data_dir() { return fs::path(FEDSURF_DATA_DIR); }

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "fedsurf_harness_test";
  fs::create_directories(dir);
  return dir / name;
}

fs::path write_text(const std::string& name, const std::string& text) {
  const auto p = scratch(name);
  std::ofstream(p, std::ios::binary) << text;
  return p;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

ExperimentConfig synth_config(std::size_t reps = 3) {
  ExperimentConfig c;
  c.dataset.name = "synth";
  c.dataset.synth = SynthSpec{400, 6, 0.3};
  c.split.n_clients = 4;
  c.rsf.n_trees = 10;
  c.rsf.max_depth = 3;
  c.repetitions = reps;
  c.seed = 5;
  c.threads = 1;
  return c;
}

std::string record_key(const SurvivalRecord& r) {
  std::string k = format_double(r.time) + (r.event ? "e" : "c");
  for (double x : r.features) k += "," + format_double(x);
  return k;
}

}  // namespace

TEST_CASE("csv fixture") {
  const auto p = write_text("fixture.csv",
                            "grade,age,time,event,note\n"
                            "II,50,10,1,\"a, b\"\n"
                            "I,61.5,3.5,0,x\n"
                            "II,40,7,1,\"say \"\"hi\"\"\"\n");
  CsvSchema s;
  s.features = {"grade", "age"};
  const auto d = load_csv(p, s);
  CHECK(d.size() == 3);
  CHECK(d.feature_names() == std::vector<std::string>{"grade=I", "grade=II", "age"});
  CHECK(d.records()[0].features == std::vector<double>{0, 1, 50});
  CHECK(d.records()[1].features == std::vector<double>{1, 0, 61.5});
  CHECK(d.records()[1].time == 3.5);
  CHECK_FALSE(d.records()[1].event);

  // all other columns, note is categorical
  CsvSchema all;
  CHECK(load_csv(p, all).n_features() == 3 + 3);

  CsvSchema forced;
  forced.features = {"age"};
  forced.categorical = {"age"};
  CHECK(load_csv(p, forced).feature_names() == std::vector<std::string>{"age=40", "age=50", "age=61.5"});
}

TEST_CASE("csv validation names row and column") {
  auto error_of = [](const std::string& text) -> std::string {
    const auto p = write_text("bad.csv", text);
    try {
      load_csv(p, CsvSchema{});
    } catch (const std::runtime_error& e) {
      return e.what();
    }
    return "";
  };
  auto msg = error_of("x,time,event\n1,2,1\n2,3,2\n");
  CHECK(msg.find("row 3") != std::string::npos);
  CHECK(msg.find("'event'") != std::string::npos);
  msg = error_of("x,time,event\n1,2,1\nNA,3,1\n");
  CHECK(msg.find("row 3") != std::string::npos);
  CHECK(msg.find("'x'") != std::string::npos);
  CHECK(error_of("x,time,event\n1,0,1\n").find("'time'") != std::string::npos);
  CHECK(error_of("x,time,event\n1,-2,1\n").find("'time'") != std::string::npos);
  CHECK(error_of("x,time\n1,2\n").find("missing column 'event'") != std::string::npos);
  CHECK(error_of("x,time,event\n1,2\n").find("row 2") != std::string::npos);
  CHECK_THROWS(load_csv(scratch("absent.csv"), CsvSchema{}));
}

TEST_CASE("csv write and read back") {
  Rng rng(3);
  const auto d = synth_survival(50, 3, 0.3, rng);
  const auto p = scratch("roundtrip.csv");
  write_csv(p, d, "t", "status");
  CsvSchema s;
  s.time_column = "t";
  s.event_column = "status";
  const auto back = load_csv(p, s);
  CHECK(back.feature_names() == d.feature_names());
  CHECK(back.records() == d.records());
}

TEST_CASE("bundled datasets") {
  const auto gbsg = load_csv(data_dir() / "gbsg2.csv", *csv_preset("gbsg2"));
  CHECK(gbsg.size() == 686);
  CHECK(gbsg.n_events() == 299);
  // horTh, menostat and tgrade one-hot
  CHECK(gbsg.n_features() == 2 + 1 + 2 + 1 + 3 + 1 + 1 + 1);
  const double event_fraction = static_cast<double>(gbsg.n_events()) / 686.0;
  CHECK(event_fraction == doctest::Approx(0.44).epsilon(0.01 / 0.44));

  const auto whas = load_csv(data_dir() / "whas500.csv", *csv_preset("whas500"));
  CHECK(whas.size() == 500);
  CHECK(whas.n_features() == 14);
}

TEST_CASE("rsf presets") {
  CHECK(rsf_preset("GBSG2")->n_trees == 700);
  CHECK(rsf_preset("gbsg2")->max_depth == std::optional<std::size_t>(1));
  CHECK(rsf_preset("whas500")->n_trees == 400);
  CHECK_FALSE(rsf_preset("flchain")->max_depth.has_value());
  CHECK(rsf_preset("metabric")->min_samples_split == 6);
  CHECK(rsf_preset("metabric")->min_samples_leaf == 3);
  CHECK_FALSE(rsf_preset("unknown"));
}

TEST_CASE("config parsing") {
  using nlohmann::json;
  const json j = json::parse(R"({
    "dataset": {"name": "gbsg2", "path": "gbsg2.csv"},
    "split": {"clients": 5, "alpha": "inf"},
    "strategies": ["uniform", "FedSurF-C"],
    "repetitions": 4, "seed": 9, "threads": 2
  })");
  const auto c = parse_config(j, data_dir());
  CHECK(c.dataset.path == data_dir() / "gbsg2.csv");
  CHECK(c.dataset.schema.event_column == "cens");
  CHECK(c.rsf.n_trees == 700);
  CHECK(c.target() == 700);
  CHECK(std::isinf(c.split.alpha));
  CHECK(c.split.n_clients == 5);
  CHECK(c.strategies == std::vector<SamplingStrategy>{SamplingStrategy::Uniform, SamplingStrategy::Concordance});
  CHECK(c.metrics.size() == 3);
  CHECK(c.settings.size() == 3);

  json j2 = j;
  j2["threads"] = 7;
  CHECK(config_hash(parse_config(j2, data_dir())) == config_hash(c));
  j2["seed"] = 10;
  CHECK(config_hash(parse_config(j2, data_dir())) != config_hash(c));

  json j3 = j;
  j3["rsf"] = {{"preset", "flchain"}, {"n_trees", 50}};
  j3["split"]["alpha"] = 5;
  const auto c3 = parse_config(j3, data_dir());
  CHECK(c3.rsf.n_trees == 50);
  CHECK_FALSE(c3.rsf.max_depth);
  CHECK(c3.split.alpha == 5.0);

  json bad = j;
  bad["repetitons"] = 3;
  CHECK_THROWS_AS(parse_config(bad, data_dir()), std::invalid_argument);
  bad = j;
  bad["repetitions"] = 0;
  CHECK_THROWS_AS(parse_config(bad, data_dir()), std::invalid_argument);
  bad = j;
  bad["strategies"] = json::array({"brier"});
  CHECK_THROWS_AS(parse_config(bad, data_dir()), std::invalid_argument);
  bad = j;
  bad["dataset"].erase("path");
  CHECK_THROWS_AS(parse_config(bad, data_dir()), std::invalid_argument);
}

TEST_CASE("test records never reach training or validation") {
  const auto cfg = synth_config();
  const auto data = load_dataset(cfg.dataset, cfg.seed);
  for (std::size_t r = 0; r < 3; ++r) {
    const auto rep = prepare_repetition(data, cfg, r);
    std::set<std::string> test_keys;
    for (const auto& rec : rep.test.records()) test_keys.insert(record_key(rec));
    std::size_t seen = 0;
    for (const auto& c : rep.clients) {
      for (const auto* part : {&c.train, &c.validation}) {
        for (const auto& rec : part->records()) {
          CHECK(test_keys.count(record_key(rec)) == 0);
          ++seen;
        }
      }
    }
    CHECK(seen == rep.train.size());
    CHECK(seen + rep.test.size() == data.size());
  }
}

TEST_CASE("single client with full quota keeps its whole forest") {
  auto cfg = synth_config();
  cfg.split.n_clients = 1;
  const auto data = load_dataset(cfg.dataset, cfg.seed);
  auto rep = prepare_repetition(data, cfg, 0);
  REQUIRE(rep.clients.size() == 1);
  local_train(rep.clients[0], cfg.rsf);
  const auto fed = federate(rep.clients, cfg.rsf.n_trees, SamplingStrategy::ConcordanceIpcw, 1);
  CHECK(fed.model.trees() == rep.clients[0].forest->trees());
  const auto part = federate(rep.clients, 3, SamplingStrategy::Uniform, 1);
  CHECK(part.model.size() == 3);
  for (const auto& t : part.model.trees()) {
    const auto& all = rep.clients[0].forest->trees();
    CHECK(std::any_of(all.begin(), all.end(), [&](const SurvivalTree& u) { return serialize_tree(u) == serialize_tree(t); }));
  }
}

TEST_CASE("report shape on synthetic data") {
  auto cfg = synth_config(3);
  const auto report = run_experiment(cfg);
  CHECK(report.cells.size() == 3 * 1 + 3 * 5 + 3 * 1);
  CHECK(report.failures.empty());
  CHECK(report.seeds.size() == 3);
  for (const auto& c : report.cells) {
    CHECK(c.values.size() == 3);
    CHECK(c.mean >= 0.0);
    CHECK(c.mean <= 1.0);
    CHECK(c.strategy.has_value() == (c.setting == Setting::Federated));
    CHECK(c.significant_vs_concordance.has_value() == (c.setting == Setting::Federated));
  }
  CHECK_FALSE(*report.find(Setting::Federated, SamplingStrategy::Concordance, MetricId::Ibs)->significant_vs_concordance);

  // flags agree with a direct Dunn test on the raw values
  for (auto m : cfg.metrics) {
    std::vector<std::vector<double>> groups;
    for (auto s : cfg.strategies) groups.push_back(report.find(Setting::Federated, s, m)->values);
    const auto t = dunn_test(groups, 0.05);
    for (std::size_t i = 0; i < cfg.strategies.size(); ++i) {
      CHECK(*report.find(Setting::Federated, cfg.strategies[i], m)->significant_vs_concordance ==
            t.pairwise->significant[i][1]);
    }
  }
}

TEST_CASE("reports are byte-identical across thread counts") {
  auto serial = synth_config(4);
  auto parallel = serial;
  parallel.threads = 4;
  const auto a = run_experiment(serial);
  const auto b = run_experiment(parallel);
  CHECK(report_csv(a) == report_csv(b));
  CHECK(report_summary(a).dump() == report_summary(b).dump());

  const auto da = scratch("out_a");
  const auto db = scratch("out_b");
  emit_report(a, da);
  emit_report(b, db);
  CHECK(read_text(da / "report.csv") == read_text(db / "report.csv"));
  CHECK(read_text(da / "summary.json") == read_text(db / "summary.json"));
  CHECK(fs::exists(da / "timing.json"));
}

TEST_CASE("report files parse back") {
  auto cfg = synth_config(2);
  cfg.strategies = {SamplingStrategy::Uniform, SamplingStrategy::InverseIbs};
  cfg.settings = {Setting::Federated, Setting::Local};
  const auto report = run_experiment(cfg);
  const auto dir = scratch("out_parse");
  emit_report(report, dir);

  std::istringstream csv(read_text(dir / "report.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "dataset,setting,strategy,metric,mean,std,n_runs,significant_vs_concordance");
  std::size_t i = 0;
  while (std::getline(csv, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string x; std::getline(ls, x, ',');) f.push_back(x);
    REQUIRE(f.size() == 8);
    REQUIRE(i < report.cells.size());
    const auto& c = report.cells[i++];
    CHECK(f[0] == "synth");
    CHECK(f[1] == to_string(c.setting));
    CHECK(parse_metric(f[3]) == c.metric);
    CHECK(parse_double(f[4]) == c.mean);
    CHECK(parse_double(f[5]) == c.std);
    CHECK(std::stoul(f[6]) == c.values.size());
    CHECK(f[7] == "NA");  // no concordance strategy in this run
  }
  CHECK(i == report.cells.size());

  const auto summary = nlohmann::json::parse(read_text(dir / "summary.json"));
  CHECK(summary["config_hash"] == config_hash(cfg));
  CHECK(summary["cells"].size() == report.cells.size());
  CHECK(summary["cells"][0]["values"].get<std::vector<double>>() == report.cells[0].values);
  CHECK(summary["repetitions"].size() == 2);
  CHECK(summary["dunn"].contains("ibs"));
}

TEST_CASE("too many failed repetitions abort the experiment") {
  auto cfg = synth_config(2);
  cfg.dataset.synth = SynthSpec{12, 2, 0.95};
  CHECK_THROWS_AS(run_experiment(cfg), std::runtime_error);
}
