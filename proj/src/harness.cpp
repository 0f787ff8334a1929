#include "fedsurf/harness.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "fedsurf/metrics.hpp"
#include "fedsurf/parallel.hpp"
#include "fedsurf/serialize.hpp"

namespace fedsurf {
namespace {

using nlohmann::json;

// Streams under the experiment seed / repetition seed.
constexpr std::uint64_t kDataStream = 0xDA7A;
constexpr std::uint64_t kTestSplitStream = 1;
constexpr std::uint64_t kFederationStream = 2;
constexpr std::uint64_t kGlobalStream = 3;
constexpr std::uint64_t kServerStream = 4;
constexpr std::uint64_t kClientStreamBase = 1000;

// ---- CSV ----

std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw std::runtime_error("line " + std::to_string(line_no) + ": unterminated quote");
  out.push_back(std::move(cur));
  return out;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

bool is_missing(const std::string& v) { return v.empty() || v == "NA" || v == "na" || v == "NaN" || v == "nan"; }

std::optional<double> to_number(const std::string& v) {
  try {
    return parse_double(v);
  } catch (const std::invalid_argument&) {
    return std::nullopt;
  }
}

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

// ---- config ----

const std::map<std::string, RsfParams>& presets() {
  static const std::map<std::string, RsfParams> table = [] {
    auto make = [](std::size_t t, std::optional<std::size_t> d) {
      RsfParams p;
      p.n_trees = t;
      p.max_depth = d;
      p.min_samples_split = 6;
      p.min_samples_leaf = 3;
      return p;
    };
    return std::map<std::string, RsfParams>{
        {"whas500", make(400, 1)}, {"gbsg2", make(700, 1)},   {"metabric", make(500, std::nullopt)},
        {"nwtco", make(600, 1)},   {"flchain", make(200, std::nullopt)},
    };
  }();
  return table;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

void check_keys(const json& j, const char* where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw std::invalid_argument(std::string(where) + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; }))
      throw std::invalid_argument(std::string(where) + ": unknown key '" + k + "'");
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw std::invalid_argument(std::string("config: bad value for '") + key + "'");
  }
}

std::size_t get_count(const json& j, const char* key, std::size_t fallback) {
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  if (!it->is_number_integer() || it->get<long long>() < 0) throw std::invalid_argument(std::string("config: '") + key + "' must be a non-negative integer");
  return it->get<std::size_t>();
}

double parse_alpha(const json& v) {
  if (v.is_null()) return kInfiniteAlpha;
  if (v.is_string()) {
    const auto s = lower(v.get<std::string>());
    if (s == "inf" || s == "infinity") return kInfiniteAlpha;
    if (auto x = to_number(s)) return *x;
    throw std::invalid_argument("config: bad alpha '" + v.get<std::string>() + "'");
  }
  if (v.is_number()) return v.get<double>();
  throw std::invalid_argument("config: bad alpha");
}

RsfParams parse_rsf(const json& j, const std::string& dataset) {
  RsfParams p = rsf_preset(dataset).value_or(RsfParams{});
  if (j.is_null()) return p;
  check_keys(j, "rsf", {"preset", "n_trees", "max_depth", "min_samples_split", "min_samples_leaf"});
  if (j.contains("preset")) {
    const auto name = j["preset"].get<std::string>();
    auto preset = rsf_preset(name);
    if (!preset) throw std::invalid_argument("config: unknown rsf preset '" + name + "'");
    p = *preset;
  }
  p.n_trees = get_count(j, "n_trees", p.n_trees);
  if (j.contains("max_depth")) {
    const auto& d = j["max_depth"];
    if (d.is_null() || (d.is_string() && (lower(d.get<std::string>()) == "inf" || lower(d.get<std::string>()) == "none")))
      p.max_depth.reset();
    else
      p.max_depth = get_count(j, "max_depth", 0);
  }
  p.min_samples_split = get_count(j, "min_samples_split", p.min_samples_split);
  p.min_samples_leaf = get_count(j, "min_samples_leaf", p.min_samples_leaf);
  return p;
}

json alpha_json(double a) { return std::isinf(a) ? json("inf") : json(a); }

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

struct RepetitionResult {
  bool ok = false;
  std::string reason;
  std::map<MetricId, double> local;
  std::map<MetricId, double> global;
  std::map<SamplingStrategy, std::map<MetricId, double>> federated;
};

bool wants(const std::vector<Setting>& s, Setting x) { return std::find(s.begin(), s.end(), x) != s.end(); }

std::map<MetricId, double> as_map(const Evaluation& e) {
  return {{MetricId::CIpcw, e.c_ipcw}, {MetricId::Ibs, e.ibs}, {MetricId::CumulativeAuc, e.cumulative_auc}};
}

RepetitionResult run_repetition(const SurvivalDataset& data, const ExperimentConfig& config, std::size_t r) {
  RepetitionResult out;
  RepetitionData rep = prepare_repetition(data, config, r);
  RsfParams params = config.rsf;
  params.n_threads = 1;

  const bool need_clients = wants(config.settings, Setting::Local) || wants(config.settings, Setting::Federated);
  if (need_clients) {
    std::size_t trained = 0;
    for (auto& c : rep.clients) {
      try {
        local_train(c, params);
        ++trained;
      } catch (const std::exception& e) {
        spdlog::warn("repetition {}: client {} cannot train: {}", r, c.client_id, e.what());
        c.forest.reset();
      }
    }
    if (trained == 0) throw std::runtime_error("no client could train a local model");
  }

  if (wants(config.settings, Setting::Local)) {
    std::map<MetricId, std::vector<double>> per_client;
    for (const auto& c : rep.clients) {
      if (!c.forest) continue;
      for (const auto& [m, v] : as_map(evaluate_model(*c.forest, rep.test, rep.train))) per_client[m].push_back(v);
    }
    for (const auto& [m, v] : per_client) out.local[m] = mean_of(v);
  }
  if (wants(config.settings, Setting::Federated)) {
    const std::uint64_t server_seed = derive_seed(rep.seed, kServerStream);
    for (auto s : config.strategies) {
      const auto fed = federate(rep.clients, config.target(), s, server_seed);
      out.federated[s] = as_map(evaluate_model(fed.model, rep.test, rep.train));
    }
  }
  if (wants(config.settings, Setting::Global)) {
    RsfParams g = params;
    g.seed = derive_seed(rep.seed, kGlobalStream);
    out.global = as_map(evaluate_model(fit_forest(rep.train, g), rep.test, rep.train));
  }
  out.ok = true;
  return out;
}

}  // namespace

// ---- CSV ----

SurvivalDataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;
  std::vector<std::string> header;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(line, line_no);
    for (auto& f : fields) f = trim(std::move(f));
    if (header.empty()) {
      header = std::move(fields);
      continue;
    }
    if (fields.size() != header.size()) {
      throw std::runtime_error(path.string() + ": row " + std::to_string(line_no) + " has " +
                               std::to_string(fields.size()) + " fields, header has " + std::to_string(header.size()));
    }
    rows.push_back(std::move(fields));
    line_numbers.push_back(line_no);
  }
  if (header.empty()) throw std::runtime_error(path.string() + ": empty file");

  auto column = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw std::runtime_error(path.string() + ": missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t time_col = column(schema.time_column);
  const std::size_t event_col = column(schema.event_column);
  std::vector<std::size_t> feature_cols;
  if (schema.features.empty()) {
    for (std::size_t c = 0; c < header.size(); ++c)
      if (c != time_col && c != event_col) feature_cols.push_back(c);
  } else {
    for (const auto& f : schema.features) feature_cols.push_back(column(f));
  }
  for (const auto& f : schema.categorical) column(f);

  auto where = [&](std::size_t row, std::size_t col) {
    return path.string() + ": row " + std::to_string(line_numbers[row]) + ", column '" + header[col] + "'";
  };

  // Missing values first, then decide categorical columns.
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (auto c : feature_cols)
      if (is_missing(rows[i][c])) throw std::runtime_error(where(i, c) + ": missing value");
  }
  struct Encoder {
    std::size_t col;
    bool categorical;
    std::vector<std::string> levels;
  };
  std::vector<Encoder> encoders;
  std::vector<std::string> names;
  for (auto c : feature_cols) {
    Encoder e{c, std::find(schema.categorical.begin(), schema.categorical.end(), header[c]) != schema.categorical.end(), {}};
    if (!e.categorical)
      e.categorical = std::any_of(rows.begin(), rows.end(), [&](const auto& row) { return !to_number(row[c]); });
    if (e.categorical) {
      std::set<std::string> levels;
      for (const auto& row : rows) levels.insert(row[c]);
      e.levels.assign(levels.begin(), levels.end());
      for (const auto& l : e.levels) names.push_back(header[c] + "=" + l);
    } else {
      names.push_back(header[c]);
    }
    encoders.push_back(std::move(e));
  }

  SurvivalDataset out(names);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    SurvivalRecord rec;
    const auto t = is_missing(row[time_col]) ? std::nullopt : to_number(row[time_col]);
    if (!t || !(*t > 0.0)) throw std::runtime_error(where(i, time_col) + ": time must be a positive number");
    const auto ev = is_missing(row[event_col]) ? std::nullopt : to_number(row[event_col]);
    if (!ev || (*ev != 0.0 && *ev != 1.0)) throw std::runtime_error(where(i, event_col) + ": event must be 0 or 1");
    rec.time = *t;
    rec.event = *ev == 1.0;
    for (const auto& e : encoders) {
      if (e.categorical) {
        for (const auto& l : e.levels) rec.features.push_back(row[e.col] == l ? 1.0 : 0.0);
      } else {
        rec.features.push_back(*to_number(row[e.col]));
      }
    }
    out.add(std::move(rec));
  }
  return out;
}

void write_csv(const std::filesystem::path& path, const SurvivalDataset& data, std::string_view time_column,
               std::string_view event_column) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& n : data.feature_names()) out << csv_field(n) << ',';
  out << csv_field(time_column) << ',' << csv_field(event_column) << '\n';
  for (const auto& r : data.records()) {
    for (double x : r.features) out << format_double(x) << ',';
    out << format_double(r.time) << ',' << (r.event ? 1 : 0) << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::optional<RsfParams> rsf_preset(std::string_view dataset) {
  const auto it = presets().find(lower(dataset));
  if (it == presets().end()) return std::nullopt;
  return it->second;
}

std::optional<CsvSchema> csv_preset(std::string_view dataset) {
  const auto name = lower(dataset);
  CsvSchema s;
  if (name == "gbsg2") {
    s.time_column = "time";
    s.event_column = "cens";
    return s;
  }
  if (name == "whas500") {
    s.time_column = "lenfol";
    s.event_column = "fstat";
    return s;
  }
  return std::nullopt;
}

// ---- names ----

std::string_view to_string(Setting s) {
  switch (s) {
    case Setting::Local: return "Local";
    case Setting::Federated: return "Federated";
    case Setting::Global: return "Global";
  }
  return "?";
}

std::string_view to_string(MetricId m) {
  switch (m) {
    case MetricId::CIpcw: return "c_ipcw";
    case MetricId::Ibs: return "ibs";
    case MetricId::CumulativeAuc: return "cumulative_auc";
  }
  return "?";
}

Setting parse_setting(std::string_view s) {
  const auto l = lower(s);
  if (l == "local") return Setting::Local;
  if (l == "federated") return Setting::Federated;
  if (l == "global") return Setting::Global;
  throw std::invalid_argument("unknown setting '" + std::string(s) + "'");
}

MetricId parse_metric(std::string_view s) {
  const auto l = lower(s);
  if (l == "c_ipcw" || l == "c-index-ipcw") return MetricId::CIpcw;
  if (l == "ibs") return MetricId::Ibs;
  if (l == "cumulative_auc" || l == "auc") return MetricId::CumulativeAuc;
  throw std::invalid_argument("unknown metric '" + std::string(s) + "'");
}

// ---- config ----

void ExperimentConfig::validate() const {
  split.validate();
  rsf.validate();
  if (repetitions < 1) throw std::invalid_argument("config: repetitions must be >= 1");
  if (metrics.empty()) throw std::invalid_argument("config: no metrics");
  if (settings.empty()) throw std::invalid_argument("config: no settings");
  if (wants(settings, Setting::Federated) && strategies.empty()) throw std::invalid_argument("config: no strategies");
  if (!dataset.synth && dataset.path.empty()) throw std::invalid_argument("config: dataset needs a path or synth spec");
  if (dataset.synth && (dataset.synth->n < 2 || dataset.synth->d < 1 || !(dataset.synth->censor_rate >= 0.0) ||
                        !(dataset.synth->censor_rate < 1.0)))
    throw std::invalid_argument("config: bad synth spec");
}

ExperimentConfig parse_config(const json& j, const std::filesystem::path& base_dir) {
  check_keys(j, "config", {"dataset", "split", "rsf", "ensemble_size", "strategies", "metrics", "settings",
                           "repetitions", "seed", "threads"});
  ExperimentConfig c;
  if (!j.contains("dataset")) throw std::invalid_argument("config: missing 'dataset'");
  const auto& d = j["dataset"];
  check_keys(d, "dataset", {"name", "path", "time_column", "event_column", "features", "categorical", "synth"});
  c.dataset.name = get_or<std::string>(d, "name", "");
  if (d.contains("synth")) {
    const auto& s = d["synth"];
    check_keys(s, "dataset.synth", {"n", "d", "censor_rate"});
    SynthSpec spec;
    spec.n = get_count(s, "n", spec.n);
    spec.d = get_count(s, "d", spec.d);
    spec.censor_rate = get_or<double>(s, "censor_rate", spec.censor_rate);
    c.dataset.synth = spec;
    if (c.dataset.name.empty()) c.dataset.name = "synth";
  } else {
    const auto p = get_or<std::string>(d, "path", "");
    if (p.empty()) throw std::invalid_argument("config: dataset needs 'path' or 'synth'");
    c.dataset.path = std::filesystem::path(p).is_relative() && !base_dir.empty() ? base_dir / p : std::filesystem::path(p);
    if (c.dataset.name.empty()) c.dataset.name = std::filesystem::path(p).stem().string();
    c.dataset.schema = csv_preset(c.dataset.name).value_or(CsvSchema{});
    c.dataset.schema.time_column = get_or<std::string>(d, "time_column", c.dataset.schema.time_column);
    c.dataset.schema.event_column = get_or<std::string>(d, "event_column", c.dataset.schema.event_column);
    c.dataset.schema.features = get_or<std::vector<std::string>>(d, "features", {});
    c.dataset.schema.categorical = get_or<std::vector<std::string>>(d, "categorical", {});
  }

  if (j.contains("split")) {
    const auto& s = j["split"];
    check_keys(s, "split", {"clients", "alpha", "test_fraction", "validation_fraction", "label_bins"});
    c.split.n_clients = get_count(s, "clients", c.split.n_clients);
    if (s.contains("alpha")) c.split.alpha = parse_alpha(s["alpha"]);
    c.split.test_fraction = get_or<double>(s, "test_fraction", c.split.test_fraction);
    c.split.validation_fraction = get_or<double>(s, "validation_fraction", c.split.validation_fraction);
    c.split.n_label_bins = get_count(s, "label_bins", c.split.n_label_bins);
  }
  c.rsf = parse_rsf(j.contains("rsf") ? j["rsf"] : json(), c.dataset.name);
  c.ensemble_size = get_count(j, "ensemble_size", 0);
  if (j.contains("strategies")) {
    c.strategies.clear();
    for (const auto& s : j["strategies"]) c.strategies.push_back(parse_strategy(s.get<std::string>()));
  }
  if (j.contains("metrics")) {
    c.metrics.clear();
    for (const auto& m : j["metrics"]) c.metrics.push_back(parse_metric(m.get<std::string>()));
  }
  if (j.contains("settings")) {
    c.settings.clear();
    for (const auto& s : j["settings"]) c.settings.push_back(parse_setting(s.get<std::string>()));
  }
  c.repetitions = get_count(j, "repetitions", c.repetitions);
  c.seed = get_or<std::uint64_t>(j, "seed", 0);
  c.threads = get_count(j, "threads", 0);
  c.split.seed = c.seed;
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return parse_config(j, path.parent_path());
}

json config_to_json(const ExperimentConfig& c) {
  json d;
  d["name"] = c.dataset.name;
  if (c.dataset.synth) {
    d["synth"] = {{"n", c.dataset.synth->n}, {"d", c.dataset.synth->d}, {"censor_rate", c.dataset.synth->censor_rate}};
  } else {
    d["path"] = c.dataset.path.filename().string();
    d["time_column"] = c.dataset.schema.time_column;
    d["event_column"] = c.dataset.schema.event_column;
    d["features"] = c.dataset.schema.features;
    d["categorical"] = c.dataset.schema.categorical;
  }
  json j;
  j["dataset"] = d;
  j["split"] = {{"clients", c.split.n_clients},
                {"alpha", alpha_json(c.split.alpha)},
                {"test_fraction", c.split.test_fraction},
                {"validation_fraction", c.split.validation_fraction},
                {"label_bins", c.split.n_label_bins}};
  j["rsf"] = {{"n_trees", c.rsf.n_trees},
              {"max_depth", c.rsf.max_depth ? json(*c.rsf.max_depth) : json(nullptr)},
              {"min_samples_split", c.rsf.min_samples_split},
              {"min_samples_leaf", c.rsf.min_samples_leaf}};
  j["ensemble_size"] = c.target();
  j["strategies"] = json::array();
  for (auto s : c.strategies) j["strategies"].push_back(std::string(to_string(s)));
  j["metrics"] = json::array();
  for (auto m : c.metrics) j["metrics"].push_back(std::string(to_string(m)));
  j["settings"] = json::array();
  for (auto s : c.settings) j["settings"].push_back(lower(to_string(s)));
  j["repetitions"] = c.repetitions;
  j["seed"] = c.seed;
  return j;
}

std::string config_hash(const ExperimentConfig& config) { return sha256_hex(config_to_json(config).dump()); }

SurvivalDataset load_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  if (spec.synth) {
    Rng rng(derive_seed(seed, kDataStream));
    return synth_survival(spec.synth->n, spec.synth->d, spec.synth->censor_rate, rng);
  }
  return load_csv(spec.path, spec.schema);
}

// ---- evaluation ----

double Evaluation::get(MetricId m) const {
  switch (m) {
    case MetricId::CIpcw: return c_ipcw;
    case MetricId::Ibs: return ibs;
    case MetricId::CumulativeAuc: return cumulative_auc;
  }
  throw std::invalid_argument("unknown metric");
}

Evaluation evaluate_model(const SurvivalForest& model, const SurvivalDataset& test,
                          const SurvivalDataset& censoring_pool) {
  const StepCurve g = censoring_km(censoring_pool);
  const EvaluationGrid grid = default_grid(test);
  const auto risks = model.risk_scores(test);
  Evaluation e;
  e.c_ipcw = concordance_index_ipcw(risks, test, g, grid.tau);
  e.ibs = integrated_brier_score(model.survival_at(test, grid.times), test, grid, g);
  e.cumulative_auc = cumulative_auc(risks, test, grid, g);
  return e;
}

RepetitionData prepare_repetition(const SurvivalDataset& data, const ExperimentConfig& config, std::size_t r) {
  RepetitionData rep;
  rep.seed = derive_seed(config.seed, r);
  Rng split_rng(derive_seed(rep.seed, kTestSplitStream));
  auto parts = train_test_split(data, config.split.test_fraction, split_rng);
  rep.train = std::move(parts.first);
  rep.test = std::move(parts.second);
  Rng fed_rng(derive_seed(rep.seed, kFederationStream));
  SplitConfig sc = config.split;
  sc.seed = rep.seed;
  const auto locals = label_skew_split(rep.train, sc, fed_rng);
  for (std::size_t k = 0; k < locals.size(); ++k) {
    const auto id = static_cast<std::uint32_t>(k);
    const std::uint64_t seed = derive_seed(rep.seed, kClientStreamBase + k);
    try {
      rep.clients.push_back(make_client(id, locals[k], config.split.validation_fraction, seed));
    } catch (const std::invalid_argument& e) {
      // too few events to hold some out; the client keeps everything for
      // training and fails there if it has none at all
      spdlog::debug("client {} has no validation split: {}", k, e.what());
      ClientState c;
      c.client_id = id;
      c.seed = seed;
      c.train = locals[k];
      c.validation = SurvivalDataset(locals[k].feature_names());
      rep.clients.push_back(std::move(c));
    }
  }
  return rep;
}

// ---- experiment ----

const Cell* ExperimentReport::find(Setting s, std::optional<SamplingStrategy> strategy, MetricId m) const {
  for (const auto& c : cells)
    if (c.setting == s && c.strategy == strategy && c.metric == m) return &c;
  return nullptr;
}

ExperimentReport run_experiment(const ExperimentConfig& config) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const SurvivalDataset data = load_dataset(config.dataset, config.seed);

  std::vector<RepetitionResult> results(config.repetitions);
  parallel_for(config.repetitions, resolve_threads(config.threads), [&](std::size_t r) {
    try {
      results[r] = run_repetition(data, config, r);
    } catch (const std::exception& e) {
      results[r].ok = false;
      results[r].reason = e.what();
    }
  });

  ExperimentReport report;
  report.dataset = config.dataset.name;
  report.config = config_to_json(config);
  report.config_hash = config_hash(config);
  std::vector<const RepetitionResult*> ok;
  for (std::size_t r = 0; r < results.size(); ++r) {
    if (results[r].ok) {
      ok.push_back(&results[r]);
      report.repetitions.push_back(r);
      report.seeds.push_back(derive_seed(config.seed, r));
    } else {
      spdlog::warn("repetition {} dropped: {}", r, results[r].reason);
      report.failures.push_back({r, results[r].reason});
    }
  }
  if (2 * ok.size() < config.repetitions) {
    throw std::runtime_error("experiment failed: only " + std::to_string(ok.size()) + " of " +
                             std::to_string(config.repetitions) + " repetitions succeeded" +
                             (report.failures.empty() ? "" : "; first error: " + report.failures.front().reason));
  }

  auto make_cell = [&](Setting s, std::optional<SamplingStrategy> strategy, MetricId m) {
    Cell c;
    c.setting = s;
    c.strategy = strategy;
    c.metric = m;
    for (const auto* res : ok) {
      const auto& src = s == Setting::Local ? res->local : s == Setting::Global ? res->global : res->federated.at(*strategy);
      c.values.push_back(src.at(m));
    }
    c.mean = mean_of(c.values);
    c.std = sample_std(c.values);
    return c;
  };

  for (auto s : config.settings) {
    if (s == Setting::Federated) {
      for (auto st : config.strategies)
        for (auto m : config.metrics) report.cells.push_back(make_cell(s, st, m));
    } else {
      for (auto m : config.metrics) report.cells.push_back(make_cell(s, std::nullopt, m));
    }
  }

  if (wants(config.settings, Setting::Federated) && config.strategies.size() >= 2) {
    const auto conc = std::find(config.strategies.begin(), config.strategies.end(), SamplingStrategy::Concordance);
    for (auto m : config.metrics) {
      std::vector<std::vector<double>> groups;
      for (auto st : config.strategies) groups.push_back(report.find(Setting::Federated, st, m)->values);
      TestResult t = dunn_test(groups, 0.05);
      if (conc != config.strategies.end()) {
        const auto ci = static_cast<std::size_t>(conc - config.strategies.begin());
        for (std::size_t i = 0; i < config.strategies.size(); ++i) {
          for (auto& cell : report.cells) {
            if (cell.setting == Setting::Federated && cell.strategy == config.strategies[i] && cell.metric == m)
              cell.significant_vs_concordance = t.pairwise->significant[i][ci];
          }
        }
      }
      report.dunn.emplace_back(m, std::move(t));
    }
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

// ---- reports ----

std::string report_csv(const ExperimentReport& report) {
  std::ostringstream out;
  out << "dataset,setting,strategy,metric,mean,std,n_runs,significant_vs_concordance\n";
  for (const auto& c : report.cells) {
    out << csv_field(report.dataset) << ',' << to_string(c.setting) << ','
        << (c.strategy ? std::string(display_name(*c.strategy)) : "NA") << ',' << to_string(c.metric) << ','
        << format_double(c.mean) << ',' << format_double(c.std) << ',' << c.values.size() << ','
        << (c.significant_vs_concordance ? (*c.significant_vs_concordance ? "true" : "false") : "NA") << '\n';
  }
  return out.str();
}

json report_summary(const ExperimentReport& report) {
  json j;
  j["dataset"] = report.dataset;
  j["config"] = report.config;
  j["config_hash"] = report.config_hash;
  j["repetitions"] = json::array();
  for (std::size_t i = 0; i < report.repetitions.size(); ++i)
    j["repetitions"].push_back({{"index", report.repetitions[i]}, {"seed", report.seeds[i]}});
  j["failures"] = json::array();
  for (const auto& f : report.failures) j["failures"].push_back({{"index", f.repetition}, {"reason", f.reason}});
  j["cells"] = json::array();
  for (const auto& c : report.cells) {
    json cell;
    cell["setting"] = to_string(c.setting);
    cell["strategy"] = c.strategy ? json(std::string(display_name(*c.strategy))) : json(nullptr);
    cell["metric"] = to_string(c.metric);
    cell["mean"] = c.mean;
    cell["std"] = c.std;
    cell["n_runs"] = c.values.size();
    cell["values"] = c.values;
    cell["significant_vs_concordance"] =
        c.significant_vs_concordance ? json(*c.significant_vs_concordance) : json(nullptr);
    j["cells"].push_back(std::move(cell));
  }
  j["dunn"] = json::object();
  const auto strategies = report.config.value("strategies", json::array());
  for (const auto& [m, t] : report.dunn) {
    json d;
    d["kruskal_wallis_h"] = t.statistic;
    d["p_value"] = t.p_value;
    d["strategies"] = strategies;
    d["z"] = t.pairwise->z;
    d["p_adjusted"] = t.pairwise->p_adjusted;
    d["significant"] = t.pairwise->significant;
    j["dunn"][std::string(to_string(m))] = std::move(d);
  }
  return j;
}

void emit_report(const ExperimentReport& report, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  auto write = [&](const char* name, const std::string& text) {
    std::ofstream out(out_dir / name, std::ios::binary);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + (out_dir / name).string());
  };
  write("report.csv", report_csv(report));
  write("summary.json", report_summary(report).dump(2) + "\n");
  write("timing.json", json{{"wall_seconds", report.wall_seconds}}.dump(2) + "\n");
}

}  // namespace fedsurf
