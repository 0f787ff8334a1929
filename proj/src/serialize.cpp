#include "fedsurf/serialize.hpp"

#include <openssl/evp.h>

#include <charconv>
#include <cmath>
#include <stdexcept>

namespace fedsurf {
namespace {

using nlohmann::json;

constexpr std::string_view kForestFormat = "fedsurf-forest";
constexpr int kForestVersion = 1;

json reals(const std::vector<double>& v) {
  json out = json::array();
  for (double x : v) out.push_back(format_double(x));
  return out;
}

std::vector<double> reals_from(const json& j, const char* what) {
  if (!j.is_array()) throw std::invalid_argument(std::string(what) + ": expected an array");
  std::vector<double> out;
  out.reserve(j.size());
  for (const auto& x : j) {
    if (!x.is_string()) throw std::invalid_argument(std::string(what) + ": expected decimal strings");
    out.push_back(parse_double(x.get_ref<const std::string&>()));
  }
  return out;
}

const json& field(const json& j, const char* key) {
  if (!j.is_object()) throw std::invalid_argument("expected an object");
  const auto it = j.find(key);
  if (it == j.end()) throw std::invalid_argument(std::string("missing field '") + key + "'");
  return *it;
}

std::uint64_t unsigned_field(const json& j, const char* key) {
  const auto& v = field(j, key);
  if (!v.is_number_unsigned()) throw std::invalid_argument(std::string("field '") + key + "' must be unsigned");
  return v.get<std::uint64_t>();
}

json parse_json(std::string_view bytes) {
  try {
    return json::parse(bytes);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("malformed JSON: ") + e.what());
  }
}

json params_to_json(const RsfParams& p) {
  json j;
  j["n_trees"] = p.n_trees;
  j["max_depth"] = p.max_depth ? json(*p.max_depth) : json(nullptr);
  j["min_samples_split"] = p.min_samples_split;
  j["min_samples_leaf"] = p.min_samples_leaf;
  j["seed"] = p.seed;
  return j;
}

RsfParams params_from_json(const json& j) {
  RsfParams p;
  p.n_trees = unsigned_field(j, "n_trees");
  const auto& depth = field(j, "max_depth");
  if (!depth.is_null()) p.max_depth = unsigned_field(j, "max_depth");
  p.min_samples_split = unsigned_field(j, "min_samples_split");
  p.min_samples_leaf = unsigned_field(j, "min_samples_leaf");
  p.seed = unsigned_field(j, "seed");
  return p;
}

}  // namespace

std::string format_double(double v) {
  if (!std::isfinite(v)) throw std::invalid_argument("format_double: non-finite value");
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw std::invalid_argument("invalid decimal '" + std::string(s) + "'");
  }
  return v;
}

json tree_to_json(const SurvivalTree& tree) {
  json nodes = json::array();
  for (const auto& node : tree.nodes()) {
    json n;
    if (const auto* s = std::get_if<SplitNode>(&node)) {
      n["f"] = s->feature;
      n["thr"] = format_double(s->threshold);
      n["l"] = s->left;
      n["r"] = s->right;
    } else {
      const auto& leaf = std::get<LeafNode>(node);
      n["times"] = reals(leaf.chf.times());
      n["chf"] = reals(leaf.chf.values());
      n["n"] = leaf.n_samples;
    }
    nodes.push_back(std::move(n));
  }
  json j;
  j["d"] = tree.n_features();
  j["seed"] = tree.bootstrap_seed();
  j["nodes"] = std::move(nodes);
  return j;
}

SurvivalTree tree_from_json(const json& j) {
  const auto& nodes_json = field(j, "nodes");
  if (!nodes_json.is_array()) throw std::invalid_argument("tree: 'nodes' must be an array");
  std::vector<TreeNode> nodes;
  nodes.reserve(nodes_json.size());
  for (const auto& n : nodes_json) {
    if (!n.is_object()) throw std::invalid_argument("tree: node must be an object");
    if (n.contains("thr")) {
      const auto& thr = field(n, "thr");
      if (!thr.is_string()) throw std::invalid_argument("tree: 'thr' must be a decimal string");
      nodes.emplace_back(SplitNode{unsigned_field(n, "f"), parse_double(thr.get_ref<const std::string&>()),
                                   unsigned_field(n, "l"), unsigned_field(n, "r")});
    } else {
      auto times = reals_from(field(n, "times"), "leaf times");
      auto chf = reals_from(field(n, "chf"), "leaf chf");
      nodes.emplace_back(LeafNode{StepCurve(std::move(times), std::move(chf), 0.0), unsigned_field(n, "n")});
    }
  }
  return SurvivalTree(std::move(nodes), unsigned_field(j, "d"), unsigned_field(j, "seed"));
}

std::string serialize_tree(const SurvivalTree& tree) { return tree_to_json(tree).dump(); }

SurvivalTree deserialize_tree(std::string_view bytes) { return tree_from_json(parse_json(bytes)); }

json grid_to_json(const std::vector<double>& grid) { return reals(grid); }

std::vector<double> grid_from_json(const json& j) { return reals_from(j, "event grid"); }

std::string serialize_forest(const SurvivalForest& forest) {
  json trees = json::array();
  for (const auto& t : forest.trees()) trees.push_back(tree_to_json(t));
  json j;
  j["format"] = kForestFormat;
  j["version"] = kForestVersion;
  j["grid"] = grid_to_json(forest.event_grid());
  j["params"] = params_to_json(forest.params());
  j["trees"] = std::move(trees);
  return j.dump();
}

SurvivalForest deserialize_forest(std::string_view bytes) {
  const json j = parse_json(bytes);
  const auto& format = field(j, "format");
  if (!format.is_string() || format.get<std::string>() != kForestFormat) {
    throw std::invalid_argument("not a serialized forest");
  }
  if (unsigned_field(j, "version") != kForestVersion) throw std::invalid_argument("unsupported forest version");
  const auto& trees_json = field(j, "trees");
  if (!trees_json.is_array()) throw std::invalid_argument("forest: 'trees' must be an array");
  std::vector<SurvivalTree> trees;
  for (const auto& t : trees_json) trees.push_back(tree_from_json(t));
  return SurvivalForest(std::move(trees), grid_from_json(field(j, "grid")), params_from_json(field(j, "params")));
}

std::string forest_digest(const SurvivalForest& forest) { return sha256_hex(serialize_forest(forest)); }

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xF]);
  }
  return out;
}

}  // namespace fedsurf
