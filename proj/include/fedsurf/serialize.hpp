#pragma once

#include <nlohmann/json.hpp>

#include <string>
#include <string_view>

#include "fedsurf/rsf.hpp"

namespace fedsurf {

/// Shortest decimal string that parses back to the same double.
std::string format_double(double v);
/// Inverse of format_double; throws std::invalid_argument on junk or
/// non-finite input.
double parse_double(std::string_view s);

// Canonical encoding. Node array in breadth-first order; internal nodes
// {"f", "l", "r", "thr"}, leaves {"chf", "n", "times"}; reals as shortest
// round-trip strings; object keys sorted; no whitespace.
nlohmann::json tree_to_json(const SurvivalTree& tree);
SurvivalTree tree_from_json(const nlohmann::json& j);

std::string serialize_tree(const SurvivalTree& tree);
/// Throws std::invalid_argument on malformed input (bad JSON, missing
/// fields, dangling ids, non-monotone leaf curves).
SurvivalTree deserialize_tree(std::string_view bytes);

nlohmann::json grid_to_json(const std::vector<double>& grid);
std::vector<double> grid_from_json(const nlohmann::json& j);

std::string serialize_forest(const SurvivalForest& forest);
SurvivalForest deserialize_forest(std::string_view bytes);

/// Lower-case hex SHA-256.
std::string sha256_hex(std::string_view bytes);

/// sha256_hex of serialize_forest.
std::string forest_digest(const SurvivalForest& forest);

}  // namespace fedsurf
