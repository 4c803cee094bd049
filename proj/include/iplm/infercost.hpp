#pragma once

// Analytic inference cost: weight and KV-cache memory against input length,
// and a prefill latency proxy.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iplm/error.hpp"

namespace iplm::cost {

struct CostModelConfig {
  std::string name;
  std::uint64_t layers = 0;
  std::uint64_t hidden = 0;
  std::uint64_t q_heads = 0;
  std::uint64_t kv_heads = 0;
  std::uint64_t head_dim = 0;
  double total_params = 0.0;
  double active_params_per_token = 0.0;
  std::uint64_t experts = 1;
  std::uint64_t active_experts = 1;
  std::uint64_t weight_bits = 4;
  std::uint64_t kv_bits = 16;
  std::uint64_t runtime_overhead_bytes = 0;
};

inline std::vector<std::string> validate(const CostModelConfig& c) {
  std::vector<std::string> errs;
  const std::string p = "cost." + c.name + ".";
  if (c.layers == 0 || c.q_heads == 0 || c.kv_heads == 0 || c.head_dim == 0)
    errs.push_back(p + "layers/heads/head_dim: must be positive");
  if (c.active_experts > c.experts || c.active_experts == 0) errs.push_back(p + "active_experts: must be in [1, experts]");
  if (c.kv_heads > c.q_heads) errs.push_back(p + "kv_heads: exceeds q_heads");
  if (c.active_params_per_token > c.total_params) errs.push_back(p + "active_params_per_token: exceeds total_params");
  if (c.weight_bits == 0 || c.kv_bits == 0) errs.push_back(p + "bits: must be positive");
  return errs;
}

inline CostModelConfig cost_config_from_json(const std::string& name, const nlohmann::json& j) {
  CostModelConfig c;
  c.name = name;
  try {
    c.layers = j.at("layers").get<std::uint64_t>();
    c.hidden = j.value("hidden", std::uint64_t{0});
    c.q_heads = j.at("q_heads").get<std::uint64_t>();
    c.kv_heads = j.at("kv_heads").get<std::uint64_t>();
    c.head_dim = j.at("head_dim").get<std::uint64_t>();
    c.total_params = j.at("total_params").get<double>();
    c.active_params_per_token = j.value("active_params_per_token", c.total_params);
    c.experts = j.value("experts", std::uint64_t{1});
    c.active_experts = j.value("active_experts", std::uint64_t{1});
    c.weight_bits = j.value("weight_bits", std::uint64_t{4});
    c.kv_bits = j.value("kv_bits", std::uint64_t{16});
    c.runtime_overhead_bytes = j.value("runtime_overhead_bytes", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid_cost_config", "cost." + name + ": " + e.what());
  }
  if (const auto errs = validate(c); !errs.empty()) throw ConfigError("invalid_cost_config", errs.front());
  return c;
}

// {"<name>": {...}, ...}
inline std::map<std::string, CostModelConfig> load_presets(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("invalid_cost_config", "cost presets must be an object");
  std::map<std::string, CostModelConfig> out;
  for (const auto& [name, body] : j.items()) out.emplace(name, cost_config_from_json(name, body));
  return out;
}

inline std::map<std::string, CostModelConfig> load_presets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("invalid_cost_config", "cannot read " + path.string());
  try {
    return load_presets(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("invalid_cost_config", path.string() + ": " + e.what());
  }
}

// K and V for every layer, KV head and position.
inline std::uint64_t kv_cache_bytes(const CostModelConfig& c, std::uint64_t seq_len, std::uint64_t batch = 1) {
  if (seq_len == 0) throw Error("precondition", "seq_len must be at least 1");
  return 2 * c.layers * c.kv_heads * c.head_dim * seq_len * batch * c.kv_bits / 8;
}

inline double weight_bytes(const CostModelConfig& c) { return c.total_params * static_cast<double>(c.weight_bits) / 8.0; }

struct CurvePoint {
  std::uint64_t seq_len = 0;
  double value = 0.0;
};

inline std::vector<CurvePoint> total_memory_curve(const CostModelConfig& c, const std::vector<std::uint64_t>& seq_lens,
                                                  std::uint64_t batch = 1) {
  if (seq_lens.empty()) throw Error("precondition", "no sequence lengths");
  std::vector<CurvePoint> out;
  for (std::size_t i = 0; i < seq_lens.size(); ++i) {
    if (i > 0 && seq_lens[i] <= seq_lens[i - 1]) throw Error("precondition", "sequence lengths must ascend");
    out.push_back({seq_lens[i], weight_bytes(c) + static_cast<double>(kv_cache_bytes(c, seq_lens[i], batch)) +
                                    static_cast<double>(c.runtime_overhead_bytes)});
  }
  return out;
}

// Bytes added per extra token of context.
inline double memory_slope(const CostModelConfig& c) { return static_cast<double>(kv_cache_bytes(c, 2) - kv_cache_bytes(c, 1)); }

enum class LatencyModel { compute, bandwidth };

// compute: 2 * active params * seq_len / flops (prefill).
// bandwidth: (weights + KV cache) / bytes per second, one pass.
inline double first_token_latency_proxy(const CostModelConfig& c, std::uint64_t seq_len, double device_flops,
                                        LatencyModel model = LatencyModel::compute, double bandwidth_bytes_per_s = 0.0) {
  if (model == LatencyModel::compute) {
    if (!(device_flops > 0.0)) throw Error("precondition", "device_flops must be positive");
    return 2.0 * c.active_params_per_token * static_cast<double>(seq_len) / device_flops;
  }
  if (!(bandwidth_bytes_per_s > 0.0)) throw Error("precondition", "bandwidth must be positive");
  return (weight_bytes(c) + static_cast<double>(kv_cache_bytes(c, seq_len))) / bandwidth_bytes_per_s;
}

inline std::vector<CurvePoint> latency_curve(const CostModelConfig& c, const std::vector<std::uint64_t>& seq_lens,
                                             double device_flops) {
  std::vector<CurvePoint> out;
  for (const auto s : seq_lens) out.push_back({s, first_token_latency_proxy(c, s, device_flops)});
  return out;
}

// "seq_len,<unit>" header then one row per point.
inline std::string to_csv(const std::vector<CurvePoint>& curve, const std::string& unit) {
  std::ostringstream out;
  out.precision(17);
  out << "seq_len," << unit << "\n";
  for (const auto& p : curve) out << p.seq_len << "," << p.value << "\n";
  return out.str();
}

}  // namespace iplm::cost
