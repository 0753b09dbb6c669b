#pragma once

// Run configuration for the command-line driver. The file format is flat
// UTF-8 `key = value` lines; `#` starts a comment. Every key has a default,
// so an empty file is a valid config.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "remo/error.hpp"
#include "remo/model.hpp"
#include "remo/random.hpp"

namespace remo {

struct RunConfig {
  ModelConfig model{};
  std::size_t sketch_rows = 0;  // 0 = d_in / 2 per weight matrix

  // Master seed. Sub-seeds: model = seed, mask = seed+1, corpus = seed+2,
  // trials = seed+3.
  std::uint64_t seed = 1;

  std::string transport = "inproc";  // inproc | tcp | tcp:host:port
  std::string out = "remo_out";

  // demo / invariance
  std::size_t prompts = 100;
  std::size_t prompt_len = 8;
  std::size_t max_new = 16;
  bool check_pools = false;  // demo: probe every restoration pool after the run

  // attack
  std::size_t attack_prompts = 1500;
  std::size_t attack_prompt_len = 40;
  std::size_t attack_max_new = 16;
  double zipf_s = 0.0;
  double train_fraction = 0.8;

  // privacy
  double lambda = 10.0;
  std::size_t trials = 1000000;
  std::vector<double> ratios{0.0, 0.1, 0.5, 1.0, 2.0};
  std::vector<std::size_t> game_dims{1, 4};
  std::size_t consistent_count = 10;

  // bench
  std::vector<std::size_t> bench_clients{1, 2, 4, 8};
  std::size_t bench_requests = 4;
  std::vector<std::size_t> bench_lengths{4, 8, 16};

  // serve: seconds to run, 0 = until interrupted
  std::size_t serve_seconds = 0;

  // Negative-control hooks. Leave at defaults for real runs.
  std::int64_t hook_corrupt_prompt = -1;  // invariance: corrupt one reply in this prompt's session
  bool hook_force_square = false;         // privacy: analyse m = d bases instead of the live ones

  std::uint64_t model_seed() const { return seed; }
  std::uint64_t mask_seed() const { return seed + 1; }
  std::uint64_t corpus_seed() const { return seed + 2; }
  std::uint64_t trial_seed() const { return seed + 3; }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& s) {
  T v{};
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || ptr != end) throw std::invalid_argument("not a number: '" + s + "'");
  return v;
}

template <class T>
std::string format_number(T v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <class T>
std::vector<T> parse_list(const std::string& s) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(trim(item)));
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

template <class T>
std::string format_list(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_number(v[i]);
  return out;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("expected true or false, got '" + s + "'");
}

struct ConfigKey {
  const char* name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
ConfigKey number_key(const char* name, T RunConfig::*field) {
  return {name, [field](const RunConfig& c) { return format_number(c.*field); },
          [field](RunConfig& c, const std::string& v) { c.*field = parse_number<T>(v); }};
}

template <class T>
ConfigKey model_key(const char* name, T ModelConfig::*field) {
  return {name, [field](const RunConfig& c) { return format_number(c.model.*field); },
          [field](RunConfig& c, const std::string& v) { c.model.*field = parse_number<T>(v); }};
}

template <class T>
ConfigKey list_key(const char* name, std::vector<T> RunConfig::*field) {
  return {name, [field](const RunConfig& c) { return format_list(c.*field); },
          [field](RunConfig& c, const std::string& v) { c.*field = parse_list<T>(v); }};
}

inline ConfigKey string_key(const char* name, std::string RunConfig::*field) {
  return {name, [field](const RunConfig& c) { return c.*field; },
          [field](RunConfig& c, const std::string& v) { c.*field = v; }};
}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      model_key("vocab", &ModelConfig::vocab),
      model_key("d", &ModelConfig::d),
      model_key("layers", &ModelConfig::layers),
      model_key("heads", &ModelConfig::heads),
      model_key("d_ff", &ModelConfig::d_ff),
      model_key("max_seq", &ModelConfig::max_seq),
      model_key("eos", &ModelConfig::eos),
      {"k", [](const RunConfig& c) { return format_number(c.model.params.k); },
       [](RunConfig& c, const std::string& v) { c.model.params.k = parse_number<std::uint32_t>(v); }},
      {"f", [](const RunConfig& c) { return format_number(c.model.params.f); },
       [](RunConfig& c, const std::string& v) { c.model.params.f = parse_number<std::uint32_t>(v); }},
      number_key("sketch_rows", &RunConfig::sketch_rows),
      number_key("seed", &RunConfig::seed),
      string_key("transport", &RunConfig::transport),
      string_key("out", &RunConfig::out),
      number_key("prompts", &RunConfig::prompts),
      number_key("prompt_len", &RunConfig::prompt_len),
      number_key("max_new", &RunConfig::max_new),
      {"check_pools", [](const RunConfig& c) { return std::string(c.check_pools ? "true" : "false"); },
       [](RunConfig& c, const std::string& v) { c.check_pools = parse_bool(v); }},
      number_key("attack_prompts", &RunConfig::attack_prompts),
      number_key("attack_prompt_len", &RunConfig::attack_prompt_len),
      number_key("attack_max_new", &RunConfig::attack_max_new),
      number_key("zipf_s", &RunConfig::zipf_s),
      number_key("train_fraction", &RunConfig::train_fraction),
      number_key("lambda", &RunConfig::lambda),
      number_key("trials", &RunConfig::trials),
      list_key("ratios", &RunConfig::ratios),
      list_key("game_dims", &RunConfig::game_dims),
      number_key("consistent_count", &RunConfig::consistent_count),
      list_key("bench_clients", &RunConfig::bench_clients),
      number_key("bench_requests", &RunConfig::bench_requests),
      list_key("bench_lengths", &RunConfig::bench_lengths),
      number_key("serve_seconds", &RunConfig::serve_seconds),
      number_key("hook_corrupt_prompt", &RunConfig::hook_corrupt_prompt),
      {"hook_force_square", [](const RunConfig& c) { return std::string(c.hook_force_square ? "true" : "false"); },
       [](RunConfig& c, const std::string& v) { c.hook_force_square = parse_bool(v); }},
  };
  return keys;
}

}  // namespace detail

// Applies one `key = value` assignment. `where` prefixes error messages.
inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value, const std::string& where) {
  for (const auto& k : detail::config_keys()) {
    if (key != k.name) continue;
    try {
      k.set(cfg, value);
    } catch (const std::exception& e) {
      fail(ErrorCode::kParseError, where + ": bad value for '" + key + "': " + e.what());
    }
    return;
  }
  fail(ErrorCode::kParseError, where + ": unknown key '" + key + "'");
}

// "key=value" as given on the command line.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) fail(ErrorCode::kParseError, "--set " + assignment + ": expected key=value");
  apply_setting(cfg, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)),
                "--set " + assignment);
}

inline RunConfig parse_config(std::istream& in, const std::string& source = "config") {
  RunConfig cfg;
  std::set<std::string> seen;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const std::string where = source + ":" + std::to_string(lineno);
    const auto hash = line.find('#');
    const std::string body = detail::trim(line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) fail(ErrorCode::kParseError, where + ": expected key = value");
    const std::string key = detail::trim(body.substr(0, eq));
    if (!seen.insert(key).second) fail(ErrorCode::kParseError, where + ": duplicate key '" + key + "'");
    apply_setting(cfg, key, detail::trim(body.substr(eq + 1)), where);
  }
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kParseError, path + ": cannot open");
  return parse_config(in, path);
}

// Every key, in a fixed order, with canonical formatting.
inline std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += std::string(k.name) + " = " + k.get(cfg) + "\n";
  return out;
}

// "inproc", "tcp" (spawn a local server) or "tcp:host:port".
struct TransportSpec {
  enum class Kind { kInProcess, kLocalTcp, kRemoteTcp } kind = Kind::kInProcess;
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

inline TransportSpec parse_transport(const std::string& s) {
  TransportSpec t;
  if (s == "inproc") return t;
  if (s == "tcp") {
    t.kind = TransportSpec::Kind::kLocalTcp;
    return t;
  }
  if (s.rfind("tcp:", 0) == 0) {
    const auto colon = s.rfind(':');
    if (colon > 4) {
      t.kind = TransportSpec::Kind::kRemoteTcp;
      t.host = s.substr(4, colon - 4);
      try {
        const auto port = detail::parse_number<std::uint32_t>(s.substr(colon + 1));
        if (port > 0 && port <= 65535) {
          t.port = static_cast<std::uint16_t>(port);
          return t;
        }
      } catch (const std::invalid_argument&) {
      }
    }
  }
  fail(ErrorCode::kParseError, "transport '" + s + "': expected inproc, tcp, or tcp:host:port");
}

}  // namespace remo
