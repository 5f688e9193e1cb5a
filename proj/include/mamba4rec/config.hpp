#pragma once

// Run configuration: every model, training, data and evaluation setting in
// one flat key=value file with [section] headers.
//
//   profile = ml-1m
//   [model]
//   num_layers = 2
//   [train]
//   lr = 0.001
//
// Resolution order: built-in defaults, then the profile, then the file,
// then command-line overrides. Unknown keys are rejected.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mamba4rec/container.hpp"
#include "mamba4rec/data.hpp"
#include "mamba4rec/errors.hpp"
#include "mamba4rec/model.hpp"
#include "mamba4rec/trainer.hpp"

namespace m4r {

inline constexpr std::string_view kBuiltinMarkov = "builtin:markov";

struct FixtureConfig {
  std::size_t users = 64;
  std::size_t items = 40;
  std::size_t min_length = 8;
  std::size_t max_length = 14;
  std::uint64_t seed = 7;
};

struct RunConfig {
  std::string profile = "ml-1m";

  std::string dataset;
  LogFormat format = LogFormat::ml1m;
  std::size_t k_core = 5;
  std::string cache_dir = "cache";
  std::size_t subsample_users = 0;  // 0 keeps every user
  std::uint64_t subsample_seed = 2024;

  FixtureConfig fixture;
  ModelConfig model;
  TrainConfig train;

  std::size_t eval_k = 10;
  bool mask_history = true;
  Split split = Split::test;

  std::vector<std::size_t> bench_lengths{64, 128, 256, 512, 1024};
  std::size_t bench_batch = 8;
  std::size_t bench_reps = 5;
  bool bench_backward = true;

  std::string out_dir = "runs/default";

  using Entry = std::pair<std::string, std::string>;

  // Builds a config from file entries plus overrides (both in key order as
  // given). The profile key is honoured first wherever it appears.
  static RunConfig resolve(const std::vector<Entry>& file_entries,
                           const std::vector<Entry>& overrides);

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  // Canonical sectioned text; parsing it back reproduces this config.
  std::string resolved_text() const;
  std::string hash() const {
    Fnv1a h;
    h.update(resolved_text());
    return h.hex();
  }
  // Resolved text prefixed with a hash comment, as stored in artifacts.
  std::string artifact_text() const { return "# config_hash " + hash() + "\n" + resolved_text(); }

  bool builtin_dataset() const { return dataset == kBuiltinMarkov; }
  void validate() const;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  double out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::string fmt_real(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline std::string fmt_bool(bool v) { return v ? "true" : "false"; }

inline std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(parse_size(key, trim(part)));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

inline std::string fmt_size_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct KeyBinding {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<KeyBinding>& key_table() {
  using C = RunConfig;
  static const std::vector<KeyBinding> table = [] {
    std::vector<KeyBinding> t;
    auto size_key = [&t](std::string name, auto member) {
      t.push_back({name, [name, member](C& c, const std::string& v) { member(c) = parse_size(name, v); },
                   [member](const C& c) { return std::to_string(member(const_cast<C&>(c))); }});
    };
    auto real_key = [&t](std::string name, auto member) {
      t.push_back({name, [name, member](C& c, const std::string& v) { member(c) = parse_real(name, v); },
                   [member](const C& c) { return fmt_real(member(const_cast<C&>(c))); }});
    };
    auto bool_key = [&t](std::string name, auto member) {
      t.push_back({name, [name, member](C& c, const std::string& v) { member(c) = parse_bool(name, v); },
                   [member](const C& c) { return fmt_bool(member(const_cast<C&>(c))); }});
    };
    auto text_key = [&t](std::string name, auto member) {
      t.push_back({name, [member](C& c, const std::string& v) { member(c) = v; },
                   [member](const C& c) { return member(const_cast<C&>(c)); }});
    };

    t.push_back({"profile", [](C& c, const std::string& v) { c.profile = v; },
                 [](const C& c) { return c.profile; }});

    text_key("data.path", [](C& c) -> std::string& { return c.dataset; });
    t.push_back({"data.format", [](C& c, const std::string& v) { c.format = parse_log_format(v); },
                 [](const C& c) { return std::string(log_format_name(c.format)); }});
    size_key("data.k_core", [](C& c) -> std::size_t& { return c.k_core; });
    text_key("data.cache_dir", [](C& c) -> std::string& { return c.cache_dir; });
    size_key("data.subsample_users", [](C& c) -> std::size_t& { return c.subsample_users; });
    size_key("data.subsample_seed", [](C& c) -> std::uint64_t& { return c.subsample_seed; });

    size_key("fixture.users", [](C& c) -> std::size_t& { return c.fixture.users; });
    size_key("fixture.items", [](C& c) -> std::size_t& { return c.fixture.items; });
    size_key("fixture.min_length", [](C& c) -> std::size_t& { return c.fixture.min_length; });
    size_key("fixture.max_length", [](C& c) -> std::size_t& { return c.fixture.max_length; });
    size_key("fixture.seed", [](C& c) -> std::uint64_t& { return c.fixture.seed; });

    size_key("model.d_model", [](C& c) -> std::size_t& { return c.model.block.d_model; });
    size_key("model.state_dim", [](C& c) -> std::size_t& { return c.model.block.state_dim; });
    size_key("model.conv_kernel", [](C& c) -> std::size_t& { return c.model.block.conv_kernel; });
    size_key("model.expand", [](C& c) -> std::size_t& { return c.model.block.expand; });
    real_key("model.dt_min", [](C& c) -> double& { return c.model.block.dt_min; });
    real_key("model.dt_max", [](C& c) -> double& { return c.model.block.dt_max; });
    t.push_back({"model.scan",
                 [](C& c, const std::string& v) {
                   if (v == "parallel") c.model.block.scan = ScanMode::parallel;
                   else if (v == "sequential") c.model.block.scan = ScanMode::sequential;
                   else throw ConfigError("model.scan: expected parallel or sequential, got '" + v + "'");
                 },
                 [](const C& c) {
                   return std::string(c.model.block.scan == ScanMode::parallel ? "parallel" : "sequential");
                 }});
    size_key("model.num_layers", [](C& c) -> std::size_t& { return c.model.num_layers; });
    size_key("model.max_len", [](C& c) -> std::size_t& { return c.model.max_len; });
    bool_key("model.use_positional_embedding", [](C& c) -> bool& { return c.model.use_positional_embedding; });
    bool_key("model.use_pffn", [](C& c) -> bool& { return c.model.use_pffn; });
    bool_key("model.use_layernorm", [](C& c) -> bool& { return c.model.use_layernorm; });
    real_key("model.dropout_embed", [](C& c) -> double& { return c.model.dropout_embed; });
    real_key("model.dropout_hidden", [](C& c) -> double& { return c.model.dropout_hidden; });
    real_key("model.layer_norm_eps", [](C& c) -> double& { return c.model.layer_norm_eps; });
    real_key("model.embedding_init_std", [](C& c) -> double& { return c.model.embedding_init_std; });

    real_key("train.lr", [](C& c) -> double& { return c.train.adam.lr; });
    real_key("train.beta1", [](C& c) -> double& { return c.train.adam.beta1; });
    real_key("train.beta2", [](C& c) -> double& { return c.train.adam.beta2; });
    real_key("train.eps", [](C& c) -> double& { return c.train.adam.eps; });
    size_key("train.batch_size", [](C& c) -> std::size_t& { return c.train.batch_size; });
    size_key("train.eval_batch_size", [](C& c) -> std::size_t& { return c.train.eval_batch_size; });
    size_key("train.max_epochs", [](C& c) -> std::size_t& { return c.train.max_epochs; });
    size_key("train.patience", [](C& c) -> std::size_t& { return c.train.patience; });
    size_key("train.seed", [](C& c) -> std::uint64_t& { return c.train.seed; });

    size_key("eval.k", [](C& c) -> std::size_t& { return c.eval_k; });
    bool_key("eval.mask_history", [](C& c) -> bool& { return c.mask_history; });
    t.push_back({"eval.split", [](C& c, const std::string& v) { c.split = parse_split(v); },
                 [](const C& c) { return std::string(split_name(c.split)); }});

    t.push_back({"bench.lengths",
                 [](C& c, const std::string& v) { c.bench_lengths = parse_size_list("bench.lengths", v); },
                 [](const C& c) { return fmt_size_list(c.bench_lengths); }});
    size_key("bench.batch", [](C& c) -> std::size_t& { return c.bench_batch; });
    size_key("bench.reps", [](C& c) -> std::size_t& { return c.bench_reps; });
    bool_key("bench.backward", [](C& c) -> bool& { return c.bench_backward; });

    text_key("output.dir", [](C& c) -> std::string& { return c.out_dir; });
    return t;
  }();
  return table;
}

inline const KeyBinding& find_key(const std::string& key) {
  for (const auto& k : key_table()) {
    if (k.name == key) return k;
  }
  throw ConfigError("unknown configuration key '" + key + "'");
}

// Settings implied by a profile name, applied on top of the defaults.
inline void apply_profile(RunConfig& c, const std::string& profile) {
  c.profile = profile;
  if (profile == "ml-1m") {
    c.format = LogFormat::ml1m;
    c.model.max_len = 200;
    c.model.dropout_embed = c.model.dropout_hidden = 0.2;
  } else if (profile == "amazon") {
    c.format = LogFormat::amazon_csv;
    c.model.max_len = 50;
    c.model.dropout_embed = c.model.dropout_hidden = 0.4;
  } else if (profile == "fixture") {
    c.dataset = std::string(kBuiltinMarkov);
    c.model.max_len = 20;
    c.model.dropout_embed = c.model.dropout_hidden = 0.2;
    c.train.batch_size = 64;
    c.train.eval_batch_size = 4096;
    c.train.max_epochs = 30;
    c.train.patience = 5;
    c.out_dir = "runs/fixture";
  } else {
    throw ConfigError("unknown profile '" + profile + "' (expected ml-1m, amazon or fixture)");
  }
}

}  // namespace detail

// Parses key=value lines with optional [section] headers. '#' and ';'
// start comments. Keys are returned fully qualified (section.key).
inline std::vector<RunConfig::Entry> parse_config_text(std::string_view text,
                                                       const std::string& source = "config") {
  std::vector<RunConfig::Entry> out;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find_first_of("#;");
    const std::string line = detail::trim(std::string_view(raw).substr(0, hash));
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    std::string key = detail::trim(std::string_view(line).substr(0, eq));
    const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (!section.empty()) key = section + "." + key;
    try {
      detail::find_key(key);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
    out.emplace_back(std::move(key), value);
  }
  return out;
}

inline std::vector<RunConfig::Entry> load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

inline void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "profile") {
    detail::apply_profile(*this, value);
    return;
  }
  detail::find_key(key).set(*this, value);
}

inline std::string RunConfig::get(const std::string& key) const {
  return detail::find_key(key).get(*this);
}

inline const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& k : detail::key_table()) v.push_back(k.name);
    return v;
  }();
  return names;
}

inline RunConfig RunConfig::resolve(const std::vector<Entry>& file_entries,
                                    const std::vector<Entry>& overrides) {
  RunConfig c;
  std::string profile;
  bool builtin = false;
  for (const auto* list : {&file_entries, &overrides}) {
    for (const auto& [k, v] : *list) {
      detail::find_key(k);
      if (k == "profile") profile = v;
      if (k == "data.path") builtin = v == kBuiltinMarkov;
    }
  }
  if (profile.empty()) profile = builtin ? "fixture" : "ml-1m";
  detail::apply_profile(c, profile);
  for (const auto* list : {&file_entries, &overrides}) {
    for (const auto& [k, v] : *list) {
      if (k != "profile") c.set(k, v);
    }
  }
  c.validate();
  return c;
}

inline std::string RunConfig::resolved_text() const {
  std::string out;
  std::string section;
  for (const auto& k : detail::key_table()) {
    const auto dot = k.name.find('.');
    const std::string sec = dot == std::string::npos ? "" : k.name.substr(0, dot);
    const std::string leaf = dot == std::string::npos ? k.name : k.name.substr(dot + 1);
    if (sec != section) {
      out += "\n[" + sec + "]\n";
      section = sec;
    }
    out += leaf + " = " + k.get(*this) + "\n";
  }
  return out;
}

inline void RunConfig::validate() const {
  if (k_core < 1) throw ConfigError("data.k_core must be >= 1");
  if (eval_k < 1) throw ConfigError("eval.k must be >= 1");
  if (bench_batch < 1) throw ConfigError("bench.batch must be >= 1");
  if (bench_reps < 1) throw ConfigError("bench.reps must be >= 1");
  for (auto L : bench_lengths) {
    if (L < 1) throw ConfigError("bench.lengths must be positive");
  }
  if (fixture.items < 2 || fixture.users < 1) throw ConfigError("fixture needs >= 2 items and >= 1 user");
  if (fixture.min_length < 3 || fixture.min_length > fixture.max_length) {
    throw ConfigError("fixture lengths must satisfy 3 <= min_length <= max_length");
  }
  if (out_dir.empty()) throw ConfigError("output.dir must not be empty");
  train.validate();
  // num_items is only known once data is loaded; check the rest here.
  ModelConfig probe = model;
  probe.num_items = 1;
  probe.validate();
}

}  // namespace m4r
