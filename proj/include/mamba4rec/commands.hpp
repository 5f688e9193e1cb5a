#pragma once

// Command implementations behind the mamba4rec executable. Each returns a
// process exit code: 0 success, 2 validation failure, 3 runtime error.

#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mamba4rec/bench.hpp"
#include "mamba4rec/checkpoint.hpp"
#include "mamba4rec/config.hpp"
#include "mamba4rec/data.hpp"
#include "mamba4rec/eval.hpp"
#include "mamba4rec/fixture.hpp"
#include "mamba4rec/model.hpp"
#include "mamba4rec/trainer.hpp"

namespace m4r {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitRuntime = 3;

using Json = nlohmann::ordered_json;

// ------------------------------------------------------------------ data

inline std::string cache_path(const RunConfig& c) {
  return (std::filesystem::path(c.cache_dir) /
          (dataset_cache_key(c.dataset, c.format, c.k_core) + ".m4rd"))
      .string();
}

inline InteractionDataset build_from_source(const RunConfig& c) {
  if (c.dataset.empty()) throw ConfigError("no dataset given (use --dataset or data.path)");
  auto records = c.builtin_dataset() ? markov_fixture(c.fixture)
                                     : parse_interactions(c.dataset, c.format);
  return build_dataset(k_core_filter(std::move(records), c.k_core));
}

// The prepared dataset for training and evaluation. File datasets must
// have been cached by `prepare`; the built-in fixture is generated.
inline InteractionDataset load_prepared(const RunConfig& c) {
  InteractionDataset ds;
  if (c.builtin_dataset()) {
    ds = build_from_source(c);
  } else {
    if (c.dataset.empty()) throw ConfigError("no dataset given (use --dataset or data.path)");
    const std::string path = cache_path(c);
    if (!std::filesystem::exists(path)) {
      throw IoError("no prepared dataset for " + c.dataset + " (expected " + path +
                    "); run `mamba4rec prepare --dataset " + c.dataset + " --format " +
                    std::string(log_format_name(c.format)) + "` first");
    }
    ds = load_dataset(path);
  }
  return subsample_users(ds, c.subsample_users, c.subsample_seed);
}

struct DatasetStats {
  std::size_t users = 0, items = 0, interactions = 0;
  double average_length = 0.0;
};

inline DatasetStats stats_of(const InteractionDataset& ds) {
  return {ds.num_users(), ds.num_items(), ds.num_interactions(), ds.average_length()};
}

// "users,items,interactions[,avg_length]"
inline DatasetStats parse_expected_stats(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  std::string p;
  while (std::getline(ss, p, ',')) parts.push_back(detail::trim(p));
  if (parts.size() != 3 && parts.size() != 4) {
    throw ConfigError("--expect takes users,items,interactions[,avg_length]");
  }
  DatasetStats s;
  s.users = detail::parse_size("--expect", parts[0]);
  s.items = detail::parse_size("--expect", parts[1]);
  s.interactions = detail::parse_size("--expect", parts[2]);
  s.average_length = parts.size() == 4 ? detail::parse_real("--expect", parts[3]) : -1.0;
  return s;
}

inline std::string format_stats(const DatasetStats& s) {
  std::ostringstream os;
  os << "users " << s.users << "\nitems " << s.items << "\ninteractions " << s.interactions
     << "\navg_length " << std::fixed << std::setprecision(2) << s.average_length << "\n";
  return os.str();
}

struct PrepareOptions {
  std::string expect;  // empty: no check
  bool force_rebuild = false;
};

inline int cmd_prepare(const RunConfig& c, const PrepareOptions& opt, std::ostream& out) {
  InteractionDataset ds;
  if (c.builtin_dataset()) {
    ds = build_from_source(c);
  } else {
    const std::string path = cache_path(c);
    if (!opt.force_rebuild && std::filesystem::exists(path)) {
      ds = load_dataset(path);
      out << "cache hit " << path << "\n";
    } else {
      ds = build_from_source(c);
      std::filesystem::create_directories(c.cache_dir);
      save_dataset(path, ds);
      out << "cached " << path << "\n";
    }
  }
  build_splits(ds);  // every user must support a leave-one-out split
  const DatasetStats s = stats_of(ds);
  out << format_stats(s);
  if (!opt.expect.empty()) {
    const DatasetStats e = parse_expected_stats(opt.expect);
    bool ok = e.users == s.users && e.items == s.items && e.interactions == s.interactions;
    if (e.average_length >= 0.0) ok = ok && std::abs(e.average_length - s.average_length) <= 0.05;
    if (!ok) {
      out << "statistics do not match --expect " << opt.expect << "\n";
      return kExitValidation;
    }
    out << "statistics match\n";
  }
  return kExitOk;
}

// ----------------------------------------------------------- train / eval

inline ModelConfig model_config_for(const RunConfig& c, const InteractionDataset& ds) {
  ModelConfig m = c.model;
  m.num_items = ds.num_items();
  m.validate();
  return m;
}

inline TrainConfig train_config_for(const RunConfig& c) {
  TrainConfig t = c.train;
  t.mask_history = c.mask_history;
  t.k = 10;  // early stopping follows NDCG@10
  return t;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("write failed for " + path.string());
}

inline Json report_json(const MetricsReport& r, Split split, const RunConfig& c) {
  Json j;
  j["split"] = std::string(split_name(split));
  j["k"] = r.k;
  j["hr"] = r.hr;
  j["ndcg"] = r.ndcg;
  j["mrr"] = r.mrr;
  j["num_users"] = r.num_users;
  j["seed"] = c.train.seed;
  j["config_hash"] = c.hash();
  return j;
}

struct TrainOutcome {
  TrainResult<float> result;
  ModelConfig model;
};

// Trains from the configured seed and writes checkpoint.m4r (best weights),
// history.jsonl, timing.jsonl and config.ini into `dir`. Wall-clock times
// live only in timing.jsonl so the history is reproducible byte for byte.
inline TrainOutcome train_run(const RunConfig& c, const InteractionDataset& ds,
                              const SplitViews& splits, const std::filesystem::path& dir,
                              std::ostream& log) {
  const ModelConfig mc = model_config_for(c, ds);
  const TrainConfig tc = train_config_for(c);
  std::filesystem::create_directories(dir);
  const std::string hash = c.hash();
  write_text(dir / "config.ini", c.artifact_text());
  std::ofstream history(dir / "history.jsonl", std::ios::binary);
  std::ofstream timing(dir / "timing.jsonl", std::ios::binary);
  if (!history || !timing) throw IoError("cannot write training logs in " + dir.string());

  auto on_epoch = [&](const EpochRecord& r) {
    Json h;
    h["epoch"] = r.epoch;
    h["loss"] = r.loss;
    h["valid_ndcg10"] = r.valid_ndcg;
    h["config_hash"] = hash;
    history << h.dump() << "\n" << std::flush;
    Json t;
    t["epoch"] = r.epoch;
    t["seconds"] = r.seconds;
    timing << t.dump() << "\n" << std::flush;
    std::ostringstream secs;
    secs << std::fixed << std::setprecision(1) << r.seconds;
    log << "epoch " << r.epoch << " loss " << r.loss << " valid_ndcg@10 " << r.valid_ndcg << " ("
        << secs.str() << "s)\n";
  };
  TrainOutcome out{train(init_model<float>(mc, tc.seed), mc, ds, splits, tc, on_epoch), mc};
  save_checkpoint((dir / "checkpoint.m4r").string(), out.result.best, c.artifact_text());
  log << "best epoch " << out.result.best_epoch << " valid_ndcg@10 " << out.result.best_valid_ndcg
      << "; checkpoint " << (dir / "checkpoint.m4r").string() << "\n";
  return out;
}

inline MetricsReport eval_run(const RunConfig& c, const ModelParams<float>& params,
                              const ModelConfig& mc, const InteractionDataset& ds,
                              const SplitViews& splits, Split split) {
  EvalOptions opt;
  opt.k = c.eval_k;
  opt.batch_size = c.train.eval_batch_size;
  opt.mask_history = c.mask_history;
  return evaluate(params, mc, ds, splits, split, opt);
}

inline int cmd_train(const RunConfig& c, std::ostream& log) {
  const InteractionDataset ds = load_prepared(c);
  const SplitViews splits = build_splits(ds);
  log << "training on " << ds.num_users() << " users, " << ds.num_items() << " items, "
      << splits.train.size() << " training instances\n";
  const TrainOutcome t = train_run(c, ds, splits, c.out_dir, log);
  if (t.result.diverged) {
    log << "error: training diverged: " << t.result.diverged_reason << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

inline int cmd_eval(const RunConfig& c, const std::string& checkpoint, std::ostream& out) {
  if (c.split == Split::train) throw ConfigError("eval: --split must be valid or test");
  const InteractionDataset ds = load_prepared(c);
  const SplitViews splits = build_splits(ds);
  const ModelConfig mc = model_config_for(c, ds);
  ModelParams<float> params = init_model<float>(mc, c.train.seed);
  if (!checkpoint.empty()) load_params(params, read_checkpoint(checkpoint).records);
  const MetricsReport r = eval_run(c, params, mc, ds, splits, c.split);
  const std::string text = report_json(r, c.split, c).dump(2) + "\n";
  std::filesystem::create_directories(c.out_dir);
  write_text(std::filesystem::path(c.out_dir) / ("report_" + std::string(split_name(c.split)) + ".json"),
             text);
  out << text;
  return kExitOk;
}

// ----------------------------------------------------------------- bench

inline BenchOptions bench_options_for(const RunConfig& c) {
  BenchOptions b;
  b.lengths = c.bench_lengths;
  b.batch = c.bench_batch;
  b.reps = c.bench_reps;
  b.d_model = c.model.d_model();
  b.block = c.model.block;
  b.backward = c.bench_backward;
  b.seed = c.train.seed;
  return b;
}

inline Json bench_json(const BenchResult& r, const RunConfig& c) {
  Json j;
  j["config_hash"] = c.hash();
  j["batch"] = c.bench_batch;
  j["d_model"] = c.model.d_model();
  j["reps"] = c.bench_reps;
  j["mamba_exponent"] = r.mamba_exponent;
  j["attention_exponent"] = r.attention_exponent;
  Json rows = Json::array();
  for (const auto& row : r.rows) {
    Json x;
    x["model"] = row.model;
    x["length"] = row.length;
    x["forward_seconds"] = row.forward_seconds;
    x["backward_seconds"] = row.backward_seconds;
    x["forward_macs"] = row.forward_macs;
    x["activation_bytes"] = row.activation_bytes;
    rows.push_back(std::move(x));
  }
  j["rows"] = std::move(rows);
  return j;
}

inline int cmd_bench(const RunConfig& c, std::ostream& out) {
  const BenchResult r = run_bench(bench_options_for(c));
  std::filesystem::create_directories(c.out_dir);
  const std::filesystem::path dir(c.out_dir);
  std::ostringstream csv;
  csv << "# config_hash " << c.hash() << "\n"
      << "model,length,forward_seconds,backward_seconds,forward_macs,activation_bytes\n";
  out << std::left << std::setw(12) << "model" << std::right << std::setw(7) << "L"
      << std::setw(14) << "forward_ms" << std::setw(14) << "backward_ms" << std::setw(16)
      << "forward_macs" << std::setw(14) << "act_MiB" << "\n";
  for (const auto& row : r.rows) {
    csv << row.model << "," << row.length << "," << row.forward_seconds << ","
        << row.backward_seconds << "," << row.forward_macs << "," << row.activation_bytes << "\n";
    out << std::left << std::setw(12) << row.model << std::right << std::setw(7) << row.length
        << std::fixed << std::setprecision(3) << std::setw(14) << row.forward_seconds * 1e3
        << std::setw(14) << row.backward_seconds * 1e3 << std::setw(16) << row.forward_macs
        << std::setw(14) << static_cast<double>(row.activation_bytes) / (1 << 20)
        << std::defaultfloat << "\n";
  }
  out << "fitted exponent (log-log, L in [128, 1024]): mamba " << std::setprecision(3)
      << r.mamba_exponent << ", attention " << r.attention_exponent << std::defaultfloat << "\n";
  write_text(dir / "bench.csv", csv.str());
  write_text(dir / "bench.json", bench_json(r, c).dump(2) + "\n");
  return kExitOk;
}

// ---------------------------------------------------------------- ablate

struct AblationVariant {
  std::string name;
  std::string slug;
  std::function<void(RunConfig&)> apply;
};

inline const std::vector<AblationVariant>& ablation_variants() {
  static const std::vector<AblationVariant> v = {
      {"Default", "default", [](RunConfig&) {}},
      // the embedding layer keeps its dropout and normalization
      {"Block Only", "block_only",
       [](RunConfig& c) {
         c.model.use_pffn = false;
         c.model.use_layernorm = false;
         c.model.dropout_hidden = 0.0;
       }},
      {"2 Layers", "two_layers", [](RunConfig& c) { c.model.num_layers = 2; }},
      {"w/ PE", "with_pe", [](RunConfig& c) { c.model.use_positional_embedding = true; }},
      {"w/o PFFN", "without_pffn", [](RunConfig& c) { c.model.use_pffn = false; }},
      {"w/o LayerNorm", "without_layernorm", [](RunConfig& c) { c.model.use_layernorm = false; }},
  };
  return v;
}

inline std::string ablation_markdown(const Json& rows) {
  std::ostringstream os;
  os << "| Variant | HR@10 | NDCG@10 | MRR@10 |\n|---|---|---|---|\n";
  os << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    os << "| " << r["variant"].get<std::string>() << " | " << r["hr"].get<double>() << " | "
       << r["ndcg"].get<double>() << " | " << r["mrr"].get<double>() << " |\n";
  }
  return os.str();
}

// Trains and tests every variant from the same seed. Each variant gets its
// own directory with the initial weights (init.m4r) next to the trained
// ones. The summary table is rewritten after every variant, so a failure
// leaves the finished rows on disk.
inline int cmd_ablate(const RunConfig& c, std::ostream& log) {
  const InteractionDataset ds = load_prepared(c);
  const SplitViews splits = build_splits(ds);
  const std::filesystem::path root = std::filesystem::path(c.out_dir) / "ablate";
  std::filesystem::create_directories(root);
  Json rows = Json::array();
  auto flush = [&] {
    Json j;
    j["config_hash"] = c.hash();
    j["rows"] = rows;
    write_text(root / "ablation.json", j.dump(2) + "\n");
    write_text(root / "ablation.md", ablation_markdown(rows));
  };
  for (const auto& variant : ablation_variants()) {
    RunConfig v = c;
    variant.apply(v);
    v.validate();
    const auto dir = root / variant.slug;
    log << "== " << variant.name << "\n";
    try {
      std::filesystem::create_directories(dir);
      const ModelConfig mc = model_config_for(v, ds);
      save_checkpoint((dir / "init.m4r").string(), init_model<float>(mc, v.train.seed),
                      v.artifact_text());
      const TrainOutcome t = train_run(v, ds, splits, dir, log);
      if (t.result.diverged) throw NumericError(t.result.diverged_reason);
      const MetricsReport r = eval_run(v, t.result.best, mc, ds, splits, Split::test);
      write_text(dir / "report_test.json", report_json(r, Split::test, v).dump(2) + "\n");
      Json row;
      row["variant"] = variant.name;
      row["hr"] = r.hr;
      row["ndcg"] = r.ndcg;
      row["mrr"] = r.mrr;
      row["best_epoch"] = t.result.best_epoch;
      row["config_hash"] = v.hash();
      rows.push_back(std::move(row));
    } catch (...) {
      flush();
      throw;
    }
    flush();
  }
  log << ablation_markdown(rows);
  return kExitOk;
}

// Runs `body`, mapping exceptions to exit codes and printing the message.
template <class F>
int run_guarded(F&& body, std::ostream& err) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace m4r
