// mamba4rec: prepare datasets, train, evaluate, benchmark and run the
// ablation matrix of the Mamba sequential recommender.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mamba4rec/commands.hpp"

namespace {

struct Flags {
  std::string config;
  std::string profile;
  std::optional<std::uint64_t> seed;
  std::string dataset;
  std::string format;
  std::string expect;
  std::optional<bool> mask_history;
  std::optional<std::size_t> num_layers;
  bool use_pe = false;
  bool no_pffn = false;
  bool no_layernorm = false;
  bool force_rebuild = false;
  std::string out;
  std::string cache_dir;
  std::optional<std::size_t> k;
  std::string split;
  std::string checkpoint;
  std::string lengths;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "key=value configuration file");
  cmd->add_option("--profile", f.profile, "defaults profile: ml-1m, amazon or fixture");
  cmd->add_option("--seed", f.seed, "seed for initialization, shuffling and dropout");
  cmd->add_option("--dataset", f.dataset, "interaction log path, or builtin:markov");
  cmd->add_option("--format", f.format, "log format: ml-1m, amazon-csv or tsv");
  cmd->add_option("--cache-dir", f.cache_dir, "directory for prepared dataset caches");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--set", f.sets, "extra override, section.key=value (repeatable)");
}

void add_model_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--num-layers", f.num_layers, "number of Mamba layers");
  cmd->add_flag("--use-pe", f.use_pe, "add learned positional embeddings");
  cmd->add_flag("--no-pffn", f.no_pffn, "drop the position-wise feed-forward sublayer");
  cmd->add_flag("--no-layernorm", f.no_layernorm, "drop layer normalization inside layers");
}

void add_eval_flags(CLI::App* cmd, Flags& f) {
  cmd->add_flag("--mask-history,!--no-mask-history", f.mask_history,
                "exclude already-seen context items from the ranking (default on)");
  cmd->add_option("--k", f.k, "metric cutoff");
}

std::vector<m4r::RunConfig::Entry> overrides_from(const Flags& f) {
  std::vector<m4r::RunConfig::Entry> o;
  if (!f.profile.empty()) o.emplace_back("profile", f.profile);
  if (!f.dataset.empty()) o.emplace_back("data.path", f.dataset);
  if (!f.format.empty()) o.emplace_back("data.format", f.format);
  if (!f.cache_dir.empty()) o.emplace_back("data.cache_dir", f.cache_dir);
  if (f.seed) o.emplace_back("train.seed", std::to_string(*f.seed));
  if (f.num_layers) o.emplace_back("model.num_layers", std::to_string(*f.num_layers));
  if (f.use_pe) o.emplace_back("model.use_positional_embedding", "true");
  if (f.no_pffn) o.emplace_back("model.use_pffn", "false");
  if (f.no_layernorm) o.emplace_back("model.use_layernorm", "false");
  if (f.mask_history) o.emplace_back("eval.mask_history", *f.mask_history ? "true" : "false");
  if (f.k) o.emplace_back("eval.k", std::to_string(*f.k));
  if (!f.split.empty()) o.emplace_back("eval.split", f.split);
  if (!f.lengths.empty()) o.emplace_back("bench.lengths", f.lengths);
  if (!f.out.empty()) o.emplace_back("output.dir", f.out);
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw m4r::ConfigError("--set expects key=value, got '" + s + "'");
    o.emplace_back(m4r::detail::trim(s.substr(0, eq)), m4r::detail::trim(s.substr(eq + 1)));
  }
  return o;
}

m4r::RunConfig resolve(const Flags& f) {
  std::vector<m4r::RunConfig::Entry> base;
  if (!f.config.empty()) {
    base = m4r::load_config_file(f.config);
  } else if (!f.checkpoint.empty()) {
    // evaluate with the configuration the checkpoint was trained under
    base = m4r::parse_config_text(m4r::read_checkpoint(f.checkpoint).config_text, f.checkpoint);
  }
  return m4r::RunConfig::resolve(base, overrides_from(f));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mamba sequential recommender"};
  app.require_subcommand(1);
  Flags f;

  auto* prepare = app.add_subcommand("prepare", "parse, k-core filter and cache a dataset");
  add_common(prepare, f);
  prepare->add_option("--expect", f.expect, "users,items,interactions[,avg_length] to verify");
  prepare->add_flag("--force-rebuild", f.force_rebuild, "ignore an existing cache");

  auto* train = app.add_subcommand("train", "train and save the best checkpoint");
  add_common(train, f);
  add_model_flags(train, f);
  add_eval_flags(train, f);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, f);
  add_model_flags(eval, f);
  add_eval_flags(eval, f);
  eval->add_option("--checkpoint", f.checkpoint, "checkpoint file")->required();
  eval->add_option("--split", f.split, "valid or test");

  auto* bench = app.add_subcommand("bench", "time a Mamba layer against reference attention");
  add_common(bench, f);
  bench->add_option("--lengths", f.lengths, "comma-separated sequence lengths");

  auto* ablate = app.add_subcommand("ablate", "train and test the six ablation variants");
  add_common(ablate, f);
  add_eval_flags(ablate, f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return m4r::kExitValidation;
  }

  return m4r::run_guarded(
      [&]() -> int {
        const m4r::RunConfig cfg = resolve(f);
        if (*prepare) {
          return m4r::cmd_prepare(cfg, {f.expect, f.force_rebuild}, std::cout);
        }
        if (*train) return m4r::cmd_train(cfg, std::cout);
        if (*eval) return m4r::cmd_eval(cfg, f.checkpoint, std::cout);
        if (*bench) return m4r::cmd_bench(cfg, std::cout);
        return m4r::cmd_ablate(cfg, std::cout);
      },
      std::cerr);
}
