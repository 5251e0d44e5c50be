// lrsa: command-line harness for the lag-relative sparse attention engine.
//
// Subcommands: equivalence, bench, train, score-dump, gen-task. Every config
// field can be overridden with a flag of the same dotted name. Exit code 0
// iff all checks in the invoked command pass.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lrsa/config.hpp"
#include "lrsa/harness.hpp"
#include "lrsa/log.hpp"

namespace {

using lrsa::config::RunConfig;
using json = nlohmann::ordered_json;

struct CliState {
  RunConfig cfg;
  std::string config_path;
  std::string tokens_path;
};

void add_config_flags(CLI::App* app, CliState& st) {
  app->add_option("--config", st.config_path, "JSON config file (flags override it)");
  app->add_option("--seed", st.cfg.run.seed, "Run seed (also seeds training data)");
  app->add_option("--precision", st.cfg.run.precision, "f32 or f64");
  app->add_option("--mode", st.cfg.mode, "vanilla or lrsa");
  app->add_option("--out", st.cfg.out_dir, "Output directory");
  app->add_option("--model.vocab", st.cfg.model.vocab);
  app->add_option("--model.d_model", st.cfg.model.d_model);
  app->add_option("--model.heads", st.cfg.model.heads);
  app->add_option("--model.kv_heads", st.cfg.model.kv_heads);
  app->add_option("--model.head_dim", st.cfg.model.head_dim);
  app->add_option("--model.layers", st.cfg.model.layers);
  app->add_option("--model.mlp_ratio", st.cfg.model.mlp_ratio);
  app->add_option("--model.rope_base", st.cfg.model.rope_base);
  app->add_option("--model.norm_eps", st.cfg.model.norm_eps);
  app->add_option("--lagkv.sink", st.cfg.lagkv.sink);
  app->add_option("--lagkv.lag", st.cfg.lagkv.lag);
  app->add_option("--lagkv.retention", st.cfg.lagkv.retention);
  app->add_option("--lagkv.epsilon", st.cfg.lagkv.epsilon);
  app->add_option("--run.chunks_per_step", st.cfg.run.chunks_per_step);
  app->add_option("--run.precision", st.cfg.run.precision);
  app->add_option("--run.seed", st.cfg.run.seed);
  app->add_option("--run.seq_len", st.cfg.run.seq_len);
  app->add_option("--run.threads", st.cfg.run.threads);
  app->add_option("--train.lr", st.cfg.train.lr);
  app->add_option("--train.beta1", st.cfg.train.beta1);
  app->add_option("--train.beta2", st.cfg.train.beta2);
  app->add_option("--train.weight_decay", st.cfg.train.weight_decay);
  app->add_option("--train.adam_eps", st.cfg.train.adam_eps);
  app->add_option("--train.steps", st.cfg.train.steps);
  app->add_option("--train.batch", st.cfg.train.batch);
  app->add_option("--train.seed", st.cfg.train.seed);
  app->add_option("--task.kind", st.cfg.task.kind);
  app->add_option("--task.needle_len", st.cfg.task.needle_len);
  app->add_option("--equivalence.seeds", st.cfg.equivalence.seeds);
  app->add_option("--equivalence.decode_tokens", st.cfg.equivalence.decode_tokens);
  app->add_option("--bench.lengths", st.cfg.bench.lengths)->delimiter(',');
  app->add_option("--out_dir", st.cfg.out_dir);
}

std::filesystem::path out_file(const RunConfig& cfg, const std::string& name) {
  std::filesystem::create_directories(cfg.out_dir);
  return std::filesystem::path(cfg.out_dir) / name;
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
  lrsa::log::info("wrote %s", p.c_str());
}

int cmd_equivalence(const RunConfig& cfg) {
  json report = lrsa::harness::run_equivalence(cfg);
  const std::string text = report.dump(2) + "\n";
  write_text(out_file(cfg, "equivalence.json"), text);
  std::cout << text;
  return report["pass"].get<bool>() ? 0 : 1;
}

int cmd_bench(const RunConfig& cfg) {
  auto [report, table] = lrsa::harness::run_bench(cfg);
  const std::string text = report.dump(2) + "\n";
  write_text(out_file(cfg, "bench.json"), text);
  std::cout << table << text;
  return report["pass"].get<bool>() ? 0 : 1;
}

int cmd_train(const RunConfig& cfg) {
  auto out = lrsa::harness::run_train(cfg);
  write_text(out_file(cfg, "train_" + cfg.mode + ".csv"), out.csv);
  const std::string text = out.summary.dump(2) + "\n";
  write_text(out_file(cfg, "train_" + cfg.mode + ".json"), text);
  std::cout << text;
  return out.result.diverged ? 1 : 0;
}

int cmd_score_dump(const RunConfig& cfg, const std::string& tokens_path) {
  std::optional<std::vector<std::int32_t>> tokens;
  if (!tokens_path.empty()) {
    std::ifstream in(tokens_path);
    if (!in) throw lrsa::ConfigError("cannot open tokens file: " + tokens_path);
    tokens = json::parse(in).get<std::vector<std::int32_t>>();
  }
  json report = lrsa::harness::run_score_dump(cfg, tokens ? &*tokens : nullptr);
  const std::string text = report.dump(2) + "\n";
  write_text(out_file(cfg, "scores.json"), text);
  std::cout << text;
  return 0;
}

int cmd_gen_task(const RunConfig& cfg) {
  json j = lrsa::harness::gen_task_json(cfg);
  const std::string text = j.dump(2) + "\n";
  write_text(out_file(cfg, "task.json"), text);
  std::cout << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lag-relative sparse attention lab"};
  app.require_subcommand(1);

  CliState st;
  // The config file fills defaults before CLI11 writes flag values on top.
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--config") st.config_path = argv[i + 1];
  if (!st.config_path.empty()) {
    std::ifstream in(st.config_path);
    if (!in) {
      lrsa::log::error("cannot open config file: %s", st.config_path.c_str());
      return 2;
    }
    try {
      lrsa::config::merge_json(st.cfg, json::parse(in));
    } catch (const std::exception& e) {
      lrsa::log::error("config parse failed: %s", e.what());
      return 2;
    }
  }

  std::string tokens_path;
  auto* eq = app.add_subcommand("equivalence", "Masked-full vs compacted-cache checks");
  auto* bench = app.add_subcommand("bench", "Attention score-entry and wall-time comparison");
  auto* tr = app.add_subcommand("train", "Train on a synthetic task; CSV curve + summary");
  auto* sd = app.add_subcommand("score-dump", "Per-layer/head/chunk scores and retention");
  sd->add_option("--tokens-file", tokens_path, "JSON array of token ids");
  auto* gt = app.add_subcommand("gen-task", "Emit one task instance as JSON");
  for (CLI::App* sub : {eq, bench, tr, sd, gt}) add_config_flags(sub, st);

  CLI11_PARSE(app, argc, argv);

  // --seed seeds the training stream too unless --train.seed overrides it.
  CLI::App* parsed = app.get_subcommands().front();
  if (parsed->count("--seed") > 0 && parsed->count("--train.seed") == 0)
    st.cfg.train.seed = st.cfg.run.seed;

  try {
    st.cfg.validate();
    if (eq->parsed()) return cmd_equivalence(st.cfg);
    if (bench->parsed()) return cmd_bench(st.cfg);
    if (tr->parsed()) return cmd_train(st.cfg);
    if (sd->parsed()) return cmd_score_dump(st.cfg, tokens_path);
    if (gt->parsed()) return cmd_gen_task(st.cfg);
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
  return 0;
}
