// cpt_lab: pretrain | gen-data | run | ablate | report

#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "cpt/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Context-aware prompt tuning laboratory"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::string> out;
  std::optional<std::size_t> workers;
  std::optional<std::uint64_t> seed;
  bool quiet = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file (omitted keys take defaults)");
    sub->add_option("--out", out, "Output directory (overrides config and CPT_OUT_DIR)");
    sub->add_option("--workers", workers, "Worker threads for grid cells (overrides config and CPT_WORKERS)")
        ->check(CLI::PositiveNumber);
    sub->add_option("--seed", seed, "Root seed override");
    sub->add_flag("--quiet", quiet, "Suppress progress output");
  };
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain and freeze the model");
  auto* gen_data = app.add_subcommand("gen-data", "Generate the configured datasets as JSONL");
  auto* run = app.add_subcommand("run", "Run the method x shots x template x seed grid");
  auto* ablate = app.add_subcommand("ablate", "Run the CPT ablation sweep");
  auto* report = app.add_subcommand("report", "Merge results into table1.csv and table4.csv");
  for (auto* s : {pretrain, gen_data, run, ablate, report}) add_common(s);
  std::string results_dir;
  report->add_option("results_dir", results_dir, "Results directory (defaults to the configured output directory)");

  CLI11_PARSE(app, argc, argv);

  try {
    cpt::RunConfig cfg = config_path.empty() ? cpt::parse_config(nlohmann::json::object())
                                             : cpt::load_config(config_path);
    cpt::apply_overrides(cfg, seed, out, workers);
    cpt::Log log;
    if (quiet) log.out = nullptr;

    std::filesystem::path result;
    if (*pretrain) result = cpt::cmd_pretrain(cfg, log);
    else if (*gen_data) result = cpt::cmd_gen_data(cfg, log);
    else if (*run) result = cpt::cmd_run(cfg, log);
    else if (*ablate) result = cpt::cmd_ablate(cfg, log);
    else result = cpt::cmd_report(results_dir.empty() ? std::filesystem::path(cfg.out_dir) : std::filesystem::path(results_dir), log);
    std::cout << result.string() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
