#include <csignal>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "duda/commands.hpp"

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

duda::TrainConfig base_config(const std::string& path, const std::string& preset, long long seed) {
  duda::TrainConfig cfg = path.empty() ? duda::TrainConfig{} : duda::load_config(path);
  if (!preset.empty()) {
    cfg.preset = preset;
    cfg.stages.reset();
  }
  if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
  cfg.validate();
  return cfg;
}

std::vector<std::string> split_commas(const std::vector<std::string>& items) {
  std::vector<std::string> out;
  for (const auto& item : items) {
    std::size_t start = 0;
    while (start <= item.size()) {
      const auto end = item.find(',', start);
      const auto part = item.substr(start, end == std::string::npos ? std::string::npos : end - start);
      if (!part.empty()) out.push_back(part);
      if (end == std::string::npos) break;
      start = end + 1;
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Three-network self-training with distillation for domain-adaptive segmentation"};
  app.require_subcommand(1);

  std::string config_path, out_dir, preset;
  long long seed = -1;
  int seeds = 1;
  std::vector<std::string> presets, records;
  std::string checkpoint;

  auto* run = app.add_subcommand("run", "run one experiment");
  run->add_option("--config", config_path, "config file (JSON)");
  run->add_option("--seed", seed, "override the config seed");
  run->add_option("--out", out_dir, "output directory");
  run->add_option("--preset", preset, "override the config preset");

  auto* ablation = app.add_subcommand("ablation", "run several presets over several seeds");
  ablation->add_option("--config", config_path, "config file (JSON)");
  ablation->add_option("--seed", seed, "first seed");
  ablation->add_option("--seeds", seeds, "number of seeds per preset");
  ablation->add_option("--out", out_dir, "output directory")->required();
  ablation->add_option("--preset", presets, "preset name (repeat or comma-separate)")->required();

  auto* report = app.add_subcommand("report", "plots and tables from run records");
  report->add_option("records", records, "record.json files");
  report->add_option("--out", out_dir, "report directory")->required();

  auto* gen = app.add_subcommand("gen-data", "export the synthetic benchmark as images");
  gen->add_option("--config", config_path, "config file (JSON)");
  gen->add_option("--seed", seed, "override the benchmark seed");
  gen->add_option("--out", out_dir, "output directory")->required();

  auto* inspect = app.add_subcommand("inspect-checkpoint", "print a checkpoint summary");
  inspect->add_option("path", checkpoint, "checkpoint file")->required();

  app.add_subcommand("presets", "list the available presets");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cout << nlohmann::json{{"error", {{"kind", "usage_error"}, {"message", e.what()}, {"exit_code", 2}}}}.dump()
              << '\n';
    return 2;
  }

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  try {
    if (*run) {
      const auto cfg = base_config(config_path, preset, seed);
      const auto dir = !out_dir.empty() ? out_dir : !cfg.output_dir.empty() ? cfg.output_dir : duda::default_output_dir(cfg);
      const auto art = duda::cmd_run(cfg, dir, [] { return g_stop.load(); });
      if (!art.record.complete) throw duda::Error("interrupted; partial record at " + art.record_path);
      const auto ss = art.record.final_row(duda::Network::SS);
      std::cout << nlohmann::json{{"record", art.record_path},
                                  {"metrics", art.metrics_path},
                                  {"classes", art.classes_path},
                                  {"ss_miou", ss ? ss->miou : 0.0}}
                       .dump()
                << '\n';
    } else if (*ablation) {
      const auto cfg = base_config(config_path, "", seed);
      const auto rows = duda::cmd_ablation(cfg, split_commas(presets), seeds, out_dir);
      std::cout << duda::ablation_table(rows);
      for (const auto& r : rows)
        if (!r.errors.empty()) return 3;
    } else if (*report) {
      for (const auto& p : duda::cmd_report(records, out_dir)) std::cout << p << '\n';
    } else if (*gen) {
      auto cfg = base_config(config_path, "", -1);
      if (seed >= 0) cfg.benchmark.scene.seed = static_cast<std::uint64_t>(seed);
      const auto m = duda::cmd_gen_data(cfg, out_dir);
      std::cout << nlohmann::json{{"out", out_dir},
                                  {"source", m["source"].size()},
                                  {"target", m["target"].size()},
                                  {"eval", m["eval"].size()}}
                       .dump()
                << '\n';
    } else if (*inspect) {
      std::cout << duda::cmd_inspect_checkpoint(checkpoint).dump(2) << '\n';
    } else {
      for (const auto& p : duda::preset_registry()) std::cout << p.name << "\t" << p.description << '\n';
    }
  } catch (const std::exception& e) {
    std::cout << duda::error_object(e).dump() << '\n';
    duda::log(duda::LogLevel::error, e.what());
    return duda::exit_code_for(e);
  }
  return 0;
}
