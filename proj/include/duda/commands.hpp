#pragma once

// Implementation of the command-line verbs. Each command works on an output
// directory it owns for its duration (guarded by a lock file).

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "duda/checkpoint.hpp"
#include "duda/config.hpp"
#include "duda/error.hpp"
#include "duda/experiment.hpp"
#include "duda/export.hpp"
#include "duda/report.hpp"
#include "duda/run_record.hpp"

namespace duda {

enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };

// Verbosity comes from DUDA_LOG_LEVEL (error, warn, info, debug); default info.
inline LogLevel log_level() {
  const char* v = std::getenv("DUDA_LOG_LEVEL");
  if (!v) return LogLevel::info;
  const std::string s(v);
  if (s == "error") return LogLevel::error;
  if (s == "warn") return LogLevel::warn;
  if (s == "debug") return LogLevel::debug;
  return LogLevel::info;
}

inline void log(LogLevel level, const std::string& msg) {
  static const char* tags[] = {"error", "warn", "info", "debug"};
  if (level <= log_level()) std::cerr << "[" << tags[static_cast<int>(level)] << "] " << msg << '\n';
}

class DirectoryLock {
 public:
  explicit DirectoryLock(const std::string& dir) {
    std::filesystem::create_directories(dir);
    path_ = (std::filesystem::path(dir) / ".lock").string();
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f)
      throw IoError("output directory " + dir + " is locked by another run (remove " + path_ + " if that run is gone)");
    std::fprintf(f, "locked\n");
    std::fclose(f);
  }
  ~DirectoryLock() { std::remove(path_.c_str()); }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::string path_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp);
    os << text;
    if (!os) throw IoError("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline int exit_code_for(const std::exception& e) {
  return dynamic_cast<const ConfigError*>(&e) ? 2 : 3;
}

inline nlohmann::json error_object(const std::exception& e) {
  const auto* de = dynamic_cast<const Error*>(&e);
  return {{"error", {{"kind", de ? de->kind() : "runtime_error"}, {"message", e.what()}, {"exit_code", exit_code_for(e)}}}};
}

struct RunArtifacts {
  RunRecord record;
  std::string record_path;
  std::string metrics_path;
  std::string classes_path;
};

inline std::string default_output_dir(const TrainConfig& cfg) {
  return "runs/" + (cfg.stages ? std::string("custom") : cfg.preset) + "-seed" + std::to_string(cfg.seed);
}

// Runs one experiment and writes record.json, metrics.csv, classes.csv,
// config.json and stage-end checkpoints into `out_dir`. The record is
// rewritten after every evaluation so an interrupted run leaves a loadable,
// incomplete record behind.
inline RunArtifacts cmd_run(const TrainConfig& cfg, const std::string& out_dir, std::function<bool()> stop = {},
                            std::shared_ptr<PretrainCache> cache = {}) {
  namespace fs = std::filesystem;
  cfg.validate();
  DirectoryLock lock(out_dir);
  const fs::path dir(out_dir);
  fs::create_directories(dir / "checkpoints");
  write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");

  const auto preset = resolve_preset(cfg);
  log(LogLevel::info, "run " + preset.name + " seed " + std::to_string(cfg.seed) + " -> " + out_dir);
  const auto bench = make_benchmark(cfg);
  auto opts = run_options(cfg);
  opts.pretrain_cache = std::move(cache);
  opts.stop_requested = std::move(stop);
  RunArtifacts out;
  out.record_path = (dir / "record.json").string();
  out.metrics_path = (dir / "metrics.csv").string();
  out.classes_path = (dir / "classes.csv").string();
  auto persist = [&](const RunRecord& r) {
    write_text(out.record_path, to_json(r).dump(2) + "\n");
    write_text(out.metrics_path, metrics_csv(r));
  };
  std::size_t logged = 0;
  opts.on_progress = [&](const RunRecord& r) {
    persist(r);
    for (; logged < r.rows.size(); ++logged) {
      const auto& m = r.rows[logged];
      log(LogLevel::debug, "iteration " + std::to_string(m.iteration) + " " + to_string(m.network) + " mIoU " +
                               format_fixed(m.miou * 100.0, 2));
    }
    if (const auto ss = r.final_row(Network::SS))
      log(LogLevel::info, "iteration " + std::to_string(r.iterations_completed) + " SS mIoU " +
                              format_fixed(ss->miou * 100.0, 2));
  };
  opts.on_checkpoint = [&](const Trio<float>& trio, int stage, int iteration) {
    std::vector<std::string> paths;
    for (auto n : {Network::LT, Network::LS, Network::SS}) {
      const auto rel = "checkpoints/stage" + std::to_string(stage) + "_" + to_string(n) + ".ckpt";
      save_checkpoint(make_checkpoint(trio.get(n), to_string(n), iteration), (dir / rel).string());
      paths.push_back(rel);
    }
    return paths;
  };
  out.record = run_experiment(preset, bench, cfg.seed, opts);
  persist(out.record);
  if (!out.record.complete) {
    log(LogLevel::warn, "run stopped early; record marked incomplete");
    return out;
  }
  const auto names = std::vector<std::string>{};
  std::ostringstream classes;
  write_class_csv(classes, out.record.final_confusion.at(Network::SS),
                  out.record.profile ? &*out.record.profile : nullptr, names);
  write_text(out.classes_path, classes.str());
  return out;
}

struct AblationRow {
  std::string preset;
  AblationFlags flags;
  std::vector<double> miou;  // final SS mIoU per completed seed
  std::vector<double> macc;
  std::vector<std::string> errors;
};

inline std::pair<double, double> mean_spread(const std::vector<double>& v) {
  if (v.empty()) return {std::nan(""), std::nan("")};
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  auto mark = [](bool b) { return b ? "x" : "-"; };
  auto cell = [](const std::vector<double>& v) {
    const auto [m, s] = mean_spread(v);
    if (std::isnan(m)) return std::string("n/a");
    return format_fixed(m * 100.0, 2) + " +- " + format_fixed(s * 100.0, 2);
  };
  std::ostringstream os;
  os << "| preset | distillation | pre-adaptation | CE | KL | inconsistency | seeds | SS mIoU | SS mAcc |\n"
     << "|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows)
    os << "| " << r.preset << " | " << mark(r.flags.distillation) << " | " << mark(r.flags.pre_adaptation) << " | "
       << mark(r.flags.ce) << " | " << mark(r.flags.kl) << " | " << mark(r.flags.inconsistency) << " | "
       << r.miou.size() << " | " << cell(r.miou) << " | " << cell(r.macc) << " |\n";
  return os.str();
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "preset,distillation,pre_adaptation,ce,kl,inconsistency,seeds,miou_mean,miou_spread,macc_mean,macc_spread\n";
  for (const auto& r : rows) {
    const auto [mm, ms] = mean_spread(r.miou);
    const auto [am, as] = mean_spread(r.macc);
    os << r.preset << ',' << r.flags.distillation << ',' << r.flags.pre_adaptation << ',' << r.flags.ce << ','
       << r.flags.kl << ',' << r.flags.inconsistency << ',' << r.miou.size() << ',' << format_fixed(mm) << ','
       << format_fixed(ms) << ',' << format_fixed(am) << ',' << format_fixed(as) << '\n';
  }
  return os.str();
}

// Runs every preset for `seeds` consecutive seeds starting at cfg.seed.
// A failing run is reported and the remaining runs continue.
inline std::vector<AblationRow> cmd_ablation(const TrainConfig& base, const std::vector<std::string>& presets,
                                             int seeds, const std::string& out_dir) {
  if (presets.size() < 2) throw ConfigError("ablation needs at least two presets");
  if (seeds < 1) throw ConfigError("--seeds must be at least 1");
  for (const auto& p : presets) find_preset(p, base.budget);
  namespace fs = std::filesystem;
  DirectoryLock lock(out_dir);
  auto cache = std::make_shared<PretrainCache>();
  std::vector<AblationRow> rows;
  for (const auto& name : presets) {
    AblationRow row;
    row.preset = name;
    TrainConfig cfg = base;
    cfg.preset = name;
    cfg.stages.reset();
    row.flags = resolve_preset(cfg).flags;
    for (int k = 0; k < seeds; ++k) {
      cfg.seed = base.seed + static_cast<std::uint64_t>(k);
      const auto dir = (fs::path(out_dir) / name / ("seed" + std::to_string(cfg.seed))).string();
      try {
        const auto art = cmd_run(cfg, dir, {}, cache);
        const auto s = miou_macc(art.record.final_confusion.at(Network::SS));
        row.miou.push_back(s.miou);
        row.macc.push_back(s.macc);
      } catch (const std::exception& e) {
        log(LogLevel::error, name + " seed " + std::to_string(cfg.seed) + ": " + e.what());
        row.errors.push_back(e.what());
      }
    }
    rows.push_back(std::move(row));
  }
  write_text(fs::path(out_dir) / "ablation.md", ablation_table(rows));
  write_text(fs::path(out_dir) / "ablation.csv", ablation_csv(rows));
  return rows;
}

inline std::vector<std::string> cmd_report(const std::vector<std::string>& record_paths, const std::string& out_dir) {
  if (record_paths.empty()) throw ConfigError("report needs at least one run record");
  std::vector<RunRecord> records;
  for (const auto& p : record_paths) records.push_back(load_record(p));
  DirectoryLock lock(out_dir);
  return write_report(records, out_dir);
}

inline nlohmann::json cmd_gen_data(const TrainConfig& cfg, const std::string& out_dir) {
  cfg.benchmark.scene.validate();
  cfg.benchmark.shift.validate();
  DirectoryLock lock(out_dir);
  return export_benchmark(make_benchmark(cfg), out_dir);
}

inline nlohmann::json cmd_inspect_checkpoint(const std::string& path) {
  const auto c = load_checkpoint(path);
  auto groups = nlohmann::json::array();
  for (const auto& g : c.groups) groups.push_back({{"name", g.name}, {"shape", g.shape}});
  double sq = 0.0;
  for (double v : c.values) sq += v * v;
  return {{"path", path},          {"network", c.network},         {"iteration", c.iteration},
          {"architecture", c.architecture}, {"height", c.height}, {"width", c.width},
          {"parameters", c.values.size()},  {"l2_norm", std::sqrt(sq)}, {"groups", groups}};
}

}  // namespace duda
