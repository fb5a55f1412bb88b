#pragma once

// In-memory result of one experiment and its on-disk forms: a JSON record
// (structure, config snapshot, profile) and a metrics CSV (one row per
// evaluation and network).

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "duda/error.hpp"
#include "duda/inconsistency.hpp"
#include "duda/metrics.hpp"

namespace duda {

enum class Network { LT, LS, SS };

inline const char* to_string(Network n) {
  switch (n) {
    case Network::LT: return "LT";
    case Network::LS: return "LS";
    case Network::SS: return "SS";
  }
  return "?";
}

inline Network network_from_string(std::string_view s) {
  if (s == "LT") return Network::LT;
  if (s == "LS") return Network::LS;
  if (s == "SS") return Network::SS;
  throw ConfigError("unknown network '" + std::string(s) + "' (expected LT, LS or SS)");
}

// Checkmark columns of the ablation table.
struct AblationFlags {
  bool distillation = true;
  bool pre_adaptation = true;
  bool ce = true;
  bool kl = true;
  bool inconsistency = true;

  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

struct MetricRow {
  int iteration = 0;
  std::string stage;
  Network network = Network::SS;
  double miou = 0.0;
  double macc = 0.0;
  std::vector<double> class_iou;  // NaN for absent classes
};

// Teacher (LT) and student (SS) scores on the held-out set at the end of
// pre-adaptation, with the resulting disparity table.
struct DisparitySnapshot {
  int iteration = 0;
  ConfusionMatrix teacher;
  ConfusionMatrix student;
  DisparityReport report;
};

struct RunRecord {
  nlohmann::json config;  // snapshot sufficient to reproduce the run
  std::string preset;
  AblationFlags flags;
  std::uint64_t seed = 0;
  int num_classes = 0;
  std::vector<MetricRow> rows;
  std::vector<int> stage_ends;  // cumulative iteration at which each stage finished
  std::optional<InconsistencyProfile> profile;
  std::optional<DisparitySnapshot> disparity;
  std::map<Network, ConfusionMatrix> final_confusion;  // last evaluation of each network
  std::vector<std::string> checkpoints;
  int iterations_completed = 0;
  double wall_clock_seconds = 0.0;
  std::string software_version;
  bool complete = false;

  // Evaluation trace of one network, optionally restricted to a stage.
  std::vector<MetricRow> trace(Network n, std::string_view stage = {}) const {
    std::vector<MetricRow> out;
    for (const auto& r : rows)
      if (r.network == n && (stage.empty() || r.stage == stage)) out.push_back(r);
    return out;
  }

  std::optional<MetricRow> final_row(Network n) const {
    for (auto it = rows.rbegin(); it != rows.rend(); ++it)
      if (it->network == n) return *it;
    return std::nullopt;
  }
};

namespace detail {

inline nlohmann::json nan_to_null(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

inline double null_to_nan(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline nlohmann::json confusion_to_json(const ConfusionMatrix& cm) {
  auto rows = nlohmann::json::array();
  for (int t = 0; t < cm.num_classes(); ++t) {
    auto row = nlohmann::json::array();
    for (int p = 0; p < cm.num_classes(); ++p) row.push_back(cm.at(t, p));
    rows.push_back(row);
  }
  return rows;
}

inline ConfusionMatrix confusion_from_json(const nlohmann::json& j) {
  return ConfusionMatrix::from_rows(j.get<std::vector<std::vector<std::int64_t>>>());
}

}  // namespace detail

inline nlohmann::json profile_to_json(const InconsistencyProfile& p) {
  return {{"inconsistency", p.inconsistency}, {"normalized", p.normalized}, {"observations", p.observations}};
}

inline InconsistencyProfile profile_from_json(const nlohmann::json& j) {
  return {j.at("inconsistency").get<std::vector<double>>(), j.at("normalized").get<std::vector<double>>(),
          j.at("observations").get<std::vector<std::int64_t>>()};
}

inline nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json j;
  j["software_version"] = r.software_version;
  j["complete"] = r.complete;
  j["preset"] = r.preset;
  j["flags"] = {{"distillation", r.flags.distillation},
                {"pre_adaptation", r.flags.pre_adaptation},
                {"ce", r.flags.ce},
                {"kl", r.flags.kl},
                {"inconsistency", r.flags.inconsistency}};
  j["seed"] = r.seed;
  j["num_classes"] = r.num_classes;
  j["config"] = r.config;
  j["iterations_completed"] = r.iterations_completed;
  j["stage_ends"] = r.stage_ends;
  j["wall_clock_seconds"] = r.wall_clock_seconds;
  j["checkpoints"] = r.checkpoints;
  auto rows = nlohmann::json::array();
  for (const auto& m : r.rows) {
    auto ious = nlohmann::json::array();
    for (double v : m.class_iou) ious.push_back(detail::nan_to_null(v));
    rows.push_back({{"iteration", m.iteration},
                    {"stage", m.stage},
                    {"network", to_string(m.network)},
                    {"miou", m.miou},
                    {"macc", m.macc},
                    {"class_iou", ious}});
  }
  j["metrics"] = rows;
  nlohmann::json finals = nlohmann::json::object();
  for (const auto& [n, cm] : r.final_confusion) finals[to_string(n)] = detail::confusion_to_json(cm);
  j["final_confusion"] = finals;
  j["profile"] = r.profile ? profile_to_json(*r.profile) : nlohmann::json(nullptr);
  if (r.disparity) {
    auto table = nlohmann::json::array();
    for (const auto& row : r.disparity->report.rows)
      table.push_back({{"class", row.class_id},
                       {"teacher_iou", row.teacher_iou},
                       {"student_iou", row.student_iou},
                       {"disparity", row.disparity},
                       {"normalized_inconsistency", row.normalized_inconsistency}});
    j["disparity"] = {{"iteration", r.disparity->iteration},
                      {"teacher_confusion", detail::confusion_to_json(r.disparity->teacher)},
                      {"student_confusion", detail::confusion_to_json(r.disparity->student)},
                      {"table", table},
                      {"spearman", r.disparity->report.spearman ? nlohmann::json(*r.disparity->report.spearman)
                                                                : nlohmann::json(nullptr)}};
  } else {
    j["disparity"] = nullptr;
  }
  return j;
}

inline RunRecord record_from_json(const nlohmann::json& j) {
  try {
    RunRecord r;
    r.software_version = j.at("software_version").get<std::string>();
    r.complete = j.at("complete").get<bool>();
    r.preset = j.at("preset").get<std::string>();
    const auto& f = j.at("flags");
    r.flags = {f.at("distillation").get<bool>(), f.at("pre_adaptation").get<bool>(), f.at("ce").get<bool>(),
               f.at("kl").get<bool>(), f.at("inconsistency").get<bool>()};
    r.seed = j.at("seed").get<std::uint64_t>();
    r.num_classes = j.at("num_classes").get<int>();
    r.config = j.at("config");
    r.iterations_completed = j.at("iterations_completed").get<int>();
    r.stage_ends = j.at("stage_ends").get<std::vector<int>>();
    r.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
    r.checkpoints = j.at("checkpoints").get<std::vector<std::string>>();
    for (const auto& m : j.at("metrics")) {
      MetricRow row;
      row.iteration = m.at("iteration").get<int>();
      row.stage = m.at("stage").get<std::string>();
      row.network = network_from_string(m.at("network").get<std::string>());
      row.miou = m.at("miou").get<double>();
      row.macc = m.at("macc").get<double>();
      for (const auto& v : m.at("class_iou")) row.class_iou.push_back(detail::null_to_nan(v));
      r.rows.push_back(std::move(row));
    }
    for (const auto& [k, v] : j.at("final_confusion").items())
      r.final_confusion.emplace(network_from_string(k), detail::confusion_from_json(v));
    if (!j.at("profile").is_null()) r.profile = profile_from_json(j.at("profile"));
    if (!j.at("disparity").is_null()) {
      const auto& d = j.at("disparity");
      DisparitySnapshot snap;
      snap.iteration = d.at("iteration").get<int>();
      snap.teacher = detail::confusion_from_json(d.at("teacher_confusion"));
      snap.student = detail::confusion_from_json(d.at("student_confusion"));
      for (const auto& row : d.at("table"))
        snap.report.rows.push_back({row.at("class").get<int>(), row.at("teacher_iou").get<double>(),
                                    row.at("student_iou").get<double>(), row.at("disparity").get<double>(),
                                    row.at("normalized_inconsistency").get<double>()});
      if (!d.at("spearman").is_null()) snap.report.spearman = d.at("spearman").get<double>();
      r.disparity = std::move(snap);
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed run record: ") + e.what());
  }
}

inline RunRecord load_record(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open run record " + path);
  try {
    return record_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("cannot parse run record " + path + ": " + e.what());
  }
}

inline std::string format_fixed(double v, int digits = 6) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// Metric rows as CSV. Contains no timing data, so identical runs produce
// identical bytes.
inline std::string metrics_csv(const RunRecord& r) {
  std::ostringstream os;
  os << "iteration,stage,network,miou,macc";
  for (int c = 0; c < r.num_classes; ++c) os << ",iou_" << c;
  os << '\n';
  for (const auto& m : r.rows) {
    os << m.iteration << ',' << m.stage << ',' << to_string(m.network) << ',' << format_fixed(m.miou) << ','
       << format_fixed(m.macc);
    for (double v : m.class_iou) os << ',' << format_fixed(v);
    os << '\n';
  }
  return os.str();
}

}  // namespace duda
