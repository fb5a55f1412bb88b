#pragma once

// Experiment configuration: strict JSON schema, validation and conversion to
// the objects run_experiment consumes.

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "duda/error.hpp"
#include "duda/experiment.hpp"
#include "duda/synth_data.hpp"

namespace duda {

inline constexpr int kConfigSchemaVersion = 1;

struct BenchmarkConfig {
  SceneSpec scene = SceneSpec::default_spec();
  DomainShift shift = DomainShift::default_shift();
  int source_size = 200;
  int target_size = 200;
  int eval_size = 50;

  friend bool operator==(const BenchmarkConfig&, const BenchmarkConfig&) = default;
};

struct TrainConfig {
  int schema_version = kConfigSchemaVersion;
  std::string preset = "full_duda";
  std::uint64_t seed = 1;
  BenchmarkConfig benchmark;
  std::optional<std::string> large_arch;  // overrides the preset's LT/LS architecture
  std::optional<std::string> small_arch;  // overrides the preset's SS architecture
  PresetParams budget;
  std::optional<std::vector<StageConfig>> stages;  // replaces the preset's stage list
  OptimConfig optimizer;
  PretrainConfig pretrain;
  double presence_ratio = kPresenceRatio;
  int eval_every = 100;
  std::string output_dir;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

namespace detail {

// Reads fields of one JSON object, rejecting unknown keys and wrong types
// with the dotted path of the offending field.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("field '" + name() + "': expected an object");
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    out = convert<T>(*it, field(key));
  }

  template <typename T>
  void read(const std::string& key, std::optional<T>& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return;
    out = convert<T>(*it, field(key));
  }

  const nlohmann::json* child(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown field '" + field(it.key()) + "'");
  }

 private:
  std::string name() const { return path_.empty() ? "<root>" : path_; }

  template <typename T>
  static T convert(const nlohmann::json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("field '" + where + "': expected true or false");
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_unsigned()) throw ConfigError("field '" + where + "': expected a non-negative integer");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("field '" + where + "': expected an integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("field '" + where + "': expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("field '" + where + "': expected a string");
    }
    try {
      return v.get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("field '" + where + "': wrong type");
    }
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline Network read_network(FieldReader& r, const std::string& key, Network fallback) {
  std::optional<std::string> s;
  r.read(key, s);
  if (!s) return fallback;
  try {
    return network_from_string(*s);
  } catch (const ConfigError& e) {
    throw ConfigError("field '" + r.field(key) + "': " + e.what());
  }
}

inline StageConfig stage_from_json(const nlohmann::json& j, const std::string& path, const PresetParams& defaults) {
  FieldReader r(j, path);
  std::string kind;
  r.read("kind", kind);
  if (kind.empty()) throw ConfigError("field '" + r.field("kind") + "' is required");
  StageConfig s;
  try {
    s = stage(defaults, stage_kind_from_string(kind), 0);
  } catch (const ConfigError& e) {
    throw ConfigError("field '" + r.field("kind") + "': " + e.what());
  }
  r.read("iterations", s.iterations);
  if (const auto* l = r.child("losses")) {
    FieldReader lr(*l, r.field("losses"));
    lr.read("ce_src", s.losses.ce_src);
    lr.read("ce_tgt", s.losses.ce_tgt);
    lr.read("kl", s.losses.kl);
    lr.finish();
  }
  r.read("use_inconsistency_weights", s.use_inconsistency_weights);
  s.pseudo_teacher = read_network(r, "pseudo_teacher", s.pseudo_teacher);
  s.kl_teacher = read_network(r, "kl_teacher", s.kl_teacher);
  r.read("ema_alpha", s.ema_alpha);
  r.read("source_batch", s.source_batch);
  r.read("target_batch", s.target_batch);
  r.read("train_small", s.train_small);
  r.read("train_large", s.train_large);
  s.ema_student = read_network(r, "ema_student", s.ema_student);
  r.finish();
  try {
    s.validate();
  } catch (const ConfigError& e) {
    throw ConfigError("field '" + path + "': " + e.what());
  }
  return s;
}

inline nlohmann::json stage_to_json(const StageConfig& s) {
  return {{"kind", to_string(s.kind)},
          {"iterations", s.iterations},
          {"losses", {{"ce_src", s.losses.ce_src}, {"ce_tgt", s.losses.ce_tgt}, {"kl", s.losses.kl}}},
          {"use_inconsistency_weights", s.use_inconsistency_weights},
          {"pseudo_teacher", to_string(s.pseudo_teacher)},
          {"kl_teacher", to_string(s.kl_teacher)},
          {"ema_alpha", s.ema_alpha},
          {"source_batch", s.source_batch},
          {"target_batch", s.target_batch},
          {"train_small", s.train_small},
          {"train_large", s.train_large},
          {"ema_student", to_string(s.ema_student)}};
}

// 1-based line and column of a byte offset.
inline std::pair<std::size_t, std::size_t> line_col(const std::string& text, std::size_t offset) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < offset && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

}  // namespace detail

inline void TrainConfig::validate() const {
  if (schema_version != kConfigSchemaVersion)
    throw ConfigError("field 'schema_version': unsupported version " + std::to_string(schema_version) + " (expected " +
                      std::to_string(kConfigSchemaVersion) + ")");
  benchmark.scene.validate();
  benchmark.shift.validate();
  if (benchmark.source_size < 1) throw ConfigError("field 'benchmark.source_size' must be positive");
  if (benchmark.target_size < 1) throw ConfigError("field 'benchmark.target_size' must be positive");
  if (benchmark.eval_size < 1) throw ConfigError("field 'benchmark.eval_size' must be positive");
  if (budget.pre_iterations < 0) throw ConfigError("field 'budget.pre_iterations' must be non-negative");
  if (budget.fine_iterations < 0) throw ConfigError("field 'budget.fine_iterations' must be non-negative");
  if (!(budget.ema_alpha > 0.0 && budget.ema_alpha <= 1.0)) throw ConfigError("ema_alpha out of (0,1]");
  if (budget.source_batch < 1) throw ConfigError("field 'training.source_batch' must be positive");
  if (budget.target_batch < 1) throw ConfigError("field 'training.target_batch' must be positive");
  if (eval_every < 1) throw ConfigError("field 'evaluation.every' must be positive");
  if (pretrain.iterations < 0) throw ConfigError("field 'pretrain.iterations' must be non-negative");
  if (pretrain.batch < 1) throw ConfigError("field 'pretrain.batch' must be positive");
  if (!(presence_ratio >= 0.0 && presence_ratio < 1.0)) throw ConfigError("field 'training.presence_ratio' out of [0,1)");
  optimizer.validate();
  const int c = benchmark.scene.num_classes();
  if (large_arch) architecture_by_name(*large_arch, c);
  if (small_arch) architecture_by_name(*small_arch, c);
  if (stages) {
    ExperimentPreset custom{"custom", "", "large", "small", *stages, {}};
    custom.validate();
  } else {
    find_preset(preset, budget);
  }
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  detail::FieldReader r(j, "");
  r.read("schema_version", cfg.schema_version);
  if (!j.contains("schema_version")) throw ConfigError("field 'schema_version' is required");
  r.read("preset", cfg.preset);
  r.read("seed", cfg.seed);
  r.read("output_dir", cfg.output_dir);
  if (const auto* b = r.child("benchmark")) {
    detail::FieldReader br(*b, "benchmark");
    auto& sc = cfg.benchmark.scene;
    br.read("seed", sc.seed);
    br.read("height", sc.height);
    br.read("width", sc.width);
    br.read("num_shapes", sc.num_shapes);
    br.read("class_frequencies", sc.class_frequencies);
    std::optional<std::vector<std::string>> kinds;
    br.read("shape_kinds", kinds);
    if (kinds) {
      sc.shape_kinds.clear();
      for (const auto& k : *kinds) {
        try {
          sc.shape_kinds.push_back(shape_kind_from_string(k));
        } catch (const ConfigError& e) {
          throw ConfigError("field 'benchmark.shape_kinds': " + std::string(e.what()));
        }
      }
    }
    br.read("source_size", cfg.benchmark.source_size);
    br.read("target_size", cfg.benchmark.target_size);
    br.read("eval_size", cfg.benchmark.eval_size);
    if (const auto* s = br.child("shift")) {
      detail::FieldReader sr(*s, "benchmark.shift");
      sr.read("scale", cfg.benchmark.shift.scale);
      sr.read("bias", cfg.benchmark.shift.bias);
      sr.read("noise_sigma", cfg.benchmark.shift.noise_sigma);
      sr.read("texture_amplitude", cfg.benchmark.shift.texture_amplitude);
      sr.finish();
    }
    br.finish();
  }
  if (const auto* m = r.child("models")) {
    detail::FieldReader mr(*m, "models");
    mr.read("large", cfg.large_arch);
    mr.read("small", cfg.small_arch);
    mr.finish();
  }
  if (const auto* b = r.child("budget")) {
    detail::FieldReader br(*b, "budget");
    br.read("pre_iterations", cfg.budget.pre_iterations);
    br.read("fine_iterations", cfg.budget.fine_iterations);
    br.finish();
  }
  if (const auto* t = r.child("training")) {
    detail::FieldReader tr(*t, "training");
    tr.read("ema_alpha", cfg.budget.ema_alpha);
    tr.read("source_batch", cfg.budget.source_batch);
    tr.read("target_batch", cfg.budget.target_batch);
    tr.read("presence_ratio", cfg.presence_ratio);
    tr.finish();
  }
  if (const auto* o = r.child("optimizer")) {
    detail::FieldReader orr(*o, "optimizer");
    std::optional<std::string> kind;
    orr.read("kind", kind);
    if (kind) {
      try {
        cfg.optimizer.kind = optimizer_kind_from_string(*kind);
      } catch (const ConfigError& e) {
        throw ConfigError("field 'optimizer.kind': " + std::string(e.what()));
      }
    }
    orr.read("learning_rate", cfg.optimizer.learning_rate);
    orr.read("momentum", cfg.optimizer.momentum);
    orr.read("beta1", cfg.optimizer.beta1);
    orr.read("beta2", cfg.optimizer.beta2);
    orr.read("epsilon", cfg.optimizer.epsilon);
    orr.read("weight_decay", cfg.optimizer.weight_decay);
    orr.finish();
  }
  if (const auto* p = r.child("pretrain")) {
    detail::FieldReader pr(*p, "pretrain");
    pr.read("iterations", cfg.pretrain.iterations);
    pr.read("batch", cfg.pretrain.batch);
    pr.finish();
  }
  if (const auto* e = r.child("evaluation")) {
    detail::FieldReader er(*e, "evaluation");
    er.read("every", cfg.eval_every);
    er.finish();
  }
  if (const auto* s = r.child("stages"); s && !s->is_null()) {
    if (!s->is_array()) throw ConfigError("field 'stages': expected a list");
    std::vector<StageConfig> stages;
    for (std::size_t i = 0; i < s->size(); ++i)
      stages.push_back(detail::stage_from_json((*s)[i], "stages[" + std::to_string(i) + "]", cfg.budget));
    cfg.stages = std::move(stages);
  }
  r.finish();
  cfg.validate();
  return cfg;
}

inline nlohmann::json to_json(const TrainConfig& cfg) {
  const auto& sc = cfg.benchmark.scene;
  std::vector<std::string> kinds;
  for (auto k : sc.shape_kinds) kinds.emplace_back(to_string(k));
  nlohmann::json j = {
      {"schema_version", cfg.schema_version},
      {"preset", cfg.preset},
      {"seed", cfg.seed},
      {"output_dir", cfg.output_dir},
      {"benchmark",
       {{"seed", sc.seed},
        {"height", sc.height},
        {"width", sc.width},
        {"num_shapes", sc.num_shapes},
        {"class_frequencies", sc.class_frequencies},
        {"shape_kinds", kinds},
        {"source_size", cfg.benchmark.source_size},
        {"target_size", cfg.benchmark.target_size},
        {"eval_size", cfg.benchmark.eval_size},
        {"shift",
         {{"scale", cfg.benchmark.shift.scale},
          {"bias", cfg.benchmark.shift.bias},
          {"noise_sigma", cfg.benchmark.shift.noise_sigma},
          {"texture_amplitude", cfg.benchmark.shift.texture_amplitude}}}}},
      {"models",
       {{"large", cfg.large_arch ? nlohmann::json(*cfg.large_arch) : nlohmann::json(nullptr)},
        {"small", cfg.small_arch ? nlohmann::json(*cfg.small_arch) : nlohmann::json(nullptr)}}},
      {"budget", {{"pre_iterations", cfg.budget.pre_iterations}, {"fine_iterations", cfg.budget.fine_iterations}}},
      {"training",
       {{"ema_alpha", cfg.budget.ema_alpha},
        {"source_batch", cfg.budget.source_batch},
        {"target_batch", cfg.budget.target_batch},
        {"presence_ratio", cfg.presence_ratio}}},
      {"optimizer",
       {{"kind", to_string(cfg.optimizer.kind)},
        {"learning_rate", cfg.optimizer.learning_rate},
        {"momentum", cfg.optimizer.momentum},
        {"beta1", cfg.optimizer.beta1},
        {"beta2", cfg.optimizer.beta2},
        {"epsilon", cfg.optimizer.epsilon},
        {"weight_decay", cfg.optimizer.weight_decay}}},
      {"pretrain", {{"iterations", cfg.pretrain.iterations}, {"batch", cfg.pretrain.batch}}},
      {"evaluation", {{"every", cfg.eval_every}}},
  };
  if (cfg.stages) {
    auto arr = nlohmann::json::array();
    for (const auto& s : *cfg.stages) arr.push_back(detail::stage_to_json(s));
    j["stages"] = arr;
  } else {
    j["stages"] = nullptr;
  }
  return j;
}

inline TrainConfig parse_config(const std::string& text, const std::string& origin = "<config>") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const auto [line, col] = detail::line_col(text, e.byte == 0 ? 0 : e.byte - 1);
    std::istringstream lines(text);
    std::string content;
    for (std::size_t i = 0; i < line && std::getline(lines, content); ++i) {
    }
    throw ConfigError(origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": parse error near '" +
                      content + "'");
  }
  return config_from_json(j);
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

inline Benchmark make_benchmark(const TrainConfig& cfg) {
  return build_benchmark(cfg.benchmark.scene, cfg.benchmark.shift, cfg.benchmark.source_size,
                         cfg.benchmark.target_size, cfg.benchmark.eval_size);
}

// The preset a config describes, with budgets, architecture overrides and an
// explicit stage list applied.
inline ExperimentPreset resolve_preset(const TrainConfig& cfg) {
  ExperimentPreset p;
  if (cfg.stages) {
    p = {"custom", "explicit stage list", "large", "small", *cfg.stages, {}};
    p.flags.pre_adaptation = false;
    p.flags.ce = p.flags.kl = p.flags.inconsistency = false;
    for (const auto& s : *cfg.stages) {
      if (s.kind == StageKind::pre_adaptation && s.train_small) p.flags.pre_adaptation = true;
      if (s.kind == StageKind::fine_tuning) {
        p.flags.ce = p.flags.ce || s.losses.ce_tgt;
        p.flags.kl = p.flags.kl || s.losses.kl;
        p.flags.inconsistency = p.flags.inconsistency || s.use_inconsistency_weights;
      }
    }
  } else {
    p = find_preset(cfg.preset, cfg.budget);
  }
  if (cfg.large_arch) p.large_arch = *cfg.large_arch;
  if (cfg.small_arch) p.small_arch = *cfg.small_arch;
  p.validate();
  return p;
}

inline RunOptions run_options(const TrainConfig& cfg) {
  RunOptions o;
  o.optim = cfg.optimizer;
  o.pretrain = cfg.pretrain;
  o.eval_every = cfg.eval_every;
  o.presence_ratio = cfg.presence_ratio;
  o.config_snapshot = to_json(cfg);
  return o;
}

}  // namespace duda
