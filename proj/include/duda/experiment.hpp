#pragma once

// Named experiment presets and the driver that runs one of them on a
// benchmark, producing a RunRecord.

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <tuple>
#include <string>
#include <vector>

#include "duda/error.hpp"
#include "duda/run_record.hpp"
#include "duda/trainer.hpp"
#include "duda/version.hpp"

namespace duda {

struct ExperimentPreset {
  std::string name;
  std::string description;
  std::string large_arch = "large";  // LT and LS
  std::string small_arch = "small";  // SS
  std::vector<StageConfig> stages;
  AblationFlags flags;

  void validate() const {
    if (name.empty()) throw ConfigError("preset has no name");
    if (stages.empty()) throw ConfigError("preset '" + name + "' has no stages");
    bool profile_available = false;
    for (const auto& s : stages) {
      s.validate();
      if (s.kind == StageKind::pre_adaptation && s.train_small) profile_available = true;
      if (s.use_inconsistency_weights && !profile_available)
        throw ConfigError("preset '" + name + "' uses inconsistency weights without a preceding pre-adaptation of SS");
    }
  }

  int total_iterations() const {
    int n = 0;
    for (const auto& s : stages) n += s.iterations;
    return n;
  }
};

// Shared knobs from which the registry builds its presets.
struct PresetParams {
  int pre_iterations = 1500;
  int fine_iterations = 3000;
  double ema_alpha = 0.999;
  int source_batch = 4;
  int target_batch = 4;

  friend bool operator==(const PresetParams&, const PresetParams&) = default;
};

namespace detail {

inline StageConfig stage(const PresetParams& p, StageKind kind, int iterations) {
  StageConfig s;
  s.kind = kind;
  s.iterations = iterations;
  s.ema_alpha = p.ema_alpha;
  s.source_batch = p.source_batch;
  s.target_batch = p.target_batch;
  if (kind == StageKind::fine_tuning) s.pseudo_teacher = s.kl_teacher = Network::LS;
  return s;
}

// Small-only mean-teacher training: LT is the EMA of SS, LS is unused.
inline ExperimentPreset small_only(const PresetParams& p, std::string name, std::string description,
                                   std::string small_arch, int iterations) {
  auto s = stage(p, StageKind::pre_adaptation, iterations);
  s.train_large = false;
  s.ema_student = Network::SS;
  s.losses.kl = false;
  return {std::move(name), std::move(description), small_arch, small_arch, {s}, {false, false, true, false, false}};
}

// Large networks are pre-adapted alone, then SS is trained from scratch by
// fine-tuning for the whole small-student budget.
inline ExperimentPreset fine_tune_only(const PresetParams& p, std::string name, std::string description, bool kl) {
  auto pre = stage(p, StageKind::pre_adaptation, p.pre_iterations);
  pre.train_small = false;
  auto fine = stage(p, StageKind::fine_tuning, p.pre_iterations + p.fine_iterations);
  fine.losses.kl = kl;
  return {std::move(name), std::move(description), "large", "small", {pre, fine}, {true, false, true, kl, false}};
}

inline ExperimentPreset two_stage(const PresetParams& p, std::string name, std::string description, bool weights,
                                  Network pre_teacher = Network::LT, Network fine_teacher = Network::LS,
                                  std::string small_arch = "small") {
  auto pre = stage(p, StageKind::pre_adaptation, p.pre_iterations);
  pre.pseudo_teacher = pre.kl_teacher = pre_teacher;
  auto fine = stage(p, StageKind::fine_tuning, p.fine_iterations);
  fine.pseudo_teacher = fine.kl_teacher = fine_teacher;
  fine.use_inconsistency_weights = weights;
  return {std::move(name), std::move(description), "large", std::move(small_arch), {pre, fine},
          {true, true, true, true, weights}};
}

}  // namespace detail

inline std::vector<ExperimentPreset> preset_registry(const PresetParams& p = {}) {
  using detail::stage;
  const int total = p.pre_iterations + p.fine_iterations;
  std::vector<ExperimentPreset> r;
  r.push_back(detail::small_only(p, "no_distillation", "SMALL mean-teacher self-training, no large networks", "small",
                                 p.pre_iterations));
  r.push_back(detail::small_only(p, "self_finetune_baseline",
                                 "SMALL mean-teacher self-training extended to the full iteration budget", "small",
                                 total));
  r.push_back(detail::fine_tune_only(p, "ft_ce_only", "fine-tuning only from pre-adapted large networks, CE terms",
                                     false));
  r.push_back(detail::fine_tune_only(p, "vanilla_kd",
                                     "distillation from pre-adapted large networks with uniform weights, CE terms",
                                     false));
  r.push_back(detail::fine_tune_only(p, "ft_ce_kl", "fine-tuning only from pre-adapted large networks, CE + KL", true));

  {
    auto pre = stage(p, StageKind::pre_adaptation, p.pre_iterations);
    r.push_back({"preadapt_only", "joint pre-adaptation of all three networks, no fine-tuning", "large", "small",
                 {pre}, {true, true, false, false, false}});
    pre.losses.kl = false;
    auto fine = stage(p, StageKind::fine_tuning, p.fine_iterations);
    r.push_back({"preadapt_no_kl", "pre-adaptation without KL for SS, then uniform CE + KL fine-tuning", "large",
                 "small", {pre, fine}, {true, true, true, true, false}});
  }

  r.push_back(detail::two_stage(p, "preadapt_ce_kl", "pre-adaptation then uniform CE + KL fine-tuning", false));
  r.push_back(detail::two_stage(p, "full_duda", "pre-adaptation then inconsistency-balanced fine-tuning", true));
  r.push_back(detail::two_stage(p, "teacher_lt_ls", "teachers: LT in pre-adaptation, LS in fine-tuning", true,
                                Network::LT, Network::LS));
  r.push_back(detail::two_stage(p, "teacher_ls_lt", "teachers: LS in pre-adaptation, LT in fine-tuning", true,
                                Network::LS, Network::LT));
  r.push_back(detail::two_stage(p, "teacher_lt_lt", "LT teaches SS in both stages", true, Network::LT, Network::LT));
  r.push_back(detail::two_stage(p, "teacher_ls_ls", "LS teaches SS in both stages", true, Network::LS, Network::LS));
  r.push_back(detail::two_stage(p, "heterogeneous_student", "full_duda with a different SMALL architecture family",
                                true, Network::LT, Network::LS, "small_het"));
  r.push_back(detail::small_only(p, "heterogeneous_no_distillation",
                                 "mean-teacher self-training of the heterogeneous SMALL architecture", "small_het",
                                 p.pre_iterations));
  return r;
}

inline ExperimentPreset find_preset(std::string_view name, const PresetParams& p = {}) {
  for (auto& preset : preset_registry(p))
    if (preset.name == name) return preset;
  throw ConfigError("unknown preset '" + std::string(name) + "'");
}

// Source-supervised training used as the starting point of every network,
// standing in for a pretrained initialisation.
struct PretrainConfig {
  int iterations = 1000;
  int batch = 8;

  friend bool operator==(const PretrainConfig&, const PretrainConfig&) = default;
};

template <typename T>
void pretrain_on_source(SegModel<T>& model, const SourceSplit& source, const PretrainConfig& cfg,
                        const OptimConfig& optim, std::uint64_t seed) {
  if (cfg.iterations <= 0) return;
  if (cfg.batch < 1) throw ConfigError("pretraining batch must be positive");
  Optimizer<T> opt(optim);
  EpochSampler sampler(source.size(), seed);
  Vector<T> g = Vector<T>::Zero(model.parameters().size());
  ForwardTape<T> tape;
  std::vector<Image> images(cfg.batch);
  std::vector<LabelMap> labels(cfg.batch);
  Matrix<T> d;
  for (int it = 0; it < cfg.iterations; ++it) {
    for (int b = 0; b < cfg.batch; ++b) {
      const auto k = sampler.next();
      images[b] = source.images[k];
      labels[b] = source.labels[k];
    }
    const auto probs = softmax(model.forward(std::span<const Image>(images), &tape));
    ce_loss(probs, std::span<const LabelMap>(labels), &d);
    g.setZero();
    model.backward(tape, softmax_backward(probs, d), g);
    opt.step(model.parameters(), g);
  }
}

// Pretrained parameters keyed by role, architecture, seed and pretraining setup, so
// presets sharing a seed start from the same networks without recomputation.
inline std::string optim_key(const OptimConfig& o) {
  std::ostringstream os;
  os.precision(17);
  os << to_string(o.kind) << ' ' << o.learning_rate << ' ' << o.momentum << ' ' << o.beta1 << ' ' << o.beta2 << ' '
     << o.epsilon << ' ' << o.weight_decay;
  return os.str();
}

class PretrainCache {
 public:
  using Key = std::tuple<std::string, std::string, std::uint64_t, int, int, std::string>;

  const Vector<float>* find(const Key& k) const {
    const auto it = store_.find(k);
    return it == store_.end() ? nullptr : &it->second;
  }
  void put(const Key& k, const Vector<float>& params) { store_[k] = params; }

 private:
  std::map<Key, Vector<float>> store_;
};

struct RunOptions {
  OptimConfig optim;
  PretrainConfig pretrain;
  std::shared_ptr<PretrainCache> pretrain_cache;
  int eval_every = 100;
  double presence_ratio = kPresenceRatio;
  nlohmann::json config_snapshot;
  // Called after every evaluation with the record so far.
  std::function<void(const RunRecord&)> on_progress;
  // Called at the end of every stage; returns the paths it wrote.
  std::function<std::vector<std::string>(const Trio<float>&, int stage, int iteration)> on_checkpoint;
  // Polled between iterations; true ends the run early, leaving the record incomplete.
  std::function<bool()> stop_requested;
};

namespace detail {

// Evaluates the three networks, reusing results for unchanged parameters.
class TrioEvaluator {
 public:
  explicit TrioEvaluator(const Benchmark& bench) : bench_(&bench) {}

  const ConfusionMatrix& confusion(const SegModel<float>& model, Network n) {
    auto& slot = cache_[static_cast<int>(n)];
    const auto sum = model.checksum();
    if (!slot || slot->first != sum)
      slot.emplace(sum, evaluate(model, std::span<const Image>(bench_->evaluation().images),
                                 std::span<const LabelMap>(bench_->evaluation().labels)));
    return slot->second;
  }

 private:
  const Benchmark* bench_;
  std::optional<std::pair<std::uint64_t, ConfusionMatrix>> cache_[3];
};

inline MetricRow metric_row(int iteration, StageKind stage, Network n, const ConfusionMatrix& cm) {
  const auto scores = miou_macc(cm);
  return {iteration, to_string(stage), n, scores.miou, scores.macc, iou_per_class(cm).iou};
}

}  // namespace detail

inline RunRecord run_experiment(const ExperimentPreset& preset, const Benchmark& bench, std::uint64_t seed,
                                const RunOptions& opts = {}) {
  preset.validate();
  if (opts.eval_every < 1) throw ConfigError("eval_every must be positive");
  const auto t0 = std::chrono::steady_clock::now();
  const int h = bench.height(), w = bench.width(), c = bench.num_classes();
  const auto large = architecture_by_name(preset.large_arch, c);
  const auto small = architecture_by_name(preset.small_arch, c);
  const Network ema_student = preset.stages.front().ema_student;
  auto trio = make_trio<float>(large, small, h, w, seed, ema_student);
  bool large_used = false;
  for (const auto& s : preset.stages)
    large_used = large_used || (s.kind == StageKind::pre_adaptation && s.train_large) ||
                 s.pseudo_teacher == Network::LS || (s.losses.kl && s.kl_teacher == Network::LS) ||
                 s.ema_student == Network::LS;
  auto warm = [&](SegModel<float>& m, const char* role) {
    const PretrainCache::Key key{role, m.architecture().descriptor(), seed, opts.pretrain.iterations, opts.pretrain.batch,
                                 optim_key(opts.optim)};
    if (const auto* hit = opts.pretrain_cache ? opts.pretrain_cache->find(key) : nullptr) {
      m.parameters() = *hit;
      return;
    }
    pretrain_on_source(m, bench.source(), opts.pretrain, opts.optim, derive_seed(seed, tag_of(role)));
    if (opts.pretrain_cache) opts.pretrain_cache->put(key, m.parameters());
  };
  if (large_used) warm(trio.ls, "pretrain.ls");
  warm(trio.ss, "pretrain.ss");
  clone_into(trio.get(ema_student), trio.lt);
  DudaTrainer<float> trainer(std::move(trio), opts.optim, opts.presence_ratio);
  BatchSampler sampler(bench, seed);
  detail::TrioEvaluator evaluator(bench);

  RunRecord rec;
  rec.config = opts.config_snapshot;
  rec.preset = preset.name;
  rec.flags = preset.flags;
  rec.seed = seed;
  rec.num_classes = c;
  rec.software_version = kVersion;
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  auto evaluate_all = [&](int iteration, StageKind kind) {
    for (auto n : {Network::LT, Network::LS, Network::SS}) {
      const auto& cm = evaluator.confusion(trainer.trio().get(n), n);
      rec.rows.push_back(detail::metric_row(iteration, kind, n, cm));
      rec.final_confusion.insert_or_assign(n, cm);
    }
    rec.iterations_completed = iteration;
    rec.wall_clock_seconds = elapsed();
    if (opts.on_progress) opts.on_progress(rec);
  };

  int iteration = 0;
  std::optional<ClassWeights> balanced;
  for (std::size_t si = 0; si < preset.stages.size(); ++si) {
    const auto& cfg = preset.stages[si];
    ClassWeights weights = ClassWeights::uniform(c);
    std::uint64_t lt_sum = 0, ls_sum = 0;
    if (cfg.kind == StageKind::fine_tuning) {
      trainer.begin_fine_tuning();
      if (cfg.use_inconsistency_weights) {
        if (!balanced) throw EstimationError("no inconsistency profile available for weighted fine-tuning");
        weights = *balanced;
      }
      lt_sum = trainer.trio().lt.checksum();
      ls_sum = trainer.trio().ls.checksum();
    }
    for (int k = 0; k < cfg.iterations; ++k) {
      if (opts.stop_requested && opts.stop_requested()) {
        rec.wall_clock_seconds = elapsed();
        return rec;
      }
      auto src = sampler.source(cfg.source_batch);
      auto tgt = sampler.target(cfg.target_batch);
      try {
        if (cfg.kind == StageKind::pre_adaptation)
          trainer.pre_adapt_step(src, tgt, cfg);
        else
          trainer.fine_tune_step(src, tgt, cfg, weights);
      } catch (const NumericError& e) {
        throw NumericError("iteration " + std::to_string(iteration + 1) + ": " + e.what());
      }
      ++iteration;
      if (iteration % opts.eval_every == 0 || k + 1 == cfg.iterations) evaluate_all(iteration, cfg.kind);
    }
    if (cfg.kind == StageKind::fine_tuning &&
        (trainer.trio().lt.checksum() != lt_sum || trainer.trio().ls.checksum() != ls_sum))
      throw StructuralError("frozen networks changed during fine-tuning");
    if (cfg.kind == StageKind::pre_adaptation && cfg.train_small && trainer.accumulator().sum_n().size()) {
      try {
        rec.profile = finalize(trainer.accumulator());
        balanced = weights_from_profile(*rec.profile);
        DisparitySnapshot snap;
        snap.iteration = iteration;
        snap.teacher = evaluator.confusion(trainer.trio().lt, Network::LT);
        snap.student = evaluator.confusion(trainer.trio().ss, Network::SS);
        snap.report = disparity_report(snap.teacher, snap.student, *rec.profile);
        rec.disparity = std::move(snap);
      } catch (const EstimationError&) {
        rec.profile.reset();
      }
      trainer.accumulator().reset();
    }
    rec.stage_ends.push_back(iteration);
    if (opts.on_checkpoint) {
      auto paths = opts.on_checkpoint(trainer.trio(), static_cast<int>(si), iteration);
      rec.checkpoints.insert(rec.checkpoints.end(), paths.begin(), paths.end());
    }
  }
  rec.iterations_completed = iteration;
  rec.wall_clock_seconds = elapsed();
  rec.complete = true;
  if (opts.on_progress) opts.on_progress(rec);
  return rec;
}

}  // namespace duda
