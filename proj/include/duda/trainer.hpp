#pragma once

// Three-network training: large teacher LT (EMA of a student), large student
// LS and small student SS. Pre-adaptation trains LS and SS while LT tracks
// its student; fine-tuning freezes LT and LS and trains SS alone.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "duda/error.hpp"
#include "duda/inconsistency.hpp"
#include "duda/losses.hpp"
#include "duda/metrics.hpp"
#include "duda/optim.hpp"
#include "duda/rng.hpp"
#include "duda/run_record.hpp"
#include "duda/segmodel.hpp"
#include "duda/synth_data.hpp"

namespace duda {

enum class StageKind { pre_adaptation, fine_tuning };

inline const char* to_string(StageKind k) { return k == StageKind::pre_adaptation ? "pre_adaptation" : "fine_tuning"; }

inline StageKind stage_kind_from_string(std::string_view s) {
  if (s == "pre_adaptation") return StageKind::pre_adaptation;
  if (s == "fine_tuning") return StageKind::fine_tuning;
  throw ConfigError("unknown stage kind '" + std::string(s) + "'");
}

// Loss terms used for the small student.
struct LossFlags {
  bool ce_src = true;
  bool ce_tgt = true;
  bool kl = true;

  bool any() const { return ce_src || ce_tgt || kl; }
  friend bool operator==(const LossFlags&, const LossFlags&) = default;
};

struct StageConfig {
  StageKind kind = StageKind::pre_adaptation;
  int iterations = 1500;
  LossFlags losses;
  bool use_inconsistency_weights = false;
  Network pseudo_teacher = Network::LT;  // source of SS target pseudo-labels
  Network kl_teacher = Network::LT;      // source of SS distillation targets
  double ema_alpha = 0.999;
  int source_batch = 4;
  int target_batch = 4;
  // Pre-adaptation only.
  bool train_small = true;
  bool train_large = true;              // gradient steps on LS
  Network ema_student = Network::LS;    // network LT averages

  void validate() const {
    if (iterations < 0) throw ConfigError("stage iterations must be non-negative");
    if (source_batch < 1 || target_batch < 1) throw ConfigError("batch sizes must be positive");
    if (!(ema_alpha > 0.0 && ema_alpha <= 1.0)) throw ConfigError("ema_alpha out of (0,1]");
    if (pseudo_teacher == Network::SS || kl_teacher == Network::SS)
      throw ConfigError("the small student cannot teach itself");
    if (ema_student == Network::LT) throw ConfigError("ema_student must be LS or SS");
    if (kind == StageKind::pre_adaptation && use_inconsistency_weights)
      throw ConfigError("inconsistency weights apply only to fine-tuning");
    if (kind == StageKind::fine_tuning && !losses.any()) throw ConfigError("fine-tuning stage has no loss terms");
    if (kind == StageKind::fine_tuning && use_inconsistency_weights && !(losses.ce_tgt && losses.kl))
      throw ConfigError("inconsistency weights need both target CE and KL terms");
  }

  friend bool operator==(const StageConfig&, const StageConfig&) = default;
};

template <typename T>
struct Trio {
  SegModel<T> lt;
  SegModel<T> ls;
  SegModel<T> ss;

  SegModel<T>& get(Network n) { return n == Network::LT ? lt : n == Network::LS ? ls : ss; }
  const SegModel<T>& get(Network n) const { return n == Network::LT ? lt : n == Network::LS ? ls : ss; }
};

// LS and SS get independent initialisations; LT starts as a copy of the
// network it will average.
template <typename T>
Trio<T> make_trio(const Architecture& large, const Architecture& small, int height, int width, std::uint64_t seed,
                  Network ema_student = Network::LS) {
  Trio<T> trio{SegModel<T>(large, height, width), SegModel<T>(large, height, width), SegModel<T>(small, height, width)};
  if (trio.ls.num_classes() != trio.ss.num_classes())
    throw StructuralError("large and small architectures predict different class counts");
  trio.ls.init(derive_seed(seed, tag_of("init.ls")));
  trio.ss.init(derive_seed(seed, tag_of("init.ss")));
  clone_into(ema_student == Network::SS ? trio.ss : trio.ls, trio.lt);
  return trio;
}

// Per-pixel argmax over classes; ties resolve to the lowest class index.
template <typename T>
std::vector<std::uint8_t> argmax_ids(const ClassScores<T>& scores) {
  std::vector<std::uint8_t> ids(static_cast<std::size_t>(scores.num_pixels()));
  for (Eigen::Index p = 0; p < scores.num_pixels(); ++p) {
    int best = 0;
    for (int c = 1; c < scores.num_classes(); ++c)
      if (scores.values(c, p) > scores.values(best, p)) best = c;
    ids[p] = static_cast<std::uint8_t>(best);
  }
  return ids;
}

inline OneHotLabels one_hot_ids(std::span<const std::uint8_t> ids, int count, int height, int width, int num_classes) {
  OneHotLabels out(count, height, width, num_classes);
  if (ids.size() != out.num_pixels()) throw InputError("one_hot_ids: pixel count mismatch");
  for (std::size_t p = 0; p < ids.size(); ++p)
    if (ids[p] != kIgnore) out.at(p, ids[p]) = 1;
  return out;
}

template <typename T>
OneHotLabels pseudo_labels(const ProbMap<T>& probs) {
  return one_hot_ids(argmax_ids(probs), probs.count, probs.height, probs.width, probs.num_classes());
}

template <typename T>
ProbMap<T> slice_images(const ClassScores<T>& m, int first, int count) {
  ProbMap<T> out;
  out.count = count;
  out.height = m.height;
  out.width = m.width;
  out.values = m.values.middleCols(first * m.pixels_per_image(), count * m.pixels_per_image());
  return out;
}

template <typename T>
ProbMap<T> concat_images(std::span<const ProbMap<T>> parts) {
  if (parts.empty()) throw InputError("concat_images: nothing to join");
  ProbMap<T> out;
  out.height = parts.front().height;
  out.width = parts.front().width;
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    out.count += p.count;
    cols += p.num_pixels();
  }
  out.values.resize(parts.front().num_classes(), cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.values.middleCols(at, p.num_pixels()) = p.values;
    at += p.num_pixels();
  }
  return out;
}

// Label maps predicted for a set of images, evaluated in fixed-size chunks.
template <typename T>
std::vector<LabelMap> predict(const SegModel<T>& model, std::span<const Image> images, std::size_t chunk = 10) {
  std::vector<LabelMap> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); i += chunk) {
    const auto part = images.subspan(i, std::min(chunk, images.size() - i));
    const auto ids = argmax_ids(model.forward(part));
    const std::size_t per = static_cast<std::size_t>(model.height()) * model.width();
    for (std::size_t n = 0; n < part.size(); ++n) {
      LabelMap lm(model.height(), model.width());
      std::copy_n(ids.begin() + n * per, per, lm.classes.begin());
      out.push_back(std::move(lm));
    }
  }
  return out;
}

template <typename T>
ConfusionMatrix evaluate(const SegModel<T>& model, std::span<const Image> images, std::span<const LabelMap> labels) {
  if (images.size() != labels.size()) throw InputError("evaluate: image and label counts differ");
  ConfusionMatrix cm(model.num_classes());
  const auto preds = predict(model, images);
  for (std::size_t i = 0; i < preds.size(); ++i) update_confusion(cm, preds[i], labels[i]);
  return cm;
}

struct SourceBatch {
  std::vector<Image> images;
  std::vector<LabelMap> labels;
};

struct TargetBatch {
  std::vector<std::size_t> indices;  // positions in the target split; keys for cached teacher outputs
  std::vector<Image> images;
};

// Endless epoch-shuffled index stream over a split.
class EpochSampler {
 public:
  EpochSampler(std::size_t size, std::uint64_t seed) : order_(size), rng_(seed) {
    if (size == 0) throw ConfigError("cannot sample from an empty split");
    for (std::size_t i = 0; i < size; ++i) order_[i] = i;
    rng_.shuffle(order_.begin(), order_.end());
  }

  std::size_t next() {
    if (pos_ == order_.size()) {
      rng_.shuffle(order_.begin(), order_.end());
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  std::vector<std::size_t> order_;
  Rng rng_;
  std::size_t pos_ = 0;
};

class BatchSampler {
 public:
  BatchSampler(const Benchmark& bench, std::uint64_t seed)
      : bench_(&bench),
        source_(bench.source().size(), derive_seed(seed, tag_of("sampler.source"))),
        target_(bench.target().size(), derive_seed(seed, tag_of("sampler.target"))) {}

  SourceBatch source(int n) {
    SourceBatch b;
    for (int i = 0; i < n; ++i) {
      const auto k = source_.next();
      b.images.push_back(bench_->source().images[k]);
      b.labels.push_back(bench_->source().labels[k]);
    }
    return b;
  }

  TargetBatch target(int n) {
    TargetBatch b;
    for (int i = 0; i < n; ++i) {
      const auto k = target_.next();
      b.indices.push_back(k);
      b.images.push_back(bench_->target().image(k));
    }
    return b;
  }

 private:
  const Benchmark* bench_;
  EpochSampler source_;
  EpochSampler target_;
};

struct StepReport {
  std::optional<double> ls_loss;
  std::optional<LossValue> ss_loss;
};

template <typename T = float>
class DudaTrainer {
 public:
  DudaTrainer(Trio<T> trio, OptimConfig optim, double presence_ratio = kPresenceRatio)
      : trio_(std::move(trio)),
        opt_ls_(optim),
        opt_ss_(optim),
        acc_(trio_.ss.num_classes(), presence_ratio) {
    for (auto n : {Network::LT, Network::LS, Network::SS}) grads(n) = Vector<T>::Zero(trio_.get(n).parameters().size());
  }

  Trio<T>& trio() { return trio_; }
  const Trio<T>& trio() const { return trio_; }
  int num_classes() const { return trio_.ss.num_classes(); }
  const InconsistencyAccumulator& accumulator() const { return acc_; }
  InconsistencyAccumulator& accumulator() { return acc_; }

  // Gradient buffer of the last step for a network (LT never receives any).
  const Vector<T>& gradient(Network n) const { return grads_[static_cast<int>(n)]; }

  StepReport pre_adapt_step(const SourceBatch& src, const TargetBatch& tgt, const StageConfig& cfg) {
    if (cfg.kind != StageKind::pre_adaptation) throw ConfigError("pre_adapt_step needs a pre-adaptation stage");
    check_batches(src, tgt);
    StepReport rep;
    const std::span<const Image> tgt_imgs(tgt.images);

    const auto lt_probs = softmax(trio_.lt.forward(tgt_imgs));
    const auto lt_ids = argmax_ids(lt_probs);
    const auto lt_pseudo = one_hot_ids(lt_ids, lt_probs.count, lt_probs.height, lt_probs.width, num_classes());

    std::optional<ProbMap<T>> ls_probs;
    if (cfg.train_small && (cfg.pseudo_teacher == Network::LS || (cfg.losses.kl && cfg.kl_teacher == Network::LS)))
      ls_probs = softmax(trio_.ls.forward(tgt_imgs));

    if (cfg.train_large) {
      LossFlags flags{true, true, false};
      const auto v = student_step(trio_.ls, opt_ls_, grads(Network::LS), src, tgt_imgs, lt_pseudo, nullptr, flags,
                                  nullptr, nullptr);
      rep.ls_loss = v.total;
    }

    if (cfg.train_small) {
      const ProbMap<T>& pseudo_src = cfg.pseudo_teacher == Network::LT ? lt_probs : *ls_probs;
      const ProbMap<T>* kl_src = nullptr;
      if (cfg.losses.kl) kl_src = cfg.kl_teacher == Network::LT ? &lt_probs : &*ls_probs;
      const auto pseudo = cfg.pseudo_teacher == Network::LT ? lt_pseudo : pseudo_labels(pseudo_src);
      std::vector<std::uint8_t> ss_ids;
      rep.ss_loss = student_step(trio_.ss, opt_ss_, grads(Network::SS), src, tgt_imgs, pseudo, kl_src, cfg.losses,
                                 nullptr, &ss_ids);
      const std::size_t per = static_cast<std::size_t>(lt_probs.height) * lt_probs.width;
      for (int n = 0; n < lt_probs.count; ++n)
        acc_.accumulate_ids(std::span<const std::uint8_t>(lt_ids).subspan(n * per, per),
                            std::span<const std::uint8_t>(ss_ids).subspan(n * per, per));
    }

    if (cfg.train_large || cfg.ema_student == Network::SS) ema_update(trio_.lt, trio_.get(cfg.ema_student), cfg.ema_alpha);
    return rep;
  }

  // Drops cached teacher outputs; call whenever LT or LS have changed.
  // LS becomes a frozen teacher, so its gradient buffer is cleared too.
  void begin_fine_tuning() {
    cache_.clear();
    grads(Network::LS).setZero();
  }

  StepReport fine_tune_step(const SourceBatch& src, const TargetBatch& tgt, const StageConfig& cfg,
                            const ClassWeights& weights) {
    if (cfg.kind != StageKind::fine_tuning) throw ConfigError("fine_tune_step needs a fine-tuning stage");
    check_batches(src, tgt);
    weights.validate(num_classes());
    if (tgt.indices.size() != tgt.images.size()) throw InputError("target batch indices and images differ");
    const auto pseudo_probs = teacher_probs(cfg.pseudo_teacher, tgt);
    const auto pseudo = pseudo_labels(pseudo_probs);
    std::optional<ProbMap<T>> kl_probs;
    if (cfg.losses.kl) kl_probs = cfg.kl_teacher == cfg.pseudo_teacher ? pseudo_probs : teacher_probs(cfg.kl_teacher, tgt);
    StepReport rep;
    rep.ss_loss = student_step(trio_.ss, opt_ss_, grads(Network::SS), src, std::span<const Image>(tgt.images), pseudo,
                               kl_probs ? &*kl_probs : nullptr, cfg.losses, &weights, nullptr);
    return rep;
  }

 private:
  Vector<T>& grads(Network n) { return grads_[static_cast<int>(n)]; }

  void check_batches(const SourceBatch& src, const TargetBatch& tgt) const {
    if (src.images.empty() || tgt.images.empty()) throw InputError("empty training batch");
    if (src.images.size() != src.labels.size()) throw InputError("source images and labels differ in count");
  }

  // Teacher softmax for each target image, computed one image at a time so
  // the cached values do not depend on batch composition.
  ProbMap<T> teacher_probs(Network n, const TargetBatch& tgt) {
    std::vector<ProbMap<T>> parts;
    for (std::size_t i = 0; i < tgt.images.size(); ++i) {
      const auto key = std::make_pair(static_cast<int>(n), tgt.indices[i]);
      auto it = cache_.find(key);
      if (it == cache_.end()) it = cache_.emplace(key, softmax(trio_.get(n).forward(tgt.images[i]))).first;
      parts.push_back(it->second);
    }
    return concat_images(std::span<const ProbMap<T>>(parts));
  }

  // One SGD step of a student on the joined source+target batch. With
  // `weights` set, target CE and KL use its per-class coefficients.
  LossValue student_step(SegModel<T>& model, Optimizer<T>& opt, Vector<T>& g, const SourceBatch& src,
                         std::span<const Image> tgt_imgs, const OneHotLabels& pseudo, const ProbMap<T>* kl_teacher,
                         const LossFlags& flags, const ClassWeights* weights, std::vector<std::uint8_t>* tgt_ids) {
    std::vector<Image> joined(src.images);
    joined.insert(joined.end(), tgt_imgs.begin(), tgt_imgs.end());
    const int ns = static_cast<int>(src.images.size()), nt = static_cast<int>(tgt_imgs.size());
    ForwardTape<T> tape;
    const auto probs = softmax(model.forward(std::span<const Image>(joined), &tape));
    const auto src_probs = slice_images(probs, 0, ns);
    const auto tgt_probs = slice_images(probs, ns, nt);
    if (tgt_ids) *tgt_ids = argmax_ids(tgt_probs);

    const std::span<const double> ce_coef = weights ? std::span<const double>(weights->ce_coef) : std::span<const double>{};
    const std::span<const double> kl_coef = weights ? std::span<const double>(weights->kl_coef) : std::span<const double>{};
    Matrix<T> dprobs = Matrix<T>::Zero(probs.values.rows(), probs.values.cols());
    const Eigen::Index src_cols = src_probs.num_pixels(), tgt_cols = tgt_probs.num_pixels();
    LossValue total{0.0, std::vector<double>(num_classes(), 0.0)};
    Matrix<T> d;
    if (flags.ce_src) {
      total += ce_loss(src_probs, std::span<const LabelMap>(src.labels), &d);
      dprobs.leftCols(src_cols) += d;
    }
    if (flags.ce_tgt) {
      total += ce_pseudo_loss(tgt_probs, pseudo, &d, ce_coef);
      dprobs.rightCols(tgt_cols) += d;
    }
    if (flags.kl) {
      if (!kl_teacher) throw ConfigError("KL term requested without a teacher");
      total += kl_loss(*kl_teacher, tgt_probs, &d, kl_coef);
      dprobs.rightCols(tgt_cols) += d;
    }
    g.setZero();
    model.backward(tape, softmax_backward(probs, dprobs), g);
    opt.step(model.parameters(), g);
    return total;
  }

  Trio<T> trio_;
  Optimizer<T> opt_ls_;
  Optimizer<T> opt_ss_;
  InconsistencyAccumulator acc_;
  Vector<T> grads_[3];
  std::map<std::pair<int, std::size_t>, ProbMap<T>> cache_;
};

}  // namespace duda
