#pragma once

// Deterministic paired-domain segmentation benchmark.
//
// A scene is a textured background with `num_shapes` painted instances. Each
// instance draws its class from `class_frequencies`; the class decides the
// shape kind, base colour, texture and size. Later instances occlude earlier
// ones. The target domain re-renders the same scene distribution and applies
// an appearance-only DomainShift, so label geometry never changes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "duda/error.hpp"
#include "duda/rng.hpp"
#include "duda/tensor.hpp"

namespace duda {

enum class ShapeKind { rectangle, disk, triangle, stripe };

inline std::string_view to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::rectangle: return "rectangle";
    case ShapeKind::disk: return "disk";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::stripe: return "stripe";
  }
  return "?";
}

inline ShapeKind shape_kind_from_string(std::string_view s) {
  if (s == "rectangle") return ShapeKind::rectangle;
  if (s == "disk") return ShapeKind::disk;
  if (s == "triangle") return ShapeKind::triangle;
  if (s == "stripe") return ShapeKind::stripe;
  throw ConfigError("unknown shape kind '" + std::string(s) + "'");
}

struct SceneSpec {
  std::uint64_t seed = 1;
  int height = 64;
  int width = 64;
  int num_shapes = 7;
  std::vector<double> class_frequencies;  // length C, sums to one
  std::vector<ShapeKind> shape_kinds;     // length C; entry 0 is used for background clutter

  int num_classes() const { return static_cast<int>(class_frequencies.size()); }

  void validate() const {
    if (height <= 0 || width <= 0) throw ConfigError("scene size must be positive");
    if (num_shapes < 0) throw ConfigError("num_shapes must be non-negative");
    const int c = num_classes();
    if (c < 2 || c > 254) throw ConfigError("class_frequencies must have between 2 and 254 entries");
    if (static_cast<int>(shape_kinds.size()) != c)
      throw ConfigError("shape_kinds must have one entry per class");
    double sum = 0.0;
    for (double f : class_frequencies) {
      if (!(f >= 0.0)) throw ConfigError("class_frequencies must be non-negative");
      sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw ConfigError("class_frequencies must sum to 1 (got " + std::to_string(sum) + ")");
    const auto rare = std::count_if(class_frequencies.begin() + 1, class_frequencies.end(),
                                    [](double f) { return f <= 0.05; });
    if (rare < 2) throw ConfigError("class_frequencies needs at least two rare classes (frequency <= 0.05)");
  }

  // 64x64, six classes, two rare classes at 0.03.
  static SceneSpec default_spec() {
    SceneSpec s;
    s.class_frequencies = {0.12, 0.30, 0.26, 0.26, 0.03, 0.03};
    s.shape_kinds = {ShapeKind::disk, ShapeKind::rectangle, ShapeKind::disk,
                     ShapeKind::stripe, ShapeKind::triangle, ShapeKind::disk};
    return s;
  }

  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

struct DomainShift {
  std::array<double, 3> scale{1.0, 1.0, 1.0};  // per-channel gain
  std::array<double, 3> bias{0.0, 0.0, 0.0};   // per-channel offset
  double noise_sigma = 0.0;                    // additive Gaussian noise
  double texture_amplitude = 0.0;              // image-wide sinusoidal texture

  static DomainShift identity() { return {}; }

  static DomainShift default_shift() {
    DomainShift s;
    s.scale = {0.55, 1.10, 0.80};
    s.bias = {0.30, -0.02, 0.12};
    s.noise_sigma = 0.05;
    s.texture_amplitude = 0.08;
    return s;
  }

  bool is_identity() const {
    return scale == std::array<double, 3>{1.0, 1.0, 1.0} && bias == std::array<double, 3>{0.0, 0.0, 0.0} &&
           noise_sigma == 0.0 && texture_amplitude == 0.0;
  }

  void validate() const {
    if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be non-negative");
    if (texture_amplitude < 0.0) throw ConfigError("texture_amplitude must be non-negative");
  }

  friend bool operator==(const DomainShift&, const DomainShift&) = default;
};

namespace detail {

struct ClassStyle {
  std::array<double, 3> color;
  int tex_dx, tex_dy;  // texture wave direction (integer lattice, exact)
  double tex_period;   // pixels
  double size_lo, size_hi;
};

// Fixed appearance table. Classes beyond the table reuse entries with a
// rotated colour so any C is renderable.
inline ClassStyle class_style(int c, ShapeKind kind) {
  static constexpr std::array<std::array<double, 3>, 6> kColors{{
      {0.42, 0.42, 0.38},  // background
      {0.72, 0.34, 0.28},
      {0.28, 0.62, 0.34},
      {0.34, 0.40, 0.76},
      {0.80, 0.46, 0.30},  // close to class 1, different shape
      {0.34, 0.66, 0.52},  // close to class 2, smaller and differently textured
  }};
  static constexpr std::array<std::array<int, 2>, 6> kDirs{{{1, 1}, {1, 0}, {0, 1}, {1, -1}, {0, 1}, {1, 0}}};
  static constexpr std::array<double, 6> kPeriods{9.0, 6.0, 5.0, 4.0, 7.0, 3.0};
  const int slot = c % 6;
  auto color = kColors[slot];
  if (c >= 6) std::rotate(color.begin(), color.begin() + (c / 6) % 3, color.end());
  ClassStyle s{color, kDirs[slot][0], kDirs[slot][1], kPeriods[slot], 0, 0};
  switch (kind) {
    case ShapeKind::rectangle: s.size_lo = 5; s.size_hi = 12; break;
    case ShapeKind::disk: s.size_lo = 4; s.size_hi = 10; break;
    case ShapeKind::triangle: s.size_lo = 7; s.size_hi = 13; break;
    case ShapeKind::stripe: s.size_lo = 10; s.size_hi = 24; break;
  }
  if (slot == 5) {  // small instances for the second rare class
    s.size_lo = 3;
    s.size_hi = 6;
  }
  return s;
}

inline double wave(int x, int y, int dx, int dy, double period, double phase) {
  const double t = (dx * (x + 0.5) + dy * (y + 0.5)) / period + phase;
  return std::sin(2.0 * 3.14159265358979323846 * t);
}

inline int sample_class(Rng& rng, const std::vector<double>& freq) {
  double u = rng.uniform();
  for (std::size_t c = 0; c + 1 < freq.size(); ++c) {
    if (u < freq[c]) return static_cast<int>(c);
    u -= freq[c];
  }
  return static_cast<int>(freq.size()) - 1;
}

// Geometry of one instance. Membership uses only +,-,* on doubles so the
// label map is exactly reproducible everywhere.
struct Instance {
  ShapeKind kind;
  double cx, cy, a, b;  // centre and extents
  int dir_x = 1, dir_y = 0;
  bool flip = false;

  bool contains(double px, double py) const {
    const double dx = px - cx, dy = py - cy;
    switch (kind) {
      case ShapeKind::rectangle: return std::abs(dx) <= a && std::abs(dy) <= b;
      case ShapeKind::disk: return dx * dx + dy * dy <= a * a;
      case ShapeKind::triangle: {
        // Apex at (0, -a), base from (-a, a) to (a, a); optionally flipped.
        const double y = flip ? -dy : dy;
        if (y > a || y < -a) return false;
        const double half = 0.5 * (y + a);  // half-width grows linearly from the apex
        return std::abs(dx) <= half;
      }
      case ShapeKind::stripe: {
        const double along = dir_x * dx + dir_y * dy;
        const double across = -dir_y * dx + dir_x * dy;
        const double n2 = static_cast<double>(dir_x * dir_x + dir_y * dir_y);
        return across * across <= b * b * n2 && along * along <= a * a * n2;
      }
    }
    return false;
  }
};

}  // namespace detail

// Renders scene `index`. Deterministic in (spec.seed, index).
inline std::pair<Image, LabelMap> generate_scene(const SceneSpec& spec, std::int64_t index) {
  if (index < 0) throw InputError("generate_scene: index must be non-negative");
  spec.validate();
  Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(index)));
  const int h = spec.height, w = spec.width;
  Image img(h, w);
  LabelMap labels(h, w, 0);

  // Background: base colour, a gentle linear gradient and a fine texture.
  const auto bg = detail::class_style(0, spec.shape_kinds[0]);
  const double gx = rng.uniform(-0.08, 0.08), gy = rng.uniform(-0.08, 0.08);
  const double bg_phase = rng.uniform();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double ramp = gx * (x / double(w) - 0.5) + gy * (y / double(h) - 0.5);
      const double tex = 0.05 * detail::wave(x, y, bg.tex_dx, bg.tex_dy, bg.tex_period, bg_phase);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(std::clamp(bg.color[c] + ramp + tex, 0.0, 1.0));
    }

  static constexpr std::array<std::array<int, 2>, 4> kStripeDirs{{{1, 0}, {0, 1}, {1, 1}, {1, -1}}};
  for (int s = 0; s < spec.num_shapes; ++s) {
    const int cls = detail::sample_class(rng, spec.class_frequencies);
    const ShapeKind kind = spec.shape_kinds[cls];
    const auto style = detail::class_style(cls, kind);
    detail::Instance inst{kind, rng.uniform(0, w), rng.uniform(0, h), 0, 0};
    inst.a = rng.uniform(style.size_lo, style.size_hi);
    inst.b = kind == ShapeKind::rectangle ? rng.uniform(style.size_lo, style.size_hi)
             : kind == ShapeKind::stripe ? rng.uniform(1.5, 3.0)
                                         : inst.a;
    const auto& d = kStripeDirs[rng.below(4)];
    inst.dir_x = d[0];
    inst.dir_y = d[1];
    inst.flip = rng.below(2) == 1;
    std::array<double, 3> color = style.color;
    for (auto& v : color) v += rng.uniform(-0.04, 0.04);
    const double phase = rng.uniform();

    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (!inst.contains(x + 0.5, y + 0.5)) continue;
        labels.at(y, x) = static_cast<std::uint8_t>(cls);
        const double tex = 0.09 * detail::wave(x, y, style.tex_dx, style.tex_dy, style.tex_period, phase);
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(std::clamp(color[c] + tex, 0.0, 1.0));
      }
  }
  return {std::move(img), std::move(labels)};
}

// Appearance-only shift: per-channel affine, image-wide texture wave, noise.
// The output is clipped to [0, 1] and is deterministic in (img, shift, seed).
inline Image apply_domain_shift(const Image& img, const DomainShift& shift, std::uint64_t seed) {
  shift.validate();
  if (shift.is_identity()) return img;
  Rng rng(derive_seed(seed, tag_of("domain_shift")));
  static constexpr std::array<std::array<int, 2>, 4> kDirs{{{1, 0}, {0, 1}, {1, 1}, {1, -1}}};
  const auto& d = kDirs[rng.below(4)];
  const double period = rng.uniform(3.0, 8.0);
  const double phase = rng.uniform();
  Image out(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double tex = shift.texture_amplitude > 0.0
                             ? shift.texture_amplitude * detail::wave(x, y, d[0], d[1], period, phase)
                             : 0.0;
      for (int c = 0; c < 3; ++c) {
        double v = shift.scale[c] * img.at(y, x, c) + shift.bias[c] + tex;
        if (shift.noise_sigma > 0.0) v += shift.noise_sigma * rng.normal();
        out.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return out;
}

// Target images for training. Deliberately exposes no labels.
class TargetSplit {
 public:
  TargetSplit() = default;
  explicit TargetSplit(std::vector<Image> images) : images_(std::move(images)) {}

  std::size_t size() const { return images_.size(); }
  const Image& image(std::size_t i) const { return images_.at(i); }
  std::span<const Image> images() const { return images_; }

  friend bool operator==(const TargetSplit&, const TargetSplit&) = default;

 private:
  std::vector<Image> images_;
};

struct SourceSplit {
  std::vector<Image> images;
  std::vector<LabelMap> labels;

  std::size_t size() const { return images.size(); }
  friend bool operator==(const SourceSplit&, const SourceSplit&) = default;
};

// Held-out target scenes with labels; consumed only by evaluation code.
struct EvalSplit {
  std::vector<Image> images;
  std::vector<LabelMap> labels;

  std::size_t size() const { return images.size(); }
  friend bool operator==(const EvalSplit&, const EvalSplit&) = default;
};

// Scene index ranges per split; disjoint so no target scene repeats a source one.
inline constexpr std::int64_t kTargetIndexBase = 1 << 20;
inline constexpr std::int64_t kEvalIndexBase = 2 << 20;

class Benchmark {
 public:
  Benchmark(SceneSpec spec, DomainShift shift, SourceSplit source, TargetSplit target, EvalSplit eval)
      : spec_(std::move(spec)), shift_(shift), source_(std::move(source)), target_(std::move(target)),
        eval_(std::move(eval)) {}

  const SceneSpec& spec() const { return spec_; }
  const DomainShift& shift() const { return shift_; }
  int num_classes() const { return spec_.num_classes(); }
  int height() const { return spec_.height; }
  int width() const { return spec_.width; }

  const SourceSplit& source() const { return source_; }
  const TargetSplit& target() const { return target_; }
  const EvalSplit& evaluation() const { return eval_; }

  friend bool operator==(const Benchmark&, const Benchmark&) = default;

 private:
  SceneSpec spec_;
  DomainShift shift_;
  SourceSplit source_;
  TargetSplit target_;
  EvalSplit eval_;
};

inline Image render_target_image(const SceneSpec& spec, const DomainShift& shift, std::int64_t index,
                                 LabelMap* labels_out = nullptr) {
  auto [img, labels] = generate_scene(spec, index);
  if (labels_out) *labels_out = std::move(labels);
  return apply_domain_shift(img, shift, derive_seed(spec.seed ^ 0x5eedull, static_cast<std::uint64_t>(index)));
}

inline Benchmark build_benchmark(const SceneSpec& spec, const DomainShift& shift, int n_src, int n_tgt,
                                 int n_eval = 50) {
  spec.validate();
  shift.validate();
  if (n_src < 1 || n_tgt < 1) throw ConfigError("build_benchmark: n_src and n_tgt must be at least 1");
  if (n_eval < 1) throw ConfigError("build_benchmark: n_eval must be at least 1");
  SourceSplit src;
  for (int i = 0; i < n_src; ++i) {
    auto [img, lbl] = generate_scene(spec, i);
    src.images.push_back(std::move(img));
    src.labels.push_back(std::move(lbl));
  }
  std::vector<Image> tgt;
  for (int i = 0; i < n_tgt; ++i) tgt.push_back(render_target_image(spec, shift, kTargetIndexBase + i));
  EvalSplit ev;
  for (int i = 0; i < n_eval; ++i) {
    LabelMap lbl;
    ev.images.push_back(render_target_image(spec, shift, kEvalIndexBase + i, &lbl));
    ev.labels.push_back(std::move(lbl));
  }
  return Benchmark(spec, shift, std::move(src), TargetSplit(std::move(tgt)), std::move(ev));
}

// Pixel count per class over a set of label maps (IGNORE excluded).
inline std::vector<std::int64_t> label_histogram(std::span<const LabelMap> maps, int num_classes) {
  std::vector<std::int64_t> h(num_classes, 0);
  for (const auto& m : maps)
    for (auto id : m.classes)
      if (id != kIgnore && id < num_classes) ++h[id];
  return h;
}

}  // namespace duda
