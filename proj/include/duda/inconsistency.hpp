#pragma once

// Class-wise prediction inconsistency between a teacher and a student.
//
// Per image and class c: s = |T_c ∩ S_c|, u = |T_c ∪ S_c| = |T_c| + |S_c| - s,
// i_c = 1 - s/u. The class counts as present (n_c = 1) only when u reaches
// `pixel_threshold_ratio` of the image's pixels. Streaming sums over images
// give I_c = Σ i_c / Σ n_c, normalised to I'_c = C * I_c / Σ I.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "duda/error.hpp"
#include "duda/losses.hpp"
#include "duda/tensor.hpp"

namespace duda {

inline constexpr double kPresenceRatio = 0.001;

struct ImageInconsistency {
  double i_c = 0.0;
  int n_c = 0;
};

namespace detail {

// Per-class pixel counts for one image given teacher and student class ids.
struct ClassOverlap {
  std::vector<std::int64_t> teacher, student, both;

  explicit ClassOverlap(int c) : teacher(c, 0), student(c, 0), both(c, 0) {}
};

inline ClassOverlap overlap(std::span<const std::uint8_t> teacher, std::span<const std::uint8_t> student,
                            int num_classes) {
  if (teacher.size() != student.size()) throw InputError("inconsistency: prediction sizes differ");
  ClassOverlap o(num_classes);
  for (std::size_t p = 0; p < teacher.size(); ++p) {
    const auto a = teacher[p], b = student[p];
    if (a < num_classes) ++o.teacher[a];
    if (b < num_classes) ++o.student[b];
    if (a == b && a < num_classes) ++o.both[a];
  }
  return o;
}

inline ImageInconsistency score(const ClassOverlap& o, int c, std::size_t pixels, double ratio) {
  const std::int64_t s = o.both[c];
  const std::int64_t u = o.teacher[c] + o.student[c] - s;
  ImageInconsistency r;
  if (u == 0) return r;
  r.i_c = 1.0 - static_cast<double>(s) / static_cast<double>(u);
  r.n_c = static_cast<double>(u) < ratio * static_cast<double>(pixels) ? 0 : 1;
  return r;
}

inline void check_pair(const OneHotLabels& teacher, const OneHotLabels& student) {
  if (teacher.count != student.count || teacher.height != student.height || teacher.width != student.width ||
      teacher.num_classes != student.num_classes)
    throw InputError("inconsistency: teacher and student predictions differ in shape");
}

inline std::span<const std::uint8_t> image_ids(const std::vector<std::uint8_t>& ids, std::size_t per, int n) {
  return std::span<const std::uint8_t>(ids).subspan(per * n, per);
}

}  // namespace detail

// Inconsistency of class c on a single-image prediction pair.
inline ImageInconsistency image_inconsistency(const OneHotLabels& teacher_pred, const OneHotLabels& student_pred,
                                              int c, double pixel_threshold_ratio = kPresenceRatio) {
  detail::check_pair(teacher_pred, student_pred);
  if (teacher_pred.count != 1) throw InputError("image_inconsistency: expects a single image");
  if (c < 0 || c >= teacher_pred.num_classes) throw InputError("image_inconsistency: class out of range");
  const auto a = detail::ids_from_onehot(teacher_pred), b = detail::ids_from_onehot(student_pred);
  return detail::score(detail::overlap(a, b, teacher_pred.num_classes), c, a.size(), pixel_threshold_ratio);
}

struct InconsistencyProfile {
  std::vector<double> inconsistency;             // I_c in [0, 1]
  std::vector<double> normalized;                // I'_c, sums to C
  std::vector<std::int64_t> observations;        // Σ n_c
};

class InconsistencyAccumulator {
 public:
  explicit InconsistencyAccumulator(int num_classes, double pixel_threshold_ratio = kPresenceRatio)
      : sum_i_(num_classes, 0.0), sum_n_(num_classes, 0), ratio_(pixel_threshold_ratio) {
    if (num_classes < 1) throw ConfigError("inconsistency accumulator needs at least one class");
  }

  int num_classes() const { return static_cast<int>(sum_i_.size()); }
  double pixel_threshold_ratio() const { return ratio_; }
  const std::vector<double>& sum_i() const { return sum_i_; }
  const std::vector<std::int64_t>& sum_n() const { return sum_n_; }

  // Adds one image given per-pixel class ids (argmax maps) of both networks.
  void accumulate_ids(std::span<const std::uint8_t> teacher, std::span<const std::uint8_t> student) {
    const auto o = detail::overlap(teacher, student, num_classes());
    for (int c = 0; c < num_classes(); ++c) {
      const auto r = detail::score(o, c, teacher.size(), ratio_);
      if (r.n_c == 1) {
        sum_i_[c] += r.i_c;
        sum_n_[c] += 1;
      }
    }
  }

  // Adds every image of a prediction batch.
  void accumulate(const OneHotLabels& teacher_pred, const OneHotLabels& student_pred) {
    detail::check_pair(teacher_pred, student_pred);
    if (teacher_pred.num_classes != num_classes()) throw InputError("accumulate: class count mismatch");
    const auto a = detail::ids_from_onehot(teacher_pred), b = detail::ids_from_onehot(student_pred);
    const std::size_t per = static_cast<std::size_t>(teacher_pred.height) * teacher_pred.width;
    for (int n = 0; n < teacher_pred.count; ++n)
      accumulate_ids(detail::image_ids(a, per, n), detail::image_ids(b, per, n));
  }

  void merge(const InconsistencyAccumulator& other) {
    if (other.num_classes() != num_classes() || other.ratio_ != ratio_)
      throw StructuralError("merge: accumulators are incompatible");
    for (int c = 0; c < num_classes(); ++c) {
      sum_i_[c] += other.sum_i_[c];
      sum_n_[c] += other.sum_n_[c];
    }
  }

  void reset() {
    std::fill(sum_i_.begin(), sum_i_.end(), 0.0);
    std::fill(sum_n_.begin(), sum_n_.end(), 0);
  }

  friend bool operator==(const InconsistencyAccumulator&, const InconsistencyAccumulator&) = default;

 private:
  std::vector<double> sum_i_;
  std::vector<std::int64_t> sum_n_;
  double ratio_;
};

inline InconsistencyProfile finalize(const InconsistencyAccumulator& acc) {
  const int c_count = acc.num_classes();
  InconsistencyProfile prof;
  prof.observations = acc.sum_n();
  prof.inconsistency.assign(c_count, 0.0);
  double observed_sum = 0.0;
  int observed = 0;
  for (int c = 0; c < c_count; ++c)
    if (acc.sum_n()[c] > 0) {
      prof.inconsistency[c] = acc.sum_i()[c] / static_cast<double>(acc.sum_n()[c]);
      observed_sum += prof.inconsistency[c];
      ++observed;
    }
  if (observed == 0) throw EstimationError("inconsistency: no class was ever observed");
  const double fill = observed_sum / observed;
  for (int c = 0; c < c_count; ++c)
    if (acc.sum_n()[c] == 0) prof.inconsistency[c] = fill;
  const double total = std::accumulate(prof.inconsistency.begin(), prof.inconsistency.end(), 0.0);
  prof.normalized.assign(c_count, 1.0);
  if (total > 0.0)
    for (int c = 0; c < c_count; ++c) prof.normalized[c] = c_count * prof.inconsistency[c] / total;
  return prof;
}

// ce_coef = 2 - I'_c and kl_coef = I'_c, clipped so both stay in [0, 2].
inline ClassWeights weights_from_profile(const InconsistencyProfile& profile) {
  ClassWeights w;
  for (double v : profile.normalized) {
    const double kl = std::clamp(v, 0.0, 2.0);
    w.kl_coef.push_back(kl);
    w.ce_coef.push_back(2.0 - kl);
  }
  return w;
}

}  // namespace duda
