#pragma once

// Training objectives on probability maps. Every loss is a MEAN over the
// pixels it scores and reports a per-class decomposition whose sum is the
// total. Optional class coefficients scale each class's contribution; when
// a gradient buffer is supplied it receives d(total)/d(probs) for the
// student probabilities (teacher inputs are treated as constants).

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "duda/error.hpp"
#include "duda/tensor.hpp"

namespace duda {

inline constexpr double kProbFloor = 1e-12;

struct LossValue {
  double total = 0.0;
  std::vector<double> per_class;

  LossValue& operator+=(const LossValue& o) {
    total += o.total;
    if (per_class.empty()) per_class.assign(o.per_class.size(), 0.0);
    for (std::size_t c = 0; c < o.per_class.size(); ++c) per_class[c] += o.per_class[c];
    return *this;
  }
};

// CE coefficient and KL coefficient per class; each pair sums to 2.
struct ClassWeights {
  std::vector<double> ce_coef;
  std::vector<double> kl_coef;

  static ClassWeights uniform(int num_classes) {
    return {std::vector<double>(num_classes, 1.0), std::vector<double>(num_classes, 1.0)};
  }

  void validate(int num_classes) const {
    if (static_cast<int>(ce_coef.size()) != num_classes || static_cast<int>(kl_coef.size()) != num_classes)
      throw InputError("ClassWeights: expected " + std::to_string(num_classes) + " coefficients");
    for (int c = 0; c < num_classes; ++c) {
      if (ce_coef[c] < 0.0 || kl_coef[c] < 0.0) throw InputError("ClassWeights: negative coefficient");
      if (std::abs(ce_coef[c] + kl_coef[c] - 2.0) > 1e-9)
        throw InputError("ClassWeights: ce_coef + kl_coef must equal 2 for class " + std::to_string(c));
    }
  }
};

namespace detail {

inline std::vector<std::uint8_t> flatten_ids(std::span<const LabelMap> labels) {
  std::vector<std::uint8_t> ids;
  for (const auto& lm : labels) ids.insert(ids.end(), lm.classes.begin(), lm.classes.end());
  return ids;
}

inline std::vector<std::uint8_t> ids_from_onehot(const OneHotLabels& oh) {
  std::vector<std::uint8_t> ids(oh.num_pixels());
  for (std::size_t p = 0; p < ids.size(); ++p) ids[p] = oh.class_of(p);
  return ids;
}

// -mean over scored pixels of coef[y] * log(max(p_y, floor)).
template <typename T>
LossValue cross_entropy(const ProbMap<T>& probs, std::span<const std::uint8_t> ids, std::span<const double> coef,
                        Matrix<T>* dprobs) {
  const int c_count = probs.num_classes();
  if (static_cast<Eigen::Index>(ids.size()) != probs.num_pixels())
    throw InputError("cross-entropy: label count " + std::to_string(ids.size()) + " does not match " +
                     std::to_string(probs.num_pixels()) + " pixels");
  if (!coef.empty() && static_cast<int>(coef.size()) != c_count)
    throw InputError("cross-entropy: coefficient vector has wrong length");
  std::size_t scored = 0;
  for (auto id : ids) {
    if (id == kIgnore) continue;
    if (id >= c_count) throw InputError("cross-entropy: class id " + std::to_string(id) + " out of range");
    ++scored;
  }
  if (scored == 0) throw UndefinedLossError("cross-entropy: every pixel is IGNORE");
  const double inv_n = 1.0 / static_cast<double>(scored);
  LossValue out{0.0, std::vector<double>(c_count, 0.0)};
  if (dprobs) dprobs->setZero(c_count, probs.num_pixels());
  for (std::size_t p = 0; p < ids.size(); ++p) {
    const auto y = ids[p];
    if (y == kIgnore) continue;
    const double prob = static_cast<double>(probs.values(y, static_cast<Eigen::Index>(p)));
    const double w = coef.empty() ? 1.0 : coef[y];
    out.per_class[y] -= w * std::log(std::max(prob, kProbFloor));
    if (dprobs && prob > kProbFloor) (*dprobs)(y, static_cast<Eigen::Index>(p)) = static_cast<T>(-w * inv_n / prob);
  }
  for (auto& v : out.per_class) {
    v *= inv_n;
    out.total += v;
  }
  return out;
}

}  // namespace detail

// Supervised CE against ground-truth labels (one label map per batch image).
template <typename T>
LossValue ce_loss(const ProbMap<T>& probs, std::span<const LabelMap> labels, Matrix<T>* dprobs = nullptr,
                  std::span<const double> coef = {}) {
  if (static_cast<int>(labels.size()) != probs.count) throw InputError("ce_loss: batch size mismatch");
  for (const auto& lm : labels)
    if (lm.height != probs.height || lm.width != probs.width) throw InputError("ce_loss: label map size mismatch");
  const auto ids = detail::flatten_ids(labels);
  return detail::cross_entropy(probs, ids, coef, dprobs);
}

template <typename T>
LossValue ce_loss(const ProbMap<T>& probs, const LabelMap& labels, Matrix<T>* dprobs = nullptr) {
  return ce_loss(probs, std::span<const LabelMap>(&labels, 1), dprobs);
}

// CE against one-hot pseudo-labels; all-zero rows are excluded from the mean.
template <typename T>
LossValue ce_pseudo_loss(const ProbMap<T>& probs, const OneHotLabels& pseudo, Matrix<T>* dprobs = nullptr,
                         std::span<const double> coef = {}) {
  if (pseudo.count != probs.count || pseudo.height != probs.height || pseudo.width != probs.width ||
      pseudo.num_classes != probs.num_classes())
    throw InputError("ce_pseudo_loss: shape mismatch");
  const auto ids = detail::ids_from_onehot(pseudo);
  return detail::cross_entropy(probs, ids, coef, dprobs);
}

// Forward KL(teacher || student), summed over classes, averaged over pixels.
template <typename T>
LossValue kl_loss(const ProbMap<T>& teacher, const ProbMap<T>& student, Matrix<T>* dstudent = nullptr,
                  std::span<const double> coef = {}) {
  if (teacher.values.rows() != student.values.rows() || teacher.values.cols() != student.values.cols() ||
      teacher.count != student.count || teacher.height != student.height || teacher.width != student.width)
    throw InputError("kl_loss: teacher and student shapes differ");
  const int c_count = student.num_classes();
  if (!coef.empty() && static_cast<int>(coef.size()) != c_count)
    throw InputError("kl_loss: coefficient vector has wrong length");
  const Eigen::Index n = student.num_pixels();
  if (n == 0) throw UndefinedLossError("kl_loss: empty input");
  const double inv_n = 1.0 / static_cast<double>(n);
  LossValue out{0.0, std::vector<double>(c_count, 0.0)};
  if (dstudent) dstudent->setZero(c_count, n);
  for (Eigen::Index p = 0; p < n; ++p)
    for (int c = 0; c < c_count; ++c) {
      const double pt = static_cast<double>(teacher.values(c, p));
      if (pt <= 0.0) continue;
      const double ps = static_cast<double>(student.values(c, p));
      const double w = coef.empty() ? 1.0 : coef[c];
      out.per_class[c] += w * pt * std::log(std::max(pt, kProbFloor) / std::max(ps, kProbFloor));
      if (dstudent && ps > kProbFloor) (*dstudent)(c, p) = static_cast<T>(-w * inv_n * pt / ps);
    }
  for (auto& v : out.per_class) {
    v *= inv_n;
    out.total += v;
  }
  return out;
}

// Gradients of the balanced loss w.r.t. the source and target student probabilities.
template <typename T>
struct BalancedGrads {
  Matrix<T> source;
  Matrix<T> target;
};

// L = CE_src + sum_c ce_coef[c] * CE_tgt[c] + sum_c kl_coef[c] * KL_tgt[c].
template <typename T>
LossValue balanced_finetune_loss(const ProbMap<T>& src_probs, std::span<const LabelMap> src_labels,
                                 const ProbMap<T>& tgt_probs, const OneHotLabels& pseudo,
                                 const ProbMap<T>& teacher_probs, const ClassWeights& weights,
                                 BalancedGrads<T>* grads = nullptr) {
  weights.validate(tgt_probs.num_classes());
  LossValue total = ce_loss(src_probs, src_labels, grads ? &grads->source : nullptr);
  Matrix<T> d_kl;
  total += ce_pseudo_loss(tgt_probs, pseudo, grads ? &grads->target : nullptr, std::span<const double>(weights.ce_coef));
  total += kl_loss(teacher_probs, tgt_probs, grads ? &d_kl : nullptr, std::span<const double>(weights.kl_coef));
  if (grads) grads->target += d_kl;
  return total;
}

}  // namespace duda
