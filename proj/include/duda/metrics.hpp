#pragma once

// Segmentation scoring: confusion matrix (rows = truth, columns = prediction),
// per-class IoU / recall, mIoU / mAcc over present classes, and the
// teacher-student IoU disparity table with its rank correlation against the
// normalised inconsistency.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "duda/error.hpp"
#include "duda/inconsistency.hpp"
#include "duda/tensor.hpp"

namespace duda {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = 0)
      : classes_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {}

  int num_classes() const { return classes_; }
  std::int64_t at(int truth, int pred) const { return counts_[static_cast<std::size_t>(truth) * classes_ + pred]; }
  std::int64_t& at(int truth, int pred) { return counts_[static_cast<std::size_t>(truth) * classes_ + pred]; }

  std::int64_t total() const { return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0}); }
  std::int64_t row_sum(int c) const {
    std::int64_t s = 0;
    for (int p = 0; p < classes_; ++p) s += at(c, p);
    return s;
  }
  std::int64_t col_sum(int c) const {
    std::int64_t s = 0;
    for (int t = 0; t < classes_; ++t) s += at(t, c);
    return s;
  }
  bool present(int c) const { return row_sum(c) > 0 || col_sum(c) > 0; }

  void merge(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) throw InputError("confusion merge: class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  static ConfusionMatrix from_rows(const std::vector<std::vector<std::int64_t>>& rows) {
    ConfusionMatrix cm(static_cast<int>(rows.size()));
    for (int t = 0; t < cm.classes_; ++t)
      for (int p = 0; p < cm.classes_; ++p) cm.at(t, p) = rows.at(t).at(p);
    return cm;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  int classes_;
  std::vector<std::int64_t> counts_;
};

inline void update_confusion(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& truth) {
  if (pred.height != truth.height || pred.width != truth.width)
    throw InputError("update_confusion: prediction and truth differ in size");
  const int c = cm.num_classes();
  for (std::size_t i = 0; i < truth.classes.size(); ++i) {
    const auto t = truth.classes[i];
    if (t == kIgnore) continue;
    const auto p = pred.classes[i];
    if (t >= c || p >= c)
      throw InputError("update_confusion: class id " + std::to_string(std::max<int>(t == kIgnore ? 0 : t, p)) +
                       " out of range for " + std::to_string(c) + " classes");
    ++cm.at(t, p);
  }
}

struct ClassIou {
  std::vector<double> iou;    // NaN where absent
  std::vector<bool> present;  // union non-empty
};

inline ClassIou iou_per_class(const ConfusionMatrix& cm) {
  ClassIou r;
  for (int c = 0; c < cm.num_classes(); ++c) {
    const auto denom = cm.row_sum(c) + cm.col_sum(c) - cm.at(c, c);
    r.present.push_back(denom > 0);
    r.iou.push_back(denom > 0 ? static_cast<double>(cm.at(c, c)) / static_cast<double>(denom)
                              : std::numeric_limits<double>::quiet_NaN());
  }
  return r;
}

// diag / row_sum; NaN for classes that never occur in the ground truth.
inline std::vector<double> recall_per_class(const ConfusionMatrix& cm) {
  std::vector<double> r;
  for (int c = 0; c < cm.num_classes(); ++c) {
    const auto row = cm.row_sum(c);
    r.push_back(row > 0 ? static_cast<double>(cm.at(c, c)) / static_cast<double>(row)
                        : std::numeric_limits<double>::quiet_NaN());
  }
  return r;
}

struct SegScores {
  double miou = 0.0;
  double macc = 0.0;
};

// mIoU over present classes; mAcc over present classes with ground-truth pixels.
inline SegScores miou_macc(const ConfusionMatrix& cm) {
  const auto iou = iou_per_class(cm);
  const auto rec = recall_per_class(cm);
  double iou_sum = 0.0, acc_sum = 0.0;
  int iou_n = 0, acc_n = 0;
  for (int c = 0; c < cm.num_classes(); ++c) {
    if (!iou.present[c]) continue;
    iou_sum += iou.iou[c];
    ++iou_n;
    if (!std::isnan(rec[c])) {
      acc_sum += rec[c];
      ++acc_n;
    }
  }
  if (iou_n == 0) throw UndefinedMetricError("miou_macc: no class is present");
  return {iou_sum / iou_n, acc_n ? acc_sum / acc_n : 0.0};
}

// Average ranks (1-based), ties share the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

// Spearman rank correlation (Pearson on average ranks). Empty when either
// side is constant or fewer than two pairs remain.
inline std::optional<double> spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InputError("spearman: length mismatch");
  if (a.size() < 2) return std::nullopt;
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

struct DisparityRow {
  int class_id = 0;
  double teacher_iou = 0.0;
  double student_iou = 0.0;
  double disparity = 0.0;  // teacher - student
  double normalized_inconsistency = 0.0;
};

struct DisparityReport {
  std::vector<DisparityRow> rows;  // classes present for both networks
  std::optional<double> spearman;  // empty = not applicable
};

inline DisparityReport disparity_report(const ConfusionMatrix& teacher_cm, const ConfusionMatrix& student_cm,
                                        const InconsistencyProfile& profile) {
  if (teacher_cm.num_classes() != student_cm.num_classes() ||
      static_cast<int>(profile.normalized.size()) != teacher_cm.num_classes())
    throw InputError("disparity_report: class counts differ");
  const auto t = iou_per_class(teacher_cm), s = iou_per_class(student_cm);
  DisparityReport rep;
  std::vector<double> disp, inc;
  for (int c = 0; c < teacher_cm.num_classes(); ++c) {
    if (!t.present[c] || !s.present[c]) continue;
    rep.rows.push_back({c, t.iou[c], s.iou[c], t.iou[c] - s.iou[c], profile.normalized[c]});
    disp.push_back(t.iou[c] - s.iou[c]);
    inc.push_back(profile.normalized[c]);
  }
  rep.spearman = spearman(disp, inc);
  return rep;
}

inline std::string class_label(int c, std::span<const std::string> names) {
  return c < static_cast<int>(names.size()) ? names[c] : "class" + std::to_string(c);
}

// One row per class (name, IoU, recall, I_norm) and a closing summary row.
inline void write_class_csv(std::ostream& os, const ConfusionMatrix& cm, const InconsistencyProfile* profile,
                            std::span<const std::string> names = {}) {
  const auto iou = iou_per_class(cm);
  const auto rec = recall_per_class(cm);
  auto num = [](double v) {
    if (std::isnan(v)) return std::string();
    std::ostringstream s;
    s << std::fixed << std::setprecision(6) << v;
    return s.str();
  };
  os << "class,iou,recall,normalized_inconsistency\n";
  for (int c = 0; c < cm.num_classes(); ++c) {
    os << class_label(c, names) << ',' << num(iou.iou[c]) << ',' << num(rec[c]) << ','
       << (profile && c < static_cast<int>(profile->normalized.size()) ? num(profile->normalized[c]) : "") << '\n';
  }
  const auto sc = miou_macc(cm);
  os << "mean," << num(sc.miou) << ',' << num(sc.macc) << ",\n";
}

}  // namespace duda
