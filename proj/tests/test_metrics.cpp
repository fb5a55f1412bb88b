#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "duda/metrics.hpp"
#include "oracle/reference.hpp"
#include "support.hpp"

using namespace duda;
using testing_support::random_labels;

namespace {

ConfusionMatrix hand_built() { return ConfusionMatrix::from_rows({{2, 1, 0}, {0, 3, 0}, {1, 0, 2}}); }

ConfusionMatrix random_matrix(Rng& rng, int c) {
  ConfusionMatrix cm(c);
  for (int t = 0; t < c; ++t)
    for (int p = 0; p < c; ++p) cm.at(t, p) = static_cast<std::int64_t>(rng.below(20));
  return cm;
}

}  // namespace

TEST(Confusion, PerfectSingleClassIsDiagonal) {
  LabelMap lm(4, 4, 1);
  ConfusionMatrix cm(3);
  update_confusion(cm, lm, lm);
  EXPECT_EQ(cm.at(1, 1), 16);
  EXPECT_EQ(cm.total(), 16);
}

TEST(Confusion, IgnoredTruthIsSkipped) {
  LabelMap pred(2, 2, 0), truth(2, 2, 0);
  truth.classes[1] = truth.classes[3] = kIgnore;
  ConfusionMatrix cm(2);
  update_confusion(cm, pred, truth);
  EXPECT_EQ(cm.total(), 2);
}

TEST(Confusion, MatchesScalarCount) {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const int c = rng.range(2, 6);
    const auto pred = random_labels(rng, 8, 8, c), truth = random_labels(rng, 8, 8, c, 0.1);
    ConfusionMatrix cm(c);
    update_confusion(cm, pred, truth);
    for (int t = 0; t < c; ++t)
      for (int p = 0; p < c; ++p) {
        std::int64_t n = 0;
        for (int i = 0; i < 64; ++i) n += truth.classes[i] == t && pred.classes[i] == p;
        EXPECT_EQ(cm.at(t, p), n);
      }
  }
}

TEST(Confusion, Errors) {
  ConfusionMatrix cm(2);
  EXPECT_THROW(update_confusion(cm, LabelMap(2, 2, 3), LabelMap(2, 2, 0)), InputError);
  EXPECT_THROW(update_confusion(cm, LabelMap(2, 3, 0), LabelMap(2, 2, 0)), InputError);
}

TEST(Confusion, MergeEqualsConcatenation) {
  Rng rng(42);
  const int c = 4;
  ConfusionMatrix all(c), a(c), b(c);
  for (int k = 0; k < 10; ++k) {
    const auto pred = random_labels(rng, 5, 5, c), truth = random_labels(rng, 5, 5, c, 0.1);
    update_confusion(all, pred, truth);
    update_confusion(k < 4 ? a : b, pred, truth);
  }
  a.merge(b);
  EXPECT_EQ(a, all);
}

TEST(Iou, PerfectPredictionsScoreOne) {
  LabelMap lm(3, 3, 0);
  lm.classes[4] = 2;
  ConfusionMatrix cm(3);
  update_confusion(cm, lm, lm);
  const auto r = iou_per_class(cm);
  EXPECT_EQ(r.iou[0], 1.0);
  EXPECT_EQ(r.iou[2], 1.0);
  EXPECT_FALSE(r.present[1]);
  EXPECT_TRUE(std::isnan(r.iou[1]));
  const auto s = miou_macc(cm);
  EXPECT_EQ(s.miou, 1.0);
  EXPECT_EQ(s.macc, 1.0);
}

TEST(Iou, HandBuiltMatrix) {
  const auto r = iou_per_class(hand_built());
  EXPECT_DOUBLE_EQ(r.iou[0], 2.0 / 4.0);
  EXPECT_DOUBLE_EQ(r.iou[1], 3.0 / 4.0);
  EXPECT_DOUBLE_EQ(r.iou[2], 2.0 / 3.0);
  EXPECT_NEAR(miou_macc(hand_built()).miou, 0.6389, 1e-4);
  EXPECT_NEAR(miou_macc(hand_built()).macc, (2.0 / 3 + 1.0 + 2.0 / 3) / 3, 1e-12);
}

TEST(Iou, MatchesPairOracle) {
  Rng rng(43);
  for (int trial = 0; trial < 30; ++trial) {
    const int c = rng.range(2, 6);
    const auto pred = random_labels(rng, 6, 6, c), truth = random_labels(rng, 6, 6, c, 0.1);
    ConfusionMatrix cm(c);
    update_confusion(cm, pred, truth);
    const auto r = iou_per_class(cm);
    for (int k = 0; k < c; ++k) {
      const double ref = oracle::iou(testing_support::as_ints(pred), testing_support::as_ints(truth), k, -1);
      if (ref < 0) {
        EXPECT_FALSE(r.present[k]);
      } else {
        EXPECT_NEAR(r.iou[k], ref, 1e-15);
      }
    }
  }
}

TEST(Iou, NoPresentClassIsUndefined) { EXPECT_THROW(miou_macc(ConfusionMatrix(3)), UndefinedMetricError); }

TEST(Iou, UniformRandomPredictionsApproachOneOverTwoCMinusOne) {
  Rng rng(44);
  const int c = 4;
  ConfusionMatrix cm(c);
  for (int i = 0; i < 200000; ++i) ++cm.at(static_cast<int>(rng.below(c)), static_cast<int>(rng.below(c)));
  EXPECT_NEAR(miou_macc(cm).miou, 1.0 / (2 * c - 1), 0.02);
}

TEST(Iou, BoundsAndRecallDominance) {
  Rng rng(45);
  for (int trial = 0; trial < 200; ++trial) {
    const auto cm = random_matrix(rng, rng.range(1, 7));
    const auto iou = iou_per_class(cm);
    const auto rec = recall_per_class(cm);
    for (int k = 0; k < cm.num_classes(); ++k) {
      if (!iou.present[k]) continue;
      EXPECT_GE(iou.iou[k], 0.0);
      EXPECT_LE(iou.iou[k], 1.0);
      bool pure = true;
      for (int o = 0; o < cm.num_classes(); ++o)
        if (o != k && (cm.at(k, o) || cm.at(o, k))) pure = false;
      EXPECT_EQ(iou.iou[k] == 1.0, pure && cm.at(k, k) > 0);
      if (!std::isnan(rec[k])) EXPECT_GE(rec[k], iou.iou[k]);
    }
  }
}

TEST(Spearman, MatchesIndependentImplementation) {
  Rng rng(46);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = rng.range(3, 12);
    std::vector<double> a(n), b(n);
    for (int i = 0; i < n; ++i) {
      a[i] = static_cast<double>(rng.below(5));  // ties are common
      b[i] = rng.normal();
    }
    const auto r = spearman(a, b);
    const auto ra = oracle::ranks(a);
    bool constant = std::all_of(ra.begin(), ra.end(), [&](double v) { return v == ra[0]; });
    if (constant) {
      EXPECT_FALSE(r.has_value());
      continue;
    }
    ASSERT_TRUE(r.has_value());
    EXPECT_NEAR(*r, oracle::spearman(a, b), 1e-9);
  }
}

TEST(Disparity, IdenticalMatricesAreNotApplicable) {
  const auto cm = hand_built();
  InconsistencyProfile prof{{0.1, 0.2, 0.3}, {0.5, 1.0, 1.5}, {1, 1, 1}};
  const auto rep = disparity_report(cm, cm, prof);
  ASSERT_EQ(rep.rows.size(), 3u);
  for (const auto& row : rep.rows) EXPECT_EQ(row.disparity, 0.0);
  EXPECT_FALSE(rep.spearman.has_value());
}

TEST(Disparity, ProportionalDisparityHasUnitCorrelation) {
  // Teacher perfect; student IoUs 0.9, 0.5, 0.1 give disparities 0.1, 0.5, 0.9.
  const auto teacher = ConfusionMatrix::from_rows({{10, 0, 0}, {0, 10, 0}, {0, 0, 10}});
  const auto student = ConfusionMatrix::from_rows({{9, 1, 0}, {0, 5, 5}, {0, 0, 1}});
  InconsistencyProfile prof{{0.1, 0.5, 0.9}, {0.2, 1.0, 1.8}, {1, 1, 1}};
  const auto rep = disparity_report(teacher, student, prof);
  ASSERT_TRUE(rep.spearman.has_value());
  EXPECT_NEAR(*rep.spearman, 1.0, 1e-12);
}

TEST(Disparity, RandomMatricesMatchReferenceStatistic) {
  Rng rng(47);
  for (int trial = 0; trial < 50; ++trial) {
    const int c = rng.range(3, 7);
    const auto t = random_matrix(rng, c), s = random_matrix(rng, c);
    InconsistencyProfile prof;
    for (int k = 0; k < c; ++k) prof.normalized.push_back(rng.uniform(0.0, 2.0));
    const auto rep = disparity_report(t, s, prof);
    std::vector<double> d, i;
    for (const auto& row : rep.rows) d.push_back(row.disparity), i.push_back(row.normalized_inconsistency);
    if (!rep.spearman) continue;
    EXPECT_NEAR(*rep.spearman, oracle::spearman(d, i), 1e-9);
  }
}

TEST(ClassCsv, HasOneRowPerClassAndSummary) {
  std::ostringstream os;
  InconsistencyProfile prof{{0.1, 0.2, 0.3}, {0.5, 1.0, 1.5}, {1, 1, 1}};
  const std::vector<std::string> names{"bg", "a", "b"};
  write_class_csv(os, hand_built(), &prof, names);
  EXPECT_EQ(os.str(),
            "class,iou,recall,normalized_inconsistency\n"
            "bg,0.500000,0.666667,0.500000\n"
            "a,0.750000,1.000000,1.000000\n"
            "b,0.666667,0.666667,1.500000\n"
            "mean,0.638889,0.777778,\n");
}
