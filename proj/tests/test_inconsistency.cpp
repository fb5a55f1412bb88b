#include <gtest/gtest.h>

#include <numeric>

#include "duda/inconsistency.hpp"
#include "oracle/reference.hpp"
#include "support.hpp"

using namespace duda;

namespace {

OneHotLabels from_ids(const std::vector<int>& ids, int h, int w, int c) {
  LabelMap lm(h, w);
  for (std::size_t i = 0; i < ids.size(); ++i) lm.classes[i] = static_cast<std::uint8_t>(ids[i]);
  return one_hot(lm, c);
}

// Random class map where class `c` is placed with the given density.
std::vector<int> random_ids(Rng& rng, int pixels, int classes) {
  std::vector<int> v(pixels);
  for (auto& x : v) x = static_cast<int>(rng.below(classes));
  return v;
}

std::vector<std::uint8_t> bytes(const std::vector<int>& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST(ImageInconsistency, IdenticalPredictionsAreConsistent) {
  std::vector<int> ids(32 * 32, 0);
  for (int i = 0; i < 40; ++i) ids[i] = 1;
  const auto p = from_ids(ids, 32, 32, 2);
  const auto r = image_inconsistency(p, p, 1);
  EXPECT_EQ(r.i_c, 0.0);
  EXPECT_EQ(r.n_c, 1);
}

TEST(ImageInconsistency, ThreePixelExampleOn32x32) {
  std::vector<int> t(1024, 0), s(1024, 0);
  for (int p : {1, 2, 3}) t[p] = 1;
  for (int p : {2, 3, 4}) s[p] = 1;
  const auto r = image_inconsistency(from_ids(t, 32, 32, 2), from_ids(s, 32, 32, 2), 1);
  const auto ref = oracle::inconsistency(t, s, 1, 0.001);
  EXPECT_DOUBLE_EQ(r.i_c, 0.5);
  EXPECT_DOUBLE_EQ(r.i_c, ref.i);
  EXPECT_EQ(r.n_c, 1);
  EXPECT_EQ(ref.n, 1);
}

TEST(ImageInconsistency, DisjointPredictionsAreFullyInconsistent) {
  std::vector<int> t(400, 0), s(400, 0);
  for (int i = 0; i < 10; ++i) t[i] = 2, s[100 + i] = 2;
  const auto r = image_inconsistency(from_ids(t, 20, 20, 3), from_ids(s, 20, 20, 3), 2);
  EXPECT_EQ(r.i_c, 1.0);
  EXPECT_EQ(r.n_c, 1);
}

TEST(ImageInconsistency, AbsentClassIsUnobserved) {
  std::vector<int> t(16, 0);
  const auto r = image_inconsistency(from_ids(t, 4, 4, 3), from_ids(t, 4, 4, 3), 2);
  EXPECT_EQ(r.i_c, 0.0);
  EXPECT_EQ(r.n_c, 0);
}

TEST(ImageInconsistency, TinyUnionBelowThresholdIsUnobserved) {
  std::vector<int> t(100 * 100, 0), s(100 * 100, 0);
  for (int i = 0; i < 9; ++i) t[i] = 1;  // 9 < 0.001 * 10000
  EXPECT_EQ(image_inconsistency(from_ids(t, 100, 100, 2), from_ids(s, 100, 100, 2), 1).n_c, 0);
  t[9] = 1;
  EXPECT_EQ(image_inconsistency(from_ids(t, 100, 100, 2), from_ids(s, 100, 100, 2), 1).n_c, 1);
}

TEST(ImageInconsistency, ShapeMismatchIsInputError) {
  EXPECT_THROW(image_inconsistency(from_ids({0, 0, 0, 0}, 2, 2, 2), from_ids({0, 0}, 1, 2, 2), 0), InputError);
}

TEST(ImageInconsistency, MatchesSetOracleSymmetricAndBounded) {
  Rng rng(21);
  for (int trial = 0; trial < 300; ++trial) {
    const int h = rng.range(1, 12), w = rng.range(1, 12), c = rng.range(2, 6);
    const auto t = random_ids(rng, h * w, c), s = random_ids(rng, h * w, c);
    const double ratio = rng.uniform(0.0, 0.2);
    const auto pt = from_ids(t, h, w, c), ps = from_ids(s, h, w, c);
    for (int k = 0; k < c; ++k) {
      const auto r = image_inconsistency(pt, ps, k, ratio);
      const auto back = image_inconsistency(ps, pt, k, ratio);
      const auto ref = oracle::inconsistency(t, s, k, ratio);
      EXPECT_NEAR(r.i_c, ref.i, 1e-15);
      EXPECT_EQ(r.n_c, ref.n);
      EXPECT_EQ(r.i_c, back.i_c);
      EXPECT_EQ(r.n_c, back.n_c);
      EXPECT_GE(r.i_c, 0.0);
      EXPECT_LE(r.i_c, 1.0);
    }
  }
}

TEST(ImageInconsistency, GrowingDisagreementIsStrictlyMonotone) {
  Rng rng(22);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 64;
    std::vector<int> t(n, 0), s(n, 0);
    const int shared = rng.range(1, 10);
    for (int i = 0; i < shared; ++i) t[i] = s[i] = 1;
    double prev = image_inconsistency(from_ids(t, 8, 8, 2), from_ids(s, 8, 8, 2), 1, 0.0).i_c;
    for (int extra = shared; extra < n; ++extra) {
      (rng.below(2) ? t : s)[extra] = 1;  // grow the symmetric difference, intersection fixed
      const double cur = image_inconsistency(from_ids(t, 8, 8, 2), from_ids(s, 8, 8, 2), 1, 0.0).i_c;
      EXPECT_GT(cur, prev);
      prev = cur;
    }
  }
}

TEST(Accumulator, IdenticalImageTwice) {
  std::vector<int> ids(100, 0);
  for (int i = 0; i < 30; ++i) ids[i] = 1;
  const auto p = from_ids(ids, 10, 10, 3);
  InconsistencyAccumulator acc(3);
  acc.accumulate(p, p);
  acc.accumulate(p, p);
  EXPECT_EQ(acc.sum_i(), (std::vector<double>{0, 0, 0}));
  EXPECT_EQ(acc.sum_n(), (std::vector<std::int64_t>{2, 2, 0}));
}

TEST(Accumulator, SingleImageEqualsImageScores) {
  Rng rng(23);
  const auto t = random_ids(rng, 36, 4), s = random_ids(rng, 36, 4);
  InconsistencyAccumulator acc(4);
  acc.accumulate(from_ids(t, 6, 6, 4), from_ids(s, 6, 6, 4));
  for (int c = 0; c < 4; ++c) {
    const auto r = image_inconsistency(from_ids(t, 6, 6, 4), from_ids(s, 6, 6, 4), c);
    EXPECT_EQ(acc.sum_i()[c], r.n_c ? r.i_c : 0.0);
    EXPECT_EQ(acc.sum_n()[c], r.n_c);
  }
}

TEST(Accumulator, ReplayOracleOverRandomStream) {
  Rng rng(24);
  const int c = 5;
  InconsistencyAccumulator acc(c);
  std::vector<double> si(c, 0.0);
  std::vector<std::int64_t> sn(c, 0);
  for (int k = 0; k < 10; ++k) {
    const auto t = random_ids(rng, 64, c), s = random_ids(rng, 64, c);
    acc.accumulate(from_ids(t, 8, 8, c), from_ids(s, 8, 8, c));
    for (int cls = 0; cls < c; ++cls) {
      const auto r = oracle::inconsistency(t, s, cls, kPresenceRatio);
      if (r.n) si[cls] += r.i, sn[cls] += 1;
    }
  }
  for (int cls = 0; cls < c; ++cls) {
    EXPECT_NEAR(acc.sum_i()[cls], si[cls], 1e-9);
    EXPECT_EQ(acc.sum_n()[cls], sn[cls]);
    EXPECT_GE(acc.sum_i()[cls], 0.0);
    EXPECT_LE(acc.sum_i()[cls], static_cast<double>(acc.sum_n()[cls]));
  }
}

TEST(Accumulator, BatchStreamAndMergeAgree) {
  Rng rng(25);
  for (int trial = 0; trial < 20; ++trial) {
    const int c = rng.range(2, 6), n = rng.range(2, 8), h = 5, w = 7;
    std::vector<LabelMap> tm, sm;
    for (int k = 0; k < n; ++k) {
      tm.push_back(testing_support::random_labels(rng, h, w, c));
      sm.push_back(testing_support::random_labels(rng, h, w, c));
    }
    InconsistencyAccumulator batch(c), stream(c), left(c), right(c);
    batch.accumulate(one_hot(std::span<const LabelMap>(tm), c), one_hot(std::span<const LabelMap>(sm), c));
    const int split = rng.range(1, n - 1);
    for (int k = 0; k < n; ++k) {
      stream.accumulate_ids(tm[k].classes, sm[k].classes);
      (k < split ? left : right).accumulate(one_hot(tm[k], c), one_hot(sm[k], c));
    }
    left.merge(right);
    EXPECT_EQ(batch, stream);
    EXPECT_EQ(batch.sum_n(), left.sum_n());
    for (int k = 0; k < c; ++k) EXPECT_NEAR(batch.sum_i()[k], left.sum_i()[k], 1e-12);
    const auto a = finalize(batch), b = finalize(left);
    for (int k = 0; k < c; ++k) EXPECT_NEAR(a.normalized[k], b.normalized[k], 1e-12);
  }
  InconsistencyAccumulator a(3), b(4);
  EXPECT_THROW(a.merge(b), StructuralError);
}

namespace {

InconsistencyAccumulator with_sums(std::vector<double> si, std::vector<std::int64_t> sn) {
  InconsistencyAccumulator acc(static_cast<int>(si.size()));
  // Each image: teacher marks 10 pixels, student a prefix of them, so
  // i = 1 - s/10 (multiples of 0.1 only).
  for (std::size_t c = 0; c < si.size(); ++c) {
    const int n = static_cast<int>(sn[c]);
    for (int k = 0; k < n; ++k) {
      const double target = si[c] / n;
      const int s = static_cast<int>(std::lround(10.0 * (1.0 - target)));
      std::vector<std::uint8_t> t(20, 255), st(20, 255);
      for (int p = 0; p < 10; ++p) t[p] = static_cast<std::uint8_t>(c);
      for (int p = 0; p < s; ++p) st[p] = static_cast<std::uint8_t>(c);
      acc.accumulate_ids(t, st);
    }
  }
  return acc;
}

}  // namespace

TEST(Finalize, EqualInconsistencyNormalizesToOnes) {
  const auto prof = finalize(with_sums({0.4, 0.8, 1.2}, {1, 2, 3}));
  for (int c = 0; c < 3; ++c) {
    EXPECT_NEAR(prof.inconsistency[c], 0.4, 1e-12);
    EXPECT_NEAR(prof.normalized[c], 1.0, 1e-12);
  }
}

TEST(Finalize, TwoClassArithmetic) {
  const auto prof = finalize(with_sums({0.2, 0.6}, {1, 1}));
  EXPECT_NEAR(prof.inconsistency[0], 0.2, 1e-12);
  EXPECT_NEAR(prof.inconsistency[1], 0.6, 1e-12);
  EXPECT_NEAR(prof.normalized[0], 0.5, 1e-12);
  EXPECT_NEAR(prof.normalized[1], 1.5, 1e-12);
}

TEST(Finalize, UnobservedClassGetsObservedMean) {
  const auto prof = finalize(with_sums({0.2, 0.6, 0.0}, {1, 1, 0}));
  EXPECT_NEAR(prof.inconsistency[2], 0.4, 1e-12);
  EXPECT_EQ(prof.observations[2], 0);
  EXPECT_NEAR(prof.normalized[0] + prof.normalized[1] + prof.normalized[2], 3.0, 1e-12);
}

TEST(Finalize, PerfectAgreementGivesOnes) {
  const auto prof = finalize(with_sums({0.0, 0.0}, {3, 2}));
  EXPECT_EQ(prof.normalized, (std::vector<double>{1.0, 1.0}));
}

TEST(Finalize, NothingObservedIsEstimationError) {
  EXPECT_THROW(finalize(InconsistencyAccumulator(4)), EstimationError);
}

TEST(Finalize, RandomStatesSumToC) {
  Rng rng(26);
  for (int trial = 0; trial < 100; ++trial) {
    const int c = rng.range(2, 8);
    InconsistencyAccumulator acc(c, 0.0);
    for (int k = 0; k < rng.range(1, 5); ++k) {
      const auto t = random_ids(rng, 30, c), s = random_ids(rng, 30, c);
      acc.accumulate_ids(bytes(t), bytes(s));
    }
    const auto prof = finalize(acc);
    EXPECT_NEAR(std::accumulate(prof.normalized.begin(), prof.normalized.end(), 0.0), c, 1e-9);
    for (double v : prof.inconsistency) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Weights, UniformProfileGivesOnes) {
  InconsistencyProfile prof{{0.3, 0.3, 0.3}, {1.0, 1.0, 1.0}, {1, 1, 1}};
  const auto w = weights_from_profile(prof);
  EXPECT_EQ(w.ce_coef, (std::vector<double>{1, 1, 1}));
  EXPECT_EQ(w.kl_coef, (std::vector<double>{1, 1, 1}));
}

TEST(Weights, DominantClassIsClipped) {
  // C = 8, one class far more inconsistent than the rest: I' = 8 * 0.9 / (0.9 + 7 * 0.1) = 4.5.
  std::vector<double> si(8, 0.1);
  si[3] = 0.9;
  const auto prof = finalize(with_sums(si, std::vector<std::int64_t>(8, 1)));
  EXPECT_GT(prof.normalized[3], 2.5);
  const auto w = weights_from_profile(prof);
  EXPECT_EQ(w.ce_coef[3], 0.0);
  EXPECT_EQ(w.kl_coef[3], 2.0);
  EXPECT_NO_THROW(w.validate(8));
}

TEST(Weights, AlwaysSumToTwo) {
  Rng rng(27);
  for (int trial = 0; trial < 100; ++trial) {
    const int c = rng.range(1, 12);
    InconsistencyProfile prof;
    for (int k = 0; k < c; ++k) prof.normalized.push_back(rng.uniform(0.0, 4.0));
    const auto w = weights_from_profile(prof);
    for (int k = 0; k < c; ++k) {
      EXPECT_NEAR(w.ce_coef[k] + w.kl_coef[k], 2.0, 1e-12);
      EXPECT_GE(w.ce_coef[k], 0.0);
      EXPECT_GE(w.kl_coef[k], 0.0);
    }
  }
}
