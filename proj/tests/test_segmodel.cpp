#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "duda/experiment.hpp"
#include "duda/losses.hpp"
#include "duda/segmodel.hpp"
#include "duda/trainer.hpp"
#include "oracle/reference.hpp"
#include "support.hpp"

using namespace duda;
using testing_support::random_image;

namespace {

Architecture single_conv(int cout, int k = 3, int stride = 1) {
  return {"one", {LayerSpec::conv(3, cout, k, stride)}};
}

Logits<double> logits_from(std::vector<double> v) {
  Logits<double> l;
  l.count = l.height = l.width = 1;
  l.values = Eigen::Map<Matrix<double>>(v.data(), static_cast<Eigen::Index>(v.size()), 1);
  return l;
}

}  // namespace

TEST(ParamCount, SingleConvWithBias) {
  EXPECT_EQ(param_count(single_conv(8)), 224);
  SegModel<double> m(single_conv(8), 4, 4);
  EXPECT_EQ(param_count(m), 224);
}

TEST(ParamCount, LargeIsAtLeastFiveTimesSmall) {
  const auto small = param_count(small_reference(6)), large = param_count(large_reference(6));
  EXPECT_EQ(small, 2606);
  EXPECT_GE(large, 5 * small);
  EXPECT_EQ(param_count(SegModel<float>(large_reference(6), 64, 64)), large);
}

TEST(ParamCount, EmptyArchitectureIsZero) {
  EXPECT_EQ(param_count(Architecture{}), 0);
  EXPECT_EQ(param_count(SegModel<float>(Architecture{}, 8, 8)), 0);
}

TEST(Architecture, DescriptorRoundTrips) {
  for (const auto& a : {small_reference(6), large_reference(5), small_heterogeneous(7)}) {
    const auto b = Architecture::parse(a.descriptor());
    EXPECT_EQ(a, b);
    EXPECT_EQ(b.descriptor(), a.descriptor());
  }
  EXPECT_THROW(Architecture::parse("x:conv5x5s1/3>4"), ConfigError);
  EXPECT_THROW(architecture_by_name("medium", 6), ConfigError);
}

TEST(SegModel, RejectsBrokenArchitectures) {
  EXPECT_THROW(SegModel<float>(Architecture{"bad", {LayerSpec::conv(4, 8, 3)}}, 8, 8), StructuralError);
  EXPECT_THROW(SegModel<float>(Architecture{"bad", {LayerSpec::conv(3, 8, 3), LayerSpec::conv(4, 2, 1)}}, 8, 8),
               StructuralError);
  EXPECT_THROW(SegModel<float>(single_conv(4, 3, 2), 8, 8), StructuralError);  // output smaller than input
  EXPECT_THROW(SegModel<float>(small_reference(6), 6, 6), StructuralError);
}

TEST(Forward, ZeroFinalLayerGivesZeroLogits) {
  SegModel<double> m(small_reference(6), 16, 16);
  m.init(3);
  const auto& g = m.groups();
  m.group(g.size() - 1).setZero();
  m.group(g.size() - 2).setZero();
  Rng rng(1);
  const auto out = m.forward(random_image(rng, 16, 16));
  EXPECT_EQ(out.values.rows(), 6);
  EXPECT_EQ(out.values.cols(), 256);
  EXPECT_EQ(out.values.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Forward, Deterministic) {
  SegModel<float> a(small_reference(6), 16, 16), b(small_reference(6), 16, 16);
  a.init(42);
  b.init(42);
  Rng rng(2);
  const auto img = random_image(rng, 16, 16);
  EXPECT_EQ(a.forward(img).values, a.forward(img).values);
  EXPECT_EQ(a.forward(img).values, b.forward(img).values);
}

TEST(Forward, SoftmaxRowsSumToOne) {
  Rng rng(9);
  for (const auto& arch : {small_reference(6), large_reference(6), small_heterogeneous(6)}) {
    SegModel<float> m(arch, 16, 16);
    m.init(rng.next());
    const auto p = softmax(m.forward(random_image(rng, 16, 16)));
    ASSERT_TRUE(p.values.allFinite());
    for (Eigen::Index i = 0; i < p.values.cols(); ++i) EXPECT_NEAR(p.values.col(i).sum(), 1.0f, 1e-6f);
  }
}

TEST(Forward, ShapeMismatchIsInputError) {
  SegModel<float> m(small_reference(6), 16, 16);
  EXPECT_THROW(m.forward(Image(8, 16)), InputError);
}

TEST(Forward, ConvolutionMatchesDirectLoop) {
  Rng rng(4);
  for (int stride : {1, 2})
    for (int k : {1, 3}) {
      if (k == 1 && stride == 2) continue;
      const int h = 6, w = 8, cin = 3, cout = 5;
      // A stride-2 model needs an upsample to restore the resolution; compare before it.
      Architecture arch{"c", {LayerSpec::conv(cin, cout, k, stride)}};
      if (stride == 2) arch.layers.push_back(LayerSpec::upsample());
      SegModel<double> m(arch, h, w);
      std::vector<double> wt(static_cast<std::size_t>(cout) * k * k * cin), bias(cout);
      for (auto& v : wt) v = rng.normal();
      for (auto& v : bias) v = rng.normal();
      // Library storage is (ky, kx, cin, cout) row-major.
      auto& p = m.parameters();
      for (int o = 0; o < cout; ++o)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx)
            for (int c = 0; c < cin; ++c)
              p[((ky * k + kx) * cin + c) * cout + o] = wt[((static_cast<std::size_t>(o) * k + ky) * k + kx) * cin + c];
      for (int o = 0; o < cout; ++o) p[static_cast<Eigen::Index>(wt.size()) + o] = bias[o];

      const auto img = random_image(rng, h, w);
      std::vector<double> x(static_cast<std::size_t>(cin) * h * w);
      for (int c = 0; c < cin; ++c)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) x[(static_cast<std::size_t>(c) * h + y) * w + xx] = img.at(y, xx, c);
      int oh = 0, ow = 0;
      const auto ref = oracle::conv2d(x, cin, h, w, wt, bias, cout, k, stride, oh, ow);

      ForwardTape<double> tape;
      m.forward(std::span<const Image>(&img, 1), &tape);
      const auto& conv_out = tape.activations[1];
      ASSERT_EQ(conv_out.cols(), oh * ow);
      for (int o = 0; o < cout; ++o)
        for (int i = 0; i < oh * ow; ++i)
          EXPECT_NEAR(conv_out(o, i), ref[static_cast<std::size_t>(o) * oh * ow + i], 1e-12) << "k" << k << " s" << stride;
    }
}

TEST(Forward, UpsampleAndPoolPreserveConstants) {
  Architecture arch{"ident", {LayerSpec::conv(3, 2, 1), LayerSpec::avgpool(), LayerSpec::upsample()}};
  SegModel<double> m(arch, 8, 8);
  m.parameters().setZero();
  m.parameters().tail(2) << 0.25, -1.5;  // biases
  const auto out = m.forward(Image(8, 8, 0.3f));
  for (Eigen::Index i = 0; i < out.values.cols(); ++i) {
    EXPECT_DOUBLE_EQ(out.values(0, i), 0.25);
    EXPECT_DOUBLE_EQ(out.values(1, i), -1.5);
  }
}

TEST(Forward, BatchEqualsPerImage) {
  Rng rng(12);
  SegModel<double> m(small_reference(4), 8, 8);
  m.init(5);
  std::vector<Image> batch{random_image(rng, 8, 8), random_image(rng, 8, 8), random_image(rng, 8, 8)};
  const auto all = m.forward(std::span<const Image>(batch));
  for (int n = 0; n < 3; ++n) {
    const auto one = m.forward(batch[n]);
    EXPECT_LT((all.image(n) - one.values).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Softmax, ZeroLogitsAreUniform) {
  const auto p = softmax(logits_from({0, 0, 0, 0}));
  for (int c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(p.values(c, 0), 0.25);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
  const auto p = softmax(logits_from({1000, 0}));
  EXPECT_DOUBLE_EQ(p.values(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(p.values(1, 0), 0.0);
}

TEST(Softmax, MatchesHighPrecisionReference) {
  const auto p = softmax(logits_from({1, 2, 3}));
  const auto ref = oracle::softmax({1.0L, 2.0L, 3.0L});
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(p.values(c, 0), static_cast<double>(ref[c]), 1e-12);
}

TEST(Softmax, RandomColumnsMatchReference) {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const int c = rng.range(2, 9);
    std::vector<double> z(c);
    std::vector<long double> zl(c);
    for (int i = 0; i < c; ++i) zl[i] = z[i] = rng.normal() * rng.uniform(0.0, 50.0);
    const auto p = softmax(logits_from(z));
    const auto ref = oracle::softmax(zl);
    for (int i = 0; i < c; ++i) EXPECT_NEAR(p.values(i, 0), static_cast<double>(ref[i]), 1e-12);
  }
}

TEST(Softmax, NanIsNumericError) {
  EXPECT_THROW(softmax(logits_from({0.0, std::nan("")})), NumericError);
  EXPECT_THROW(softmax(logits_from({0.0, INFINITY})), NumericError);
}

TEST(Ema, AlphaOneKeepsTeacher) {
  Vector<double> t(3), s(3);
  t << 1, 2, 3;
  s << 7, 8, 9;
  ema_update(t, s, 1.0);
  EXPECT_EQ(t, (Vector<double>(3) << 1, 2, 3).finished());
}

TEST(Ema, SingleStepArithmetic) {
  Vector<double> t = Vector<double>::Constant(1, 1.0), s = Vector<double>::Constant(1, 0.0);
  ema_update(t, s, 0.9);
  EXPECT_NEAR(t[0], 0.9, 1e-15);
}

TEST(Ema, GeometricDecayTowardFixedStudent) {
  Rng rng(77);
  const int n = 50;
  Vector<double> t(n), s(n);
  for (int i = 0; i < n; ++i) t[i] = rng.normal(), s[i] = rng.normal();
  const Vector<double> gap0 = t - s;
  for (int k = 0; k < 100; ++k) ema_update(t, s, 0.999);
  for (int i = 0; i < n; ++i) EXPECT_LE(std::abs(t[i] - s[i]), std::pow(0.999, 100) * std::abs(gap0[i]) + 1e-9);
}

TEST(Ema, MatchesScalarLoop) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = rng.range(1, 40);
    const double alpha = rng.uniform(1e-3, 1.0);
    Vector<double> t(n), s(n);
    for (int i = 0; i < n; ++i) t[i] = rng.normal() * 10, s[i] = rng.normal() * 10;
    std::vector<double> ref(n);
    for (int i = 0; i < n; ++i) ref[i] = alpha * t[i] + (1.0 - alpha) * s[i];
    ema_update(t, s, alpha);
    for (int i = 0; i < n; ++i) EXPECT_NEAR(t[i], ref[i], 1e-7);
  }
}

TEST(Ema, Errors) {
  Vector<double> t(3), s(4);
  t.setZero();
  s.setZero();
  EXPECT_THROW(ema_update(t, s, 0.5), StructuralError);
  Vector<double> u = Vector<double>::Zero(3);
  EXPECT_THROW(ema_update(t, u, 0.0), ConfigError);
  EXPECT_THROW(ema_update(t, u, 1.5), ConfigError);
  SegModel<float> a(small_reference(6), 8, 8), b(small_heterogeneous(6), 8, 8);
  EXPECT_THROW(ema_update(a, b, 0.9), StructuralError);
}

TEST(Clone, CopiesAndIsolates) {
  SegModel<float> src(small_reference(6), 16, 16), dst(small_reference(6), 16, 16);
  src.init(1);
  dst.init(2);
  clone_into(src, dst);
  EXPECT_EQ(src.checksum(), dst.checksum());
  Rng rng(3);
  const auto img = random_image(rng, 16, 16);
  EXPECT_EQ(src.forward(img).values, dst.forward(img).values);
  const auto before = src.checksum();
  dst.parameters()[0] += 1.0f;
  EXPECT_EQ(src.checksum(), before);
  SegModel<float> other(large_reference(6), 16, 16);
  EXPECT_THROW(clone_into(src, other), StructuralError);
}

TEST(Clone, FirstEmaStepAfterCloneIsIdentity) {
  SegModel<float> ls(small_reference(6), 16, 16), lt(small_reference(6), 16, 16);
  ls.init(10);
  clone_into(ls, lt);
  ema_update(lt, ls, 0.999);
  EXPECT_LT((lt.parameters() - ls.parameters()).cwiseAbs().maxCoeff(), 1e-6f);
}

// Finite-difference check of every loss through the full model.
namespace {

using LossFn = std::function<double(const ProbMap<double>&, Matrix<double>*)>;

void check_gradient(const Architecture& arch, const LossFn& loss, std::uint64_t seed) {
  const int h = 8, w = 8;
  SegModel<double> m(arch, h, w);
  m.init(seed);
  Rng rng(seed + 1);
  std::vector<Image> batch{random_image(rng, h, w), random_image(rng, h, w)};
  ForwardTape<double> tape;
  const auto probs = softmax(m.forward(std::span<const Image>(batch), &tape));
  Matrix<double> d;
  loss(probs, &d);
  Vector<double> g = Vector<double>::Zero(m.parameters().size());
  m.backward(tape, softmax_backward(probs, d), g);

  auto value = [&] { return loss(softmax(m.forward(std::span<const Image>(batch))), nullptr); };
  int checked = 0, attempts = 0;
  while (checked < 24 && attempts < 400) {
    ++attempts;
    const auto i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(m.parameters().size())));
    const double eps = 1e-6, orig = m.parameters()[i];
    m.parameters()[i] = orig + eps;
    const double up = value();
    m.parameters()[i] = orig - eps;
    const double down = value();
    m.parameters()[i] = orig;
    const double num = (up - down) / (2 * eps);
    if (std::abs(num) < 1e-7 && std::abs(g[i]) < 1e-7) continue;  // dead unit
    const double rel = std::abs(num - g[i]) / std::max(std::abs(num), std::abs(g[i]));
    EXPECT_LT(rel, 1e-3) << arch.name << " param " << i << " analytic " << g[i] << " numeric " << num;
    ++checked;
  }
  EXPECT_GE(checked, 20);
}

}  // namespace

class GradientCheck : public ::testing::TestWithParam<std::string> {};

TEST_P(GradientCheck, AnalyticMatchesFiniteDifference) {
  const int c = 4;
  const auto arch = architecture_by_name(GetParam(), c);
  Rng rng(101);
  std::vector<LabelMap> labels{testing_support::random_labels(rng, 8, 8, c, 0.1),
                               testing_support::random_labels(rng, 8, 8, c, 0.1)};
  const auto pseudo = one_hot(std::span<const LabelMap>(labels), c);
  const auto teacher = testing_support::random_probs(rng, 2, 8, 8, c, 1.0);
  const std::vector<double> coef{0.5, 1.7, 0.1, 1.2};
  ClassWeights weights{{1.5, 0.3, 1.9, 0.8}, {0.5, 1.7, 0.1, 1.2}};

  check_gradient(arch, [&](const ProbMap<double>& p, Matrix<double>* d) {
    return ce_loss(p, std::span<const LabelMap>(labels), d).total;
  }, 1);
  check_gradient(arch, [&](const ProbMap<double>& p, Matrix<double>* d) {
    return ce_pseudo_loss(p, pseudo, d, std::span<const double>(coef)).total;
  }, 2);
  check_gradient(arch, [&](const ProbMap<double>& p, Matrix<double>* d) {
    return kl_loss(teacher, p, d, std::span<const double>(coef)).total;
  }, 3);
  // Balanced loss: first image plays the source, second the target.
  check_gradient(arch, [&](const ProbMap<double>& p, Matrix<double>* d) {
    const auto src = slice_images(p, 0, 1), tgt = slice_images(p, 1, 1);
    const auto t_probs = slice_images(teacher, 1, 1);
    const auto t_pseudo = one_hot(labels[1], c);
    BalancedGrads<double> g;
    const auto v = balanced_finetune_loss(src, std::span<const LabelMap>(labels.data(), 1), tgt, t_pseudo, t_probs,
                                          weights, d ? &g : nullptr);
    if (d) {
      d->resize(p.values.rows(), p.values.cols());
      d->leftCols(src.num_pixels()) = g.source;
      d->rightCols(tgt.num_pixels()) = g.target;
    }
    return v.total;
  }, 4);
}

INSTANTIATE_TEST_SUITE_P(Architectures, GradientCheck, ::testing::Values("small", "small_het"));

TEST(Capacity, LargeFitsSourceBetterThanSmall) {
  auto spec = SceneSpec::default_spec();
  const auto bench = build_benchmark(spec, DomainShift::default_shift(), 50, 1, 1);
  const auto& src = bench.source();
  OptimConfig opt;
  PretrainConfig pc{300, 4};
  SegModel<float> small(small_reference(6), 64, 64), large(large_reference(6), 64, 64);
  small.init(1);
  large.init(1);
  pretrain_on_source(small, src, pc, opt, 7);
  pretrain_on_source(large, src, pc, opt, 7);
  auto train_loss = [&](const SegModel<float>& m) {
    double total = 0;
    for (std::size_t i = 0; i < src.size(); ++i) total += ce_loss(softmax(m.forward(src.images[i])), src.labels[i]).total;
    return total / static_cast<double>(src.size());
  };
  const double ls = train_loss(small), ll = train_loss(large);
  EXPECT_GT(param_count(large), param_count(small));
  EXPECT_LT(ll, ls) << "large " << ll << " small " << ls;
}
