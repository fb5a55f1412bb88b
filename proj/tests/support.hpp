#pragma once

// Random instance generators shared by the unit tests.

#include <cstdint>
#include <vector>

#include "duda/rng.hpp"
#include "duda/tensor.hpp"
#include "oracle/reference.hpp"

namespace testing_support {

template <typename T = double>
duda::ProbMap<T> random_probs(duda::Rng& rng, int count, int h, int w, int c, double sharpness = 3.0) {
  duda::ProbMap<T> p;
  p.count = count;
  p.height = h;
  p.width = w;
  p.values.resize(c, static_cast<Eigen::Index>(count) * h * w);
  for (Eigen::Index i = 0; i < p.values.cols(); ++i) {
    double s = 0.0;
    for (int k = 0; k < c; ++k) s += p.values(k, i) = static_cast<T>(std::exp(sharpness * rng.normal()));
    p.values.col(i) /= static_cast<T>(s);
  }
  return p;
}

template <typename T>
oracle::Table table(const duda::ClassScores<T>& m) {
  oracle::Table t(m.values.cols(), std::vector<double>(m.values.rows()));
  for (Eigen::Index i = 0; i < m.values.cols(); ++i)
    for (Eigen::Index k = 0; k < m.values.rows(); ++k) t[i][k] = static_cast<double>(m.values(k, i));
  return t;
}

inline duda::LabelMap random_labels(duda::Rng& rng, int h, int w, int c, double ignore_prob = 0.0) {
  duda::LabelMap lm(h, w);
  for (auto& v : lm.classes)
    v = rng.uniform() < ignore_prob ? duda::kIgnore : static_cast<std::uint8_t>(rng.below(c));
  return lm;
}

inline std::vector<int> as_ints(const duda::LabelMap& lm) {
  std::vector<int> out;
  for (auto v : lm.classes) out.push_back(v == duda::kIgnore ? -1 : v);
  return out;
}

inline duda::Image random_image(duda::Rng& rng, int h, int w) {
  duda::Image img(h, w);
  for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
  return img;
}

}  // namespace testing_support
