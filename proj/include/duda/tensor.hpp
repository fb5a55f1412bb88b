#pragma once

// Pixel grids shared by every module.
//
// Images are stored interleaved (HWC). Per-class score maps for a batch are
// stored as a column-major C x (N*H*W) Eigen matrix, so one column holds the
// class vector of one pixel and pixels of image n occupy columns
// [n*H*W, (n+1)*H*W).

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "duda/error.hpp"

namespace duda {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

inline constexpr std::uint8_t kIgnore = 255;

struct Image {
  static constexpr int kChannels = 3;

  int height = 0;
  int width = 0;
  std::vector<float> pixels;  // HWC, values in [0, 1]

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * kChannels, fill) {}

  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * kChannels + c]; }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * kChannels + c];
  }
  std::size_t num_pixels() const { return static_cast<std::size_t>(height) * width; }

  friend bool operator==(const Image&, const Image&) = default;
};

struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> classes;  // row-major, class id or kIgnore

  LabelMap() = default;
  LabelMap(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), classes(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return classes[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return classes[static_cast<std::size_t>(y) * width + x]; }
  std::size_t num_pixels() const { return static_cast<std::size_t>(height) * width; }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

// Per-pixel class scores for a batch of `count` images of size height x width.
template <typename T>
struct ClassScores {
  int count = 0;
  int height = 0;
  int width = 0;
  Matrix<T> values;  // classes x (count*height*width)

  int num_classes() const { return static_cast<int>(values.rows()); }
  Eigen::Index num_pixels() const { return values.cols(); }
  Eigen::Index pixels_per_image() const { return static_cast<Eigen::Index>(height) * width; }

  // Columns belonging to image n.
  auto image(int n) const { return values.middleCols(n * pixels_per_image(), pixels_per_image()); }
};

// Pre-softmax scores.
template <typename T>
struct Logits : ClassScores<T> {};

// Softmax outputs; every column sums to one.
template <typename T>
struct ProbMap : ClassScores<T> {};

// One-hot targets, C x (N*H*W). A pixel whose column is all zero is excluded
// from losses (the IGNORE case).
struct OneHotLabels {
  int count = 0;
  int height = 0;
  int width = 0;
  int num_classes = 0;
  std::vector<std::uint8_t> onehot;

  OneHotLabels() = default;
  OneHotLabels(int n, int h, int w, int c)
      : count(n), height(h), width(w), num_classes(c),
        onehot(static_cast<std::size_t>(n) * h * w * c, 0) {}

  std::size_t num_pixels() const { return static_cast<std::size_t>(count) * height * width; }
  std::uint8_t& at(std::size_t pixel, int c) { return onehot[pixel * num_classes + c]; }
  std::uint8_t at(std::size_t pixel, int c) const { return onehot[pixel * num_classes + c]; }

  // Class id of a pixel, or kIgnore for an all-zero row.
  std::uint8_t class_of(std::size_t pixel) const {
    for (int c = 0; c < num_classes; ++c)
      if (at(pixel, c)) return static_cast<std::uint8_t>(c);
    return kIgnore;
  }

  friend bool operator==(const OneHotLabels&, const OneHotLabels&) = default;
};

inline OneHotLabels one_hot(std::span<const LabelMap> labels, int num_classes) {
  if (labels.empty()) throw InputError("one_hot: empty label batch");
  const int h = labels.front().height, w = labels.front().width;
  OneHotLabels out(static_cast<int>(labels.size()), h, w, num_classes);
  std::size_t p = 0;
  for (const auto& lm : labels) {
    if (lm.height != h || lm.width != w) throw InputError("one_hot: label maps differ in size");
    for (auto id : lm.classes) {
      if (id != kIgnore) {
        if (id >= num_classes) throw InputError("one_hot: class id " + std::to_string(id) + " out of range");
        out.at(p, id) = 1;
      }
      ++p;
    }
  }
  return out;
}

inline OneHotLabels one_hot(const LabelMap& labels, int num_classes) {
  return one_hot(std::span<const LabelMap>(&labels, 1), num_classes);
}

// Splits a one-hot batch back into per-image label maps.
inline std::vector<LabelMap> to_label_maps(const OneHotLabels& oh) {
  std::vector<LabelMap> out;
  out.reserve(oh.count);
  const std::size_t per = static_cast<std::size_t>(oh.height) * oh.width;
  for (int n = 0; n < oh.count; ++n) {
    LabelMap lm(oh.height, oh.width);
    for (std::size_t i = 0; i < per; ++i) lm.classes[i] = oh.class_of(n * per + i);
    out.push_back(std::move(lm));
  }
  return out;
}

// Packs images into a channels x (N*H*W) matrix in the model's scalar type.
template <typename T>
Matrix<T> pack_images(std::span<const Image> batch) {
  if (batch.empty()) throw InputError("pack_images: empty batch");
  const int h = batch.front().height, w = batch.front().width;
  const Eigen::Index per = static_cast<Eigen::Index>(h) * w;
  Matrix<T> out(Image::kChannels, per * static_cast<Eigen::Index>(batch.size()));
  T* dst = out.data();
  for (const auto& img : batch) {
    if (img.height != h || img.width != w) throw InputError("pack_images: images differ in size");
    for (float v : img.pixels) *dst++ = static_cast<T>(v);
  }
  return out;
}

}  // namespace duda
