#pragma once

// Sequential convolutional segmentation models with a flat parameter vector.
//
// All parameters of a model live in one contiguous vector; named groups
// (`layer3.weight`, `layer3.bias`, ...) are views into it in declaration
// order. EMA, cloning, checkpoints and checksums all operate on that vector.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "duda/error.hpp"
#include "duda/layers.hpp"
#include "duda/rng.hpp"
#include "duda/tensor.hpp"

namespace duda {

struct LayerSpec {
  enum class Kind { conv, relu, upsample, avgpool };

  Kind kind = Kind::relu;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
  int stride = 1;

  static LayerSpec conv(int cin, int cout, int kernel, int stride = 1) {
    return {Kind::conv, cin, cout, kernel, stride};
  }
  static LayerSpec relu() { return {Kind::relu}; }
  static LayerSpec upsample() { return {Kind::upsample}; }
  static LayerSpec avgpool() { return {Kind::avgpool}; }

  layers::ConvShape conv_shape() const { return {in_channels, out_channels, kernel, stride}; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// Layer list plus a display name. The textual descriptor round-trips through
// parse() and is what checkpoints store.
struct Architecture {
  std::string name;
  std::vector<LayerSpec> layers;

  std::string descriptor() const {
    std::ostringstream os;
    os << name << ':';
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (i) os << ',';
      switch (l.kind) {
        case LayerSpec::Kind::conv:
          os << "conv" << l.kernel << 'x' << l.kernel << 's' << l.stride << '/' << l.in_channels << '>'
             << l.out_channels;
          break;
        case LayerSpec::Kind::relu: os << "relu"; break;
        case LayerSpec::Kind::upsample: os << "up2"; break;
        case LayerSpec::Kind::avgpool: os << "pool2"; break;
      }
    }
    return os.str();
  }

  static Architecture parse(std::string_view text) {
    const auto colon = text.find(':');
    if (colon == std::string_view::npos) throw ConfigError("architecture descriptor lacks ':'");
    Architecture a;
    a.name = std::string(text.substr(0, colon));
    std::string_view rest = text.substr(colon + 1);
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      const std::string tok(rest.substr(0, comma));
      rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
      if (tok == "relu") {
        a.layers.push_back(LayerSpec::relu());
      } else if (tok == "up2") {
        a.layers.push_back(LayerSpec::upsample());
      } else if (tok == "pool2") {
        a.layers.push_back(LayerSpec::avgpool());
      } else {
        int k1 = 0, k2 = 0, s = 0, cin = 0, cout = 0;
        if (std::sscanf(tok.c_str(), "conv%dx%ds%d/%d>%d", &k1, &k2, &s, &cin, &cout) != 5 || k1 != k2 ||
            (k1 != 1 && k1 != 3) || s < 1 || s > 2 || cin < 1 || cout < 1)
          throw ConfigError("bad layer token '" + tok + "' in architecture descriptor");
        a.layers.push_back(LayerSpec::conv(cin, cout, k1, s));
      }
    }
    return a;
  }

  int input_channels() const {
    for (const auto& l : layers)
      if (l.kind == LayerSpec::Kind::conv) return l.in_channels;
    return 0;
  }

  int output_channels() const {
    for (auto it = layers.rbegin(); it != layers.rend(); ++it)
      if (it->kind == LayerSpec::Kind::conv) return it->out_channels;
    return 0;
  }

  friend bool operator==(const Architecture& a, const Architecture& b) { return a.layers == b.layers; }
};

inline std::int64_t param_count(const Architecture& arch) {
  std::int64_t n = 0;
  for (const auto& l : arch.layers)
    if (l.kind == LayerSpec::Kind::conv)
      n += static_cast<std::int64_t>(l.kernel) * l.kernel * l.in_channels * l.out_channels + l.out_channels;
  return n;
}

// Three-layer encoder-decoder, widths 8/16/8, plus a pointwise classifier.
inline Architecture small_reference(int num_classes) {
  using L = LayerSpec;
  return {"small",
          {L::conv(3, 8, 3, 2), L::relu(), L::conv(8, 16, 3, 2), L::relu(), L::upsample(), L::conv(16, 8, 3),
           L::relu(), L::conv(8, num_classes, 1), L::upsample()}};
}

// Six convolutions: widths 32/64/128/64/32 plus the classifier.
inline Architecture large_reference(int num_classes) {
  using L = LayerSpec;
  return {"large",
          {L::conv(3, 32, 3, 2), L::relu(), L::conv(32, 64, 3, 2), L::relu(), L::conv(64, 128, 3, 2), L::relu(),
           L::upsample(), L::conv(128, 64, 3), L::relu(), L::upsample(), L::conv(64, 32, 3), L::relu(),
           L::conv(32, num_classes, 1), L::upsample()}};
}

// Small model with a different layer pattern: full-resolution stem,
// average-pool downsampling instead of strided convolutions.
inline Architecture small_heterogeneous(int num_classes) {
  using L = LayerSpec;
  return {"small_het",
          {L::conv(3, 8, 3), L::relu(), L::avgpool(), L::conv(8, 16, 3), L::relu(), L::avgpool(),
           L::conv(16, 12, 3), L::relu(), L::upsample(), L::conv(12, num_classes, 1), L::upsample()}};
}

inline Architecture architecture_by_name(std::string_view name, int num_classes) {
  if (name == "small") return small_reference(num_classes);
  if (name == "large") return large_reference(num_classes);
  if (name == "small_het") return small_heterogeneous(num_classes);
  throw ConfigError("unknown architecture '" + std::string(name) + "' (expected small, large or small_het)");
}

struct ParamGroup {
  std::string name;
  std::vector<int> shape;  // row-major; conv weights are (ky, kx, cin, cout)
  Eigen::Index offset = 0;
  Eigen::Index size = 0;
};

// Activations recorded by a training forward pass; consumed by backward().
template <typename T>
struct ForwardTape {
  std::vector<Matrix<T>> activations;  // activations[l] is the input of layer l; back() is the output
  std::vector<Matrix<T>> cols;         // unfolded inputs of conv layers
  std::vector<layers::Geometry> geometry;
};

template <typename T>
class SegModel {
 public:
  SegModel(Architecture arch, int height, int width) : arch_(std::move(arch)), height_(height), width_(width) {
    if (arch_.input_channels() != Image::kChannels && !arch_.layers.empty())
      throw StructuralError("architecture must take " + std::to_string(Image::kChannels) + " input channels");
    // Walk the geometry once to validate channel chaining and resolution.
    int ch = Image::kChannels, h = height, w = width;
    Eigen::Index offset = 0;
    for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
      const auto& l = arch_.layers[i];
      switch (l.kind) {
        case LayerSpec::Kind::conv: {
          if (l.in_channels != ch)
            throw StructuralError("layer " + std::to_string(i) + " expects " + std::to_string(l.in_channels) +
                                  " channels, got " + std::to_string(ch));
          if (h % l.stride || w % l.stride)
            throw StructuralError("input size not divisible by the stride of layer " + std::to_string(i));
          const auto out = l.conv_shape().output({1, h, w});
          h = out.height;
          w = out.width;
          ch = l.out_channels;
          const Eigen::Index wsize = static_cast<Eigen::Index>(l.kernel) * l.kernel * l.in_channels * l.out_channels;
          groups_.push_back({"layer" + std::to_string(i) + ".weight",
                             {l.kernel, l.kernel, l.in_channels, l.out_channels}, offset, wsize});
          offset += wsize;
          groups_.push_back({"layer" + std::to_string(i) + ".bias", {l.out_channels}, offset, l.out_channels});
          offset += l.out_channels;
          break;
        }
        case LayerSpec::Kind::relu: break;
        case LayerSpec::Kind::upsample:
          h *= 2;
          w *= 2;
          break;
        case LayerSpec::Kind::avgpool:
          if (h % 2 || w % 2) throw StructuralError("input size not divisible by pooling");
          h /= 2;
          w /= 2;
          break;
      }
    }
    if (!arch_.layers.empty() && (h != height || w != width))
      throw StructuralError("architecture maps " + std::to_string(height) + "x" + std::to_string(width) + " to " +
                            std::to_string(h) + "x" + std::to_string(w) + "; output must match input size");
    num_classes_ = arch_.layers.empty() ? 0 : ch;
    params_ = Vector<T>::Zero(offset);
  }

  const Architecture& architecture() const { return arch_; }
  int height() const { return height_; }
  int width() const { return width_; }
  int num_classes() const { return num_classes_; }

  const std::vector<ParamGroup>& groups() const { return groups_; }
  Vector<T>& parameters() { return params_; }
  const Vector<T>& parameters() const { return params_; }

  auto group(std::size_t i) { return params_.segment(groups_[i].offset, groups_[i].size); }
  auto group(std::size_t i) const { return params_.segment(groups_[i].offset, groups_[i].size); }

  // He-normal weights, zero biases.
  void init(std::uint64_t seed) {
    Rng rng(seed);
    for (const auto& g : groups_) {
      auto seg = params_.segment(g.offset, g.size);
      if (g.shape.size() == 1) {
        seg.setZero();
        continue;
      }
      const double fan_in = static_cast<double>(g.shape[0]) * g.shape[1] * g.shape[2];
      const double std_dev = std::sqrt(2.0 / fan_in);
      for (Eigen::Index i = 0; i < g.size; ++i) seg[i] = static_cast<T>(std_dev * rng.normal());
    }
  }

  // Raw forward over packed input (channels x N*H*W). Records a tape when given one.
  Logits<T> forward_packed(Matrix<T> x, int count, ForwardTape<T>* tape = nullptr) const {
    layers::Geometry g{count, height_, width_};
    if (x.rows() != Image::kChannels || x.cols() != g.pixels())
      throw InputError("forward: input does not match the model's configured size");
    if (tape) {
      tape->activations.clear();
      tape->cols.assign(arch_.layers.size(), Matrix<T>());
      tape->geometry.clear();
    }
    std::size_t gi = 0;
    Matrix<T> cols, y;
    for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
      const auto& l = arch_.layers[i];
      if (tape) tape->geometry.push_back(g);
      switch (l.kind) {
        case LayerSpec::Kind::conv: {
          const auto cs = l.conv_shape();
          const T* w = params_.data() + groups_[gi].offset;
          const T* b = params_.data() + groups_[gi + 1].offset;
          gi += 2;
          layers::conv_forward(x, cs, g, w, b, cols, y);
          g = cs.output(g);
          if (tape) tape->cols[i] = std::move(cols);
          break;
        }
        case LayerSpec::Kind::relu:
          y = x.cwiseMax(T(0));
          break;
        case LayerSpec::Kind::upsample:
          layers::upsample_forward(x, g, y);
          g = {g.count, g.height * 2, g.width * 2};
          break;
        case LayerSpec::Kind::avgpool:
          layers::avgpool_forward(x, g, y);
          g = {g.count, g.height / 2, g.width / 2};
          break;
      }
      if (tape) tape->activations.push_back(std::move(x));
      x = std::move(y);
      y = Matrix<T>();
    }
    Logits<T> out;
    out.count = count;
    out.height = height_;
    out.width = width_;
    out.values = std::move(x);
    if (tape) tape->activations.push_back(out.values);
    return out;
  }

  Logits<T> forward(std::span<const Image> batch, ForwardTape<T>* tape = nullptr) const {
    for (const auto& img : batch)
      if (img.height != height_ || img.width != width_)
        throw InputError("forward: image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                         ", model expects " + std::to_string(height_) + "x" + std::to_string(width_));
    return forward_packed(pack_images<T>(batch), static_cast<int>(batch.size()), tape);
  }

  Logits<T> forward(const Image& img) const { return forward(std::span<const Image>(&img, 1)); }

  // Accumulates d(loss)/d(params) into `grads` given d(loss)/d(logits).
  void backward(const ForwardTape<T>& tape, const Matrix<T>& dlogits, Vector<T>& grads) const {
    if (grads.size() != params_.size()) grads = Vector<T>::Zero(params_.size());
    if (tape.activations.size() != arch_.layers.size() + 1) throw InputError("backward: tape does not match model");
    Matrix<T> dy = dlogits, dx;
    std::size_t gi = groups_.size();
    for (std::size_t i = arch_.layers.size(); i-- > 0;) {
      const auto& l = arch_.layers[i];
      const auto& g = tape.geometry[i];
      const bool need_dx = i > 0;
      switch (l.kind) {
        case LayerSpec::Kind::conv: {
          gi -= 2;
          const auto& wg = groups_[gi];
          const auto& bg = groups_[gi + 1];
          layers::conv_backward(tape.activations[i], tape.cols[i], l.conv_shape(), g, params_.data() + wg.offset, dy,
                                grads.data() + wg.offset, grads.data() + bg.offset, need_dx ? &dx : nullptr);
          break;
        }
        case LayerSpec::Kind::relu:
          layers::relu_backward(tape.activations[i + 1], dy, dx);
          break;
        case LayerSpec::Kind::upsample:
          layers::upsample_backward(dy, g, dx);
          break;
        case LayerSpec::Kind::avgpool:
          layers::avgpool_backward(dy, g, dx);
          break;
      }
      if (!need_dx) break;
      std::swap(dy, dx);
    }
  }

  // FNV-1a over the parameter bytes; used to detect any mutation.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xCBF29CE484222325ull;
    const auto* p = reinterpret_cast<const unsigned char*>(params_.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(params_.size()) * sizeof(T); ++i) {
      h ^= p[i];
      h *= 0x100000001B3ull;
    }
    return h;
  }

 private:
  Architecture arch_;
  int height_;
  int width_;
  int num_classes_ = 0;
  std::vector<ParamGroup> groups_;
  Vector<T> params_;
};

template <typename T>
std::int64_t param_count(const SegModel<T>& model) {
  return static_cast<std::int64_t>(model.parameters().size());
}

// Numerically stabilised per-pixel softmax.
template <typename T>
ProbMap<T> softmax(const Logits<T>& logits) {
  ProbMap<T> out;
  out.count = logits.count;
  out.height = logits.height;
  out.width = logits.width;
  out.values.resize(logits.values.rows(), logits.values.cols());
  for (Eigen::Index p = 0; p < logits.values.cols(); ++p) {
    const auto z = logits.values.col(p);
    const T m = z.maxCoeff();
    if (std::isnan(m) || !z.allFinite()) throw NumericError("softmax: non-finite logit at pixel " + std::to_string(p));
    auto col = out.values.col(p);
    col = (z.array() - m).exp();
    col /= col.sum();
  }
  return out;
}

// Chains d(loss)/d(probs) through the softmax Jacobian: dz = p * (g - <p, g>).
template <typename T>
Matrix<T> softmax_backward(const ProbMap<T>& probs, const Matrix<T>& dprobs) {
  const Eigen::Matrix<T, 1, Eigen::Dynamic> dots = (probs.values.cwiseProduct(dprobs)).colwise().sum();
  return probs.values.cwiseProduct(dprobs - dots.replicate(probs.values.rows(), 1));
}

// teacher <- alpha * teacher + (1 - alpha) * student, elementwise.
template <typename T>
void ema_update(Vector<T>& teacher, const Vector<T>& student, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("ema_alpha out of (0,1]");
  if (teacher.size() != student.size())
    throw StructuralError("ema_update: parameter vectors differ in size (" + std::to_string(teacher.size()) + " vs " +
                          std::to_string(student.size()) + ")");
  if (alpha == 1.0) return;
  const T a = static_cast<T>(alpha), b = static_cast<T>(1.0 - alpha);
  teacher = a * teacher + b * student;
}

template <typename T>
void ema_update(SegModel<T>& teacher, const SegModel<T>& student, double alpha) {
  if (!(teacher.architecture() == student.architecture()))
    throw StructuralError("ema_update: teacher and student architectures differ");
  ema_update(teacher.parameters(), student.parameters(), alpha);
}

template <typename T>
void clone_into(const SegModel<T>& src, SegModel<T>& dst) {
  if (!(src.architecture() == dst.architecture()) || src.height() != dst.height() || src.width() != dst.width())
    throw StructuralError("clone_into: architectures differ (" + src.architecture().descriptor() + " vs " +
                          dst.architecture().descriptor() + ")");
  dst.parameters() = src.parameters();
}

// Plain SGD with optional heavy-ball momentum: v <- mu v + g; p <- p - lr v.
template <typename T>
class Sgd {
 public:
  Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  }

  void step(Vector<T>& params, const Vector<T>& grads) {
    if (grads.size() != params.size()) throw StructuralError("optimizer: gradient size mismatch");
    if (!grads.allFinite()) throw NumericError("optimizer: non-finite gradient");
    if (momentum_ == 0.0) {
      params -= static_cast<T>(lr_) * grads;
      return;
    }
    if (velocity_.size() != params.size()) velocity_ = Vector<T>::Zero(params.size());
    velocity_ = static_cast<T>(momentum_) * velocity_ + grads;
    params -= static_cast<T>(lr_) * velocity_;
  }

  double learning_rate() const { return lr_; }

 private:
  double lr_;
  double momentum_;
  Vector<T> velocity_;
};

}  // namespace duda
