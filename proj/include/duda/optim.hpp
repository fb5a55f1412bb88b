#pragma once

#include <cmath>
#include <string>
#include <string_view>

#include "duda/error.hpp"
#include "duda/segmodel.hpp"

namespace duda {

enum class OptimizerKind { sgd, adamw };

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adamw"; }

inline OptimizerKind optimizer_kind_from_string(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adamw") return OptimizerKind::adamw;
  throw ConfigError("unknown optimizer '" + std::string(s) + "' (expected sgd or adamw)");
}

struct OptimConfig {
  OptimizerKind kind = OptimizerKind::adamw;
  double learning_rate = 1e-3;
  double momentum = 0.9;  // sgd
  double beta1 = 0.9;     // adamw
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("adam betas must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
  }

  friend bool operator==(const OptimConfig&, const OptimConfig&) = default;
};

// Adam with decoupled weight decay.
template <typename T>
class AdamW {
 public:
  explicit AdamW(const OptimConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

  void step(Vector<T>& params, const Vector<T>& grads) {
    if (grads.size() != params.size()) throw StructuralError("optimizer: gradient size mismatch");
    if (!grads.allFinite()) throw NumericError("optimizer: non-finite gradient");
    if (m_.size() != params.size()) {
      m_ = Vector<T>::Zero(params.size());
      v_ = Vector<T>::Zero(params.size());
    }
    ++t_;
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    m_ = b1 * m_ + (T(1) - b1) * grads;
    v_ = b2 * v_ + (T(1) - b2) * grads.cwiseProduct(grads);
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T lr = static_cast<T>(cfg_.learning_rate);
    const T step = static_cast<T>(cfg_.learning_rate / c1);
    const T sc2 = static_cast<T>(1.0 / std::sqrt(c2));
    if (cfg_.weight_decay > 0.0) params *= T(1) - lr * static_cast<T>(cfg_.weight_decay);
    params.array() -= step * m_.array() / (v_.array().sqrt() * sc2 + static_cast<T>(cfg_.epsilon));
  }

  long steps() const { return t_; }

 private:
  OptimConfig cfg_;
  Vector<T> m_, v_;
  long t_ = 0;
};

template <typename T>
class Optimizer {
 public:
  explicit Optimizer(const OptimConfig& cfg) : kind_(cfg.kind), sgd_(cfg.learning_rate, cfg.momentum), adam_(cfg) {}

  void step(Vector<T>& params, const Vector<T>& grads) {
    if (kind_ == OptimizerKind::sgd)
      sgd_.step(params, grads);
    else
      adam_.step(params, grads);
  }

 private:
  OptimizerKind kind_;
  Sgd<T> sgd_;
  AdamW<T> adam_;
};

}  // namespace duda
