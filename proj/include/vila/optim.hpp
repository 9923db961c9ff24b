#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "vila/autodiff.hpp"
#include "vila/checkpoint.hpp"
#include "vila/error.hpp"

namespace vila {

/// lr at 1-indexed step s of a run of `steps`: lr0 * (1 - s / steps).
inline double linear_decay_lr(double lr0, std::size_t step, std::size_t steps) {
  if (steps == 0) throw InvalidArgument("schedule: steps must be >= 1");
  if (step > steps) throw InvalidArgument("schedule: step " + std::to_string(step) + " beyond " + std::to_string(steps));
  return lr0 * (1.0 - static_cast<double>(step) / static_cast<double>(steps));
}

/// Scales all gradients so their joint L2 norm is at most max_norm. Returns the
/// norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<std::pair<std::string, ad::Tensor<T>>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, t] : params)
    for (T g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (const auto& [name, t] : params) {
      auto& g = t.node()->grad;
      for (auto& v : g) v *= s;
    }
  }
  return norm;
}

/// Adam with decoupled weight decay. Decay applies to matrices only.
template <typename T>
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };

  AdamW(std::vector<std::pair<std::string, ad::Tensor<T>>> params, Options options)
      : params_(std::move(params)), options_(options) {
    for (const auto& [name, t] : params_) {
      m_.emplace_back(t.size(), T(0));
      v_.emplace_back(t.size(), T(0));
    }
  }

  std::size_t step_count() const { return step_; }

  void step(double lr) {
    ++step_;
    const double b1 = options_.beta1, b2 = options_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& node = *params_[i].second.node();
      if (node.grad.size() != node.value.size()) continue;
      const bool decay = node.shape.size() == 2 && options_.weight_decay > 0.0;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < node.value.size(); ++j) {
        const double g = static_cast<double>(node.grad[j]);
        const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * g;
        const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * g * g;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        double p = static_cast<double>(node.value[j]);
        double update = (mj / c1) / (std::sqrt(vj / c2) + options_.eps);
        if (decay) update += options_.weight_decay * p;
        p -= lr * update;
        node.value[j] = static_cast<T>(p);
      }
    }
  }

  ckpt::Records to_records() const {
    ckpt::Records out;
    out.push_back(ckpt::make_record<double>("optim.step", {1}, {static_cast<double>(step_)}));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& [name, t] = params_[i];
      out.push_back(ckpt::make_record("optim.m." + name, t.shape(), m_[i]));
      out.push_back(ckpt::make_record("optim.v." + name, t.shape(), v_[i]));
    }
    return out;
  }

  void load_records(const ckpt::Records& records) {
    const auto* s = ckpt::find(records, "optim.step");
    if (!s) throw FormatError("optimizer state: missing 'optim.step'");
    step_ = static_cast<std::size_t>(s->as<double>().at(0));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& [name, t] = params_[i];
      for (auto [prefix, dest] : {std::pair{"optim.m.", &m_[i]}, std::pair{"optim.v.", &v_[i]}}) {
        const auto* r = ckpt::find(records, prefix + name);
        if (!r) throw FormatError("optimizer state: missing tensor '" + std::string(prefix) + name + "'");
        if (r->shape != t.shape()) throw ShapeError("optimizer state: shape mismatch for '" + std::string(prefix) + name + "'");
        *dest = r->template as<T>();
      }
    }
  }

 private:
  std::vector<std::pair<std::string, ad::Tensor<T>>> params_;
  Options options_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  std::size_t step_ = 0;
};

}  // namespace vila
