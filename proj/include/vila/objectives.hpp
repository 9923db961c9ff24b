#pragma once

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vila/checkpoint.hpp"
#include "vila/ops.hpp"

namespace vila {

using ad::Tensor;

struct LossWeights {
  double alpha = 1.0;
  double beta = 2.0;

  void validate() const {
    if (alpha < 0.0 || beta < 0.0 || !(alpha + beta > 0.0)) {
      throw InvalidArgument("loss weights: alpha, beta must be nonnegative with alpha + beta > 0");
    }
  }
};

/// Symmetric InfoNCE over an N-pair batch with diagonal positives.
/// Returns L_i2t + L_t2i, each averaged over the batch.
template <typename T>
Tensor<T> contrastive_loss(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& tau) {
  if (x.rank() != 2 || x.shape() != y.shape()) {
    throw ShapeError("contrastive_loss: image " + ad::to_string(x.shape()) + " and text " +
                     ad::to_string(y.shape()) + " embeddings must both be [N, D]");
  }
  if (tau.size() != 1 || !(tau.item() > T(0))) throw InvalidArgument("contrastive_loss: temperature must be > 0");
  const std::size_t n = x.dim(0);
  std::vector<std::int32_t> targets(n);
  for (std::size_t i = 0; i < n; ++i) targets[i] = static_cast<std::int32_t>(i);
  auto logits = ad::div_scalar(ad::matmul(x, ad::transpose(y)), tau);
  auto i2t = ad::cross_entropy(logits, std::span<const std::int32_t>(targets));
  auto t2i = ad::cross_entropy(ad::transpose(logits), std::span<const std::int32_t>(targets));
  return ad::scale(ad::add(i2t, t2i), 1.0 / static_cast<double>(n));
}

/// Summed negative log-likelihood of targets over positions where mask is set.
template <typename T>
Tensor<T> generative_loss(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                          std::span<const std::uint8_t> mask = {}) {
  return ad::cross_entropy(logits, targets, mask);
}

/// alpha * L_con + beta * L_gen.
template <typename T>
Tensor<T> pretraining_loss(const Tensor<T>& contrastive, const Tensor<T>& generative, const LossWeights& w) {
  w.validate();
  if (!std::isfinite(static_cast<double>(contrastive.item())) ||
      !std::isfinite(static_cast<double>(generative.item()))) {
    throw InvalidArgument("pretraining_loss: non-finite component (contrastive " +
                          std::to_string(static_cast<double>(contrastive.item())) + ", generative " +
                          std::to_string(static_cast<double>(generative.item())) + ")");
  }
  return ad::add(ad::scale(contrastive, w.alpha), ad::scale(generative, w.beta));
}

struct AdapterOptions {
  double margin = 0.1;
  bool use_residual = true;
  bool use_text_anchor = true;
};

/// Rank-based adapter: residual projection H over frozen image embeddings,
/// scored by cosine to a frozen text anchor.
template <typename T>
class AdapterState {
 public:
  /// H starts at zero with the residual (identity map at init) and at the
  /// identity without it. The learnable anchor, when used, is drawn from `seed`.
  AdapterState(std::span<const T> anchor, AdapterOptions options, std::uint64_t seed = 0) : options_(options) {
    const std::size_t d = anchor.size();
    if (d == 0) throw ShapeError("adapter: empty anchor");
    double nrm = 0.0;
    for (auto v : anchor) nrm += static_cast<double>(v) * static_cast<double>(v);
    nrm = std::sqrt(nrm);
    if (std::abs(nrm - 1.0) > 1e-6) throw InvalidArgument("adapter: anchor w_p must be unit-norm");
    anchor_ = Tensor<T>::from({1, d}, std::vector<T>(anchor.begin(), anchor.end()), false);
    std::vector<T> h(d * d, T(0));
    if (!options_.use_residual)
      for (std::size_t i = 0; i < d; ++i) h[i * d + i] = T(1);
    h_ = Tensor<T>::from({d, d}, std::move(h), true);
    if (!options_.use_text_anchor) {
      std::mt19937_64 rng(seed);
      std::normal_distribution<double> normal(0.0, 1.0);
      std::vector<T> a(d);
      for (auto& v : a) v = static_cast<T>(normal(rng));
      learnable_anchor_ = Tensor<T>::from({1, d}, std::move(a), true);
    }
  }

  const AdapterOptions& options() const { return options_; }
  std::size_t dim() const { return anchor_.size(); }
  double margin() const { return options_.margin; }
  void set_margin(double m) { options_.margin = m; }

  Tensor<T> residual() const { return h_; }
  /// The frozen text anchor w_p; never updated.
  Tensor<T> text_anchor() const { return anchor_; }
  Tensor<T> learnable_anchor() const { return learnable_anchor_; }

  /// Unit-norm anchor used for scoring under the current variant.
  Tensor<T> anchor() const {
    return options_.use_text_anchor ? anchor_ : ad::l2_normalize(learnable_anchor_);
  }

  std::vector<std::pair<std::string, Tensor<T>>> trainable() const {
    std::vector<std::pair<std::string, Tensor<T>>> out{{"adapter.H", h_}};
    if (!options_.use_text_anchor) out.emplace_back("adapter.learnable_anchor", learnable_anchor_);
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>>> tensors() const {
    auto out = trainable();
    out.emplace_back("adapter.anchor", anchor_);
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : trainable()) n += t.size();
    return n;
  }

  ckpt::Records to_records() const {
    ckpt::Records out;
    for (const auto& [name, t] : tensors()) out.push_back(ckpt::make_record(name, t.shape(), t.data()));
    out.push_back(ckpt::make_record<double>(
        "adapter.options", {3},
        {options_.margin, options_.use_residual ? 1.0 : 0.0, options_.use_text_anchor ? 1.0 : 0.0}));
    return out;
  }

  static AdapterState from_records(const ckpt::Records& records) {
    auto need = [&](const char* name) -> const ckpt::Record& {
      const auto* r = ckpt::find(records, name);
      if (!r) throw FormatError(std::string("adapter checkpoint: missing tensor '") + name + "'");
      return *r;
    };
    const auto opts = need("adapter.options").template as<double>();
    if (opts.size() != 3) throw FormatError("adapter checkpoint: malformed options");
    AdapterOptions o{opts[0], opts[1] != 0.0, opts[2] != 0.0};
    const auto anchor = need("adapter.anchor").template as<T>();
    AdapterState state(anchor, o);
    const auto& h = need("adapter.H");
    if (h.shape != state.h_.shape()) throw ShapeError("adapter checkpoint: H shape mismatch");
    state.h_.data() = h.template as<T>();
    if (!o.use_text_anchor) state.learnable_anchor_.data() = need("adapter.learnable_anchor").template as<T>();
    for (const auto& r : records) {
      if (r.name != "adapter.options" && r.name != "adapter.anchor" && r.name != "adapter.H" &&
          !(r.name == "adapter.learnable_anchor" && !o.use_text_anchor)) {
        throw FormatError("adapter checkpoint: unknown tensor name '" + r.name + "'");
      }
    }
    return state;
  }

 private:
  AdapterOptions options_;
  Tensor<T> anchor_;
  Tensor<T> h_;
  Tensor<T> learnable_anchor_;
};

/// normalize(vH + v) with the residual, normalize(vH) without. v: [N, D].
template <typename T>
Tensor<T> adapt_embedding(const Tensor<T>& v, const AdapterState<T>& adapter) {
  if (v.rank() != 2 || v.dim(1) != adapter.dim()) {
    throw ShapeError("adapt_embedding: embeddings " + ad::to_string(v.shape()) + " vs adapter dim " +
                     std::to_string(adapter.dim()));
  }
  auto projected = ad::matmul(v, adapter.residual());
  if (adapter.options().use_residual) projected = ad::add(projected, v);
  return ad::l2_normalize(projected);
}

/// Cosine of unit adapted embeddings [N, D] against the anchor → [N, 1].
template <typename T>
Tensor<T> adapter_score(const Tensor<T>& adapted, const AdapterState<T>& adapter) {
  return ad::matmul(adapted, ad::transpose(adapter.anchor()));
}

/// Ordered pairs (i, j) with labels[i] > labels[j].
inline std::vector<std::pair<std::size_t, std::size_t>> strict_order_pairs(std::span<const double> labels) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t j = 0; j < labels.size(); ++j)
      if (i != j && labels[i] > labels[j]) pairs.emplace_back(i, j);
  return pairs;
}

/// Mean hinge max(0, m - s_i + s_j) over all strict-order pairs of a batch of scores [N, 1].
template <typename T>
Tensor<T> pairwise_hinge(const Tensor<T>& scores, std::span<const double> labels, double margin) {
  if (scores.size() != labels.size()) {
    throw ShapeError("rank_adapter_loss: " + std::to_string(scores.size()) + " scores vs " +
                     std::to_string(labels.size()) + " labels");
  }
  if (labels.size() < 2) throw InvalidArgument("rank_adapter_loss: need at least two images");
  const auto pairs = strict_order_pairs(labels);
  if (pairs.empty()) throw InvalidArgument("rank_adapter_loss: all-tied batch has no ordered pair");
  std::vector<std::size_t> hi, lo;
  for (const auto& [i, j] : pairs) {
    hi.push_back(i);
    lo.push_back(j);
  }
  if (scores.rank() != 2 || scores.dim(1) != 1) {
    throw ShapeError("rank_adapter_loss: scores must be a column [N, 1], got " + ad::to_string(scores.shape()));
  }
  const auto& col = scores;
  auto gap = ad::sub(ad::gather_rows(col, std::span<const std::size_t>(hi)),
                     ad::gather_rows(col, std::span<const std::size_t>(lo)));
  auto slack = ad::add_bias(ad::scale(gap, -1.0), Tensor<T>::scalar(static_cast<T>(margin)));
  return ad::mean(ad::relu(slack));
}

/// Rank loss for unnormalized frozen embeddings v: [N, D] with MOS labels.
template <typename T>
Tensor<T> rank_adapter_loss(const Tensor<T>& v, std::span<const double> labels, const AdapterState<T>& adapter) {
  return pairwise_hinge(adapter_score(adapt_embedding(v, adapter), adapter), labels, adapter.margin());
}

}  // namespace vila
