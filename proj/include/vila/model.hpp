#pragma once

// Miniature contrastive-captioner: patch image encoder, attentional poolers,
// causally-masked unimodal text decoder and cross-attending multimodal decoder.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vila/checkpoint.hpp"
#include "vila/config.hpp"
#include "vila/ops.hpp"
#include "vila/tokenizer.hpp"

namespace vila {

using ad::Tensor;

/// Right-padded token ids for a batch: ids is batch × length, PAD-filled.
struct TokenBatch {
  std::vector<TokenId> ids;
  std::vector<std::size_t> lengths;
  std::size_t batch = 0;
  std::size_t length = 0;

  static TokenBatch from(const std::vector<std::vector<TokenId>>& seqs) {
    if (seqs.empty()) throw InvalidArgument("token batch: no sequences");
    TokenBatch tb;
    tb.batch = seqs.size();
    for (const auto& s : seqs) {
      if (s.empty()) throw InvalidArgument("token batch: empty sequence");
      tb.length = std::max(tb.length, s.size());
      tb.lengths.push_back(s.size());
    }
    tb.ids.assign(tb.batch * tb.length, tokens::kPad);
    for (std::size_t b = 0; b < tb.batch; ++b) std::copy(seqs[b].begin(), seqs[b].end(), tb.ids.begin() + b * tb.length);
    return tb;
  }
};

/// Teacher-forcing split of generative sequences (BOS w... EOS): inputs drop the
/// last token, targets drop the first, mask marks real (non-PAD) target positions.
struct GenerativeBatch {
  TokenBatch inputs;
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> mask;

  static GenerativeBatch from(const std::vector<std::vector<TokenId>>& seqs) {
    std::vector<std::vector<TokenId>> in, out;
    for (const auto& s : seqs) {
      if (s.size() < 2) throw InvalidArgument("generative batch: sequence shorter than BOS+EOS");
      in.emplace_back(s.begin(), s.end() - 1);
      out.emplace_back(s.begin() + 1, s.end());
    }
    GenerativeBatch gb;
    gb.inputs = TokenBatch::from(in);
    const std::size_t len = gb.inputs.length;
    gb.targets.assign(seqs.size() * len, tokens::kPad);
    gb.mask.assign(seqs.size() * len, 0);
    for (std::size_t b = 0; b < seqs.size(); ++b) {
      for (std::size_t t = 0; t < out[b].size(); ++t) {
        gb.targets[b * len + t] = out[b][t];
        gb.mask[b * len + t] = 1;
      }
    }
    return gb;
  }
};

/// Closed-form parameter count for a configuration.
inline std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t D = c.dim, M = c.mlp_dim, V = c.vocab_size;
  const std::size_t attn = 4 * D * D + 4 * D;
  const std::size_t norm = 2 * D;
  const std::size_t mlp = D * M + M + M * D + D;
  const std::size_t block = 2 * norm + attn + mlp;
  const std::size_t cross_block = block + norm + attn;
  const std::size_t image = c.patch_dim() * D + D + c.num_patches() * D + c.encoder_layers * block + norm;
  const std::size_t pooler_con = 1 * D + attn;
  const std::size_t pooler_gen = c.generative_pool_queries * D + attn;
  const std::size_t text = V * D + c.max_text_length * D + c.unimodal_layers * block + norm + D * D +
                           c.multimodal_layers * cross_block + norm + D * V + V;
  return image + pooler_con + pooler_gen + text + 1;
}

template <typename T>
class CocaModel {
 public:
  struct Attn {
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct Block {
    Tensor<T> ln1_g, ln1_b;
    Attn self_attn;
    Tensor<T> lnx_g, lnx_b;  // cross-attention blocks only
    Attn cross_attn;
    Tensor<T> ln2_g, ln2_b, w1, b1, w2, b2;
  };
  struct Pooler {
    Tensor<T> queries;
    Attn attn;
  };

  explicit CocaModel(const ModelConfig& config, std::uint64_t seed = 0, double initial_temperature = 0.07)
      : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t D = config_.dim;
    patch_w_ = weight("image.patch_proj.w", {config_.patch_dim(), D}, rng);
    patch_b_ = zeros("image.patch_proj.b", {D});
    image_pos_ = weight("image.pos", {config_.num_patches(), D}, rng);
    for (std::size_t l = 0; l < config_.encoder_layers; ++l)
      encoder_.push_back(make_block("image.layer" + std::to_string(l), false, rng));
    image_ln_g_ = ones("image.ln_final.g", {D});
    image_ln_b_ = zeros("image.ln_final.b", {D});
    con_pool_ = make_pooler("pool.con", 1, rng);
    gen_pool_ = make_pooler("pool.gen", config_.generative_pool_queries, rng);
    token_emb_ = weight("text.token_emb", {config_.vocab_size, D}, rng);
    text_pos_ = weight("text.pos", {config_.max_text_length, D}, rng);
    for (std::size_t l = 0; l < config_.unimodal_layers; ++l)
      unimodal_.push_back(make_block("text.uni.layer" + std::to_string(l), false, rng));
    cls_ln_g_ = ones("text.cls_ln.g", {D});
    cls_ln_b_ = zeros("text.cls_ln.b", {D});
    text_proj_ = weight("text.proj", {D, D}, rng);
    for (std::size_t l = 0; l < config_.multimodal_layers; ++l)
      multimodal_.push_back(make_block("text.multi.layer" + std::to_string(l), true, rng));
    out_ln_g_ = ones("text.ln_final.g", {D});
    out_ln_b_ = zeros("text.ln_final.b", {D});
    head_w_ = weight("text.head.w", {D, config_.vocab_size}, rng);
    head_b_ = zeros("text.head.b", {config_.vocab_size});
    log_tau_ = add_param("log_tau", {1}, {static_cast<T>(std::log(initial_temperature))});
  }

  CocaModel(const CocaModel&) = delete;
  CocaModel& operator=(const CocaModel&) = delete;
  CocaModel(CocaModel&&) = default;
  CocaModel& operator=(CocaModel&&) = default;

  const ModelConfig& config() const { return config_; }

  const std::vector<std::pair<std::string, Tensor<T>>>& parameters() const { return params_; }

  Tensor<T> parameter(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("model: no parameter named '" + name + "'");
    return params_[it->second].second;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  /// Temperature tau = exp(log_tau) as a graph node.
  Tensor<T> temperature() const { return ad::exp(log_tau_); }
  Tensor<T> log_temperature() const { return log_tau_; }

  // ---- image side -------------------------------------------------------

  /// patches: [batch*K, patch_dim] → visual embeddings V: [batch*K, D].
  Tensor<T> encode_images(const Tensor<T>& patches, std::size_t batch) const {
    const std::size_t K = config_.num_patches();
    if (patches.rank() != 2 || patches.dim(0) != batch * K || patches.dim(1) != config_.patch_dim()) {
      throw ShapeError("encode_images: expected [" + std::to_string(batch * K) + "," +
                       std::to_string(config_.patch_dim()) + "] patches, got " + ad::to_string(patches.shape()));
    }
    auto x = ad::add_tiled(ad::linear(patches, patch_w_, patch_b_), image_pos_);
    for (const auto& blk : encoder_) x = block_forward(blk, x, batch, false, nullptr);
    return ad::layer_norm(x, image_ln_g_, image_ln_b_);
  }

  /// Learned-query attention over each image's K visual tokens → [batch*n_q, D].
  Tensor<T> attentional_pool(const Tensor<T>& visual, std::size_t batch, const Pooler& pooler) const {
    if (visual.rank() != 2 || visual.dim(1) != config_.dim || batch == 0 || visual.dim(0) % batch != 0) {
      throw ShapeError("attentional_pool: visual embeddings " + ad::to_string(visual.shape()) +
                       " incompatible with batch " + std::to_string(batch) + " and dim " +
                       std::to_string(config_.dim));
    }
    auto q = ad::linear(pooler.queries, pooler.attn.wq, pooler.attn.bq);
    if (batch > 1) q = ad::tile_rows(q, batch);
    auto k = ad::linear(visual, pooler.attn.wk, pooler.attn.bk);
    auto v = ad::linear(visual, pooler.attn.wv, pooler.attn.bv);
    auto o = ad::attention(q, k, v, batch, config_.heads, false);
    return ad::linear(o, pooler.attn.wo, pooler.attn.bo);
  }

  const Pooler& contrastive_pooler() const { return con_pool_; }
  const Pooler& generative_pooler() const { return gen_pool_; }

  /// Unnormalized contrastive image embeddings v: [batch, D].
  Tensor<T> image_embedding_raw(const Tensor<T>& visual, std::size_t batch) const {
    return attentional_pool(visual, batch, con_pool_);
  }

  // ---- text side --------------------------------------------------------

  /// Causally-masked unimodal decoder stream [batch*len, D] (before any final norm).
  Tensor<T> unimodal(const TokenBatch& tokens) const {
    check_tokens(tokens);
    auto x = ad::embedding(token_emb_, std::span<const TokenId>(tokens.ids));
    x = ad::add_tiled(x, ad::slice_rows(text_pos_, 0, tokens.length));
    for (const auto& blk : unimodal_) x = block_forward(blk, x, tokens.batch, true, nullptr);
    return x;
  }

  /// Unnormalized contrastive text embeddings from each sequence's final (CLS) position: [batch, D].
  Tensor<T> text_embedding_raw(const TokenBatch& contrastive_tokens) const {
    for (std::size_t b = 0; b < contrastive_tokens.batch; ++b) {
      if (contrastive_tokens.ids[b * contrastive_tokens.length + contrastive_tokens.lengths[b] - 1] != tokens::kCls) {
        throw InvalidArgument("text_embedding: contrastive sequence " + std::to_string(b) + " does not end in CLS");
      }
    }
    auto stream = unimodal(contrastive_tokens);
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < contrastive_tokens.batch; ++b)
      rows.push_back(b * contrastive_tokens.length + contrastive_tokens.lengths[b] - 1);
    auto cls = ad::gather_rows(stream, std::span<const std::size_t>(rows));
    return ad::matmul(ad::layer_norm(cls, cls_ln_g_, cls_ln_b_), text_proj_);
  }

  /// Next-token logits [batch*len, vocab] for teacher-forced generative inputs,
  /// cross-attending to generative-pooled image tokens [batch*n_q, D].
  Tensor<T> multimodal_logits(const TokenBatch& inputs, const Tensor<T>& pooled) const {
    if (pooled.rank() != 2 || pooled.dim(1) != config_.dim || pooled.dim(0) % inputs.batch != 0) {
      throw ShapeError("decode_multimodal: pooled image tokens " + ad::to_string(pooled.shape()) +
                       " incompatible with batch " + std::to_string(inputs.batch));
    }
    auto x = unimodal(inputs);
    for (const auto& blk : multimodal_) x = block_forward(blk, x, inputs.batch, true, &pooled);
    return ad::linear(ad::layer_norm(x, out_ln_g_, out_ln_b_), head_w_, head_b_);
  }

  // ---- checkpointing ----------------------------------------------------

  ckpt::Records to_records() const {
    ckpt::Records out;
    for (const auto& [name, t] : params_) out.push_back(ckpt::make_record(name, t.shape(), t.data()));
    return out;
  }

  /// Copies stored values into the registry. Every registry tensor must be present
  /// with a matching shape; unknown names are rejected.
  void load_records(const ckpt::Records& records) {
    for (const auto& r : records) {
      if (!index_.count(r.name)) throw FormatError("checkpoint: unknown tensor name '" + r.name + "'");
    }
    for (auto& [name, t] : params_) {
      const auto* r = ckpt::find(records, name);
      if (!r) throw FormatError("checkpoint: missing tensor '" + name + "'");
      if (r->shape != t.shape()) {
        throw ShapeError("checkpoint: shape mismatch for tensor '" + name + "': stored " +
                         ad::to_string(r->shape) + ", model expects " + ad::to_string(t.shape()));
      }
      t.data() = r->template as<T>();
    }
  }

  void save(const std::filesystem::path& path) const { ckpt::save(to_records(), path); }
  void load(const std::filesystem::path& path) { load_records(ckpt::load(path)); }

 private:
  Tensor<T> add_param(const std::string& name, ad::Shape shape, std::vector<T> data) {
    if (index_.count(name)) throw InvalidArgument("model: duplicate parameter name '" + name + "'");
    auto t = Tensor<T>::from(std::move(shape), std::move(data), true);
    index_.emplace(name, params_.size());
    params_.emplace_back(name, t);
    return t;
  }

  // Truncated normal (±2σ), std 0.02.
  Tensor<T> weight(const std::string& name, ad::Shape shape, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<T> v(ad::numel(shape));
    for (auto& x : v) {
      double z;
      do z = normal(rng);
      while (std::abs(z) > 2.0);
      x = static_cast<T>(0.02 * z);
    }
    return add_param(name, std::move(shape), std::move(v));
  }
  Tensor<T> zeros(const std::string& name, ad::Shape shape) {
    const auto n = ad::numel(shape);
    return add_param(name, std::move(shape), std::vector<T>(n, T(0)));
  }
  Tensor<T> ones(const std::string& name, ad::Shape shape) {
    const auto n = ad::numel(shape);
    return add_param(name, std::move(shape), std::vector<T>(n, T(1)));
  }

  Attn make_attn(const std::string& prefix, std::mt19937_64& rng) {
    const std::size_t D = config_.dim;
    Attn a;
    a.wq = weight(prefix + ".wq", {D, D}, rng);
    a.bq = zeros(prefix + ".bq", {D});
    a.wk = weight(prefix + ".wk", {D, D}, rng);
    a.bk = zeros(prefix + ".bk", {D});
    a.wv = weight(prefix + ".wv", {D, D}, rng);
    a.bv = zeros(prefix + ".bv", {D});
    a.wo = weight(prefix + ".wo", {D, D}, rng);
    a.bo = zeros(prefix + ".bo", {D});
    return a;
  }

  Block make_block(const std::string& prefix, bool cross, std::mt19937_64& rng) {
    const std::size_t D = config_.dim, M = config_.mlp_dim;
    Block b;
    b.ln1_g = ones(prefix + ".ln1.g", {D});
    b.ln1_b = zeros(prefix + ".ln1.b", {D});
    b.self_attn = make_attn(prefix + ".attn", rng);
    if (cross) {
      b.lnx_g = ones(prefix + ".lnx.g", {D});
      b.lnx_b = zeros(prefix + ".lnx.b", {D});
      b.cross_attn = make_attn(prefix + ".xattn", rng);
    }
    b.ln2_g = ones(prefix + ".ln2.g", {D});
    b.ln2_b = zeros(prefix + ".ln2.b", {D});
    b.w1 = weight(prefix + ".mlp.w1", {D, M}, rng);
    b.b1 = zeros(prefix + ".mlp.b1", {M});
    b.w2 = weight(prefix + ".mlp.w2", {M, D}, rng);
    b.b2 = zeros(prefix + ".mlp.b2", {D});
    return b;
  }

  Pooler make_pooler(const std::string& prefix, std::size_t queries, std::mt19937_64& rng) {
    Pooler p;
    p.queries = weight(prefix + ".query", {queries, config_.dim}, rng);
    p.attn = make_attn(prefix, rng);
    return p;
  }

  void check_tokens(const TokenBatch& tokens) const {
    if (tokens.batch == 0 || tokens.ids.size() != tokens.batch * tokens.length) {
      throw ShapeError("text decoder: malformed token batch");
    }
    if (tokens.length > config_.max_text_length) {
      throw InvalidArgument("text decoder: sequence length " + std::to_string(tokens.length) +
                            " exceeds max_text_length " + std::to_string(config_.max_text_length));
    }
  }

  Tensor<T> attend(const Attn& a, const Tensor<T>& queries, const Tensor<T>& context, std::size_t batch,
                   bool causal) const {
    auto q = ad::linear(queries, a.wq, a.bq);
    auto k = ad::linear(context, a.wk, a.bk);
    auto v = ad::linear(context, a.wv, a.bv);
    return ad::linear(ad::attention(q, k, v, batch, config_.heads, causal), a.wo, a.bo);
  }

  // Pre-norm residual block; `cross` adds cross-attention to the given context.
  Tensor<T> block_forward(const Block& b, const Tensor<T>& x, std::size_t batch, bool causal,
                          const Tensor<T>* cross) const {
    auto h = ad::layer_norm(x, b.ln1_g, b.ln1_b);
    auto y = ad::add(x, attend(b.self_attn, h, h, batch, causal));
    if (cross) {
      auto hx = ad::layer_norm(y, b.lnx_g, b.lnx_b);
      y = ad::add(y, attend(b.cross_attn, hx, *cross, batch, false));
    }
    auto h2 = ad::layer_norm(y, b.ln2_g, b.ln2_b);
    auto m = ad::linear(ad::gelu(ad::linear(h2, b.w1, b.b1)), b.w2, b.b2);
    return ad::add(y, m);
  }

  ModelConfig config_;
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
  Tensor<T> patch_w_, patch_b_, image_pos_, image_ln_g_, image_ln_b_;
  std::vector<Block> encoder_;
  Pooler con_pool_, gen_pool_;
  Tensor<T> token_emb_, text_pos_, cls_ln_g_, cls_ln_b_, text_proj_;
  std::vector<Block> unimodal_, multimodal_;
  Tensor<T> out_ln_g_, out_ln_b_, head_w_, head_b_, log_tau_;
};

}  // namespace vila
