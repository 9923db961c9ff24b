#pragma once

// Two-stage training: CoCa-style pretraining, then rank-adapter finetuning on a
// frozen backbone. Plus greedy captioning and frozen-embedding extraction.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "vila/checkpoint.hpp"
#include "vila/config.hpp"
#include "vila/data.hpp"
#include "vila/model.hpp"
#include "vila/objectives.hpp"
#include "vila/optim.hpp"
#include "vila/prompt_bank.hpp"
#include "vila/tokenizer.hpp"
#include "vila/zsl.hpp"

namespace vila {

inline constexpr double kMinLogTau = -6.907755278982137;  // log(1e-3)
inline constexpr double kMaxLogTau = 2.302585092994046;   // log(10)

/// Append-only JSON Lines log.
class RunLog {
 public:
  void append(const nlohmann::ordered_json& entry) { lines_.push_back(entry.dump()); }
  void append_line(std::string line) { lines_.push_back(std::move(line)); }
  const std::vector<std::string>& lines() const { return lines_; }
  std::string text() const {
    std::string out;
    for (const auto& l : lines_) out += l + "\n";
    return out;
  }
  void save(const std::filesystem::path& path) const { io::atomic_write(path, text()); }
  static RunLog load(const std::filesystem::path& path) {
    RunLog log;
    std::istringstream in(io::read_file(path));
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) log.lines_.push_back(line);
    return log;
  }

 private:
  std::vector<std::string> lines_;
};

// ---- checkpoint bundles -----------------------------------------------------

inline std::filesystem::path sidecar(const std::filesystem::path& ckpt, const char* suffix) {
  return std::filesystem::path(ckpt.string() + suffix);
}

/// A pretrained backbone with the vocabulary and config it was trained with.
struct ModelBundle {
  TrainConfig config;
  Vocabulary vocab;
  CocaModel<float> model;
};

inline void save_bundle(const ModelBundle& b, const std::filesystem::path& path) {
  b.model.save(path);
  b.vocab.save(sidecar(path, ".vocab"));
  io::atomic_write(sidecar(path, ".config.json"), nlohmann::json(b.config).dump(2) + "\n");
}

/// Loads `path` plus its .vocab and .config.json sidecars.
inline ModelBundle load_bundle(const std::filesystem::path& path) {
  TrainConfig cfg = load_train_config(sidecar(path, ".config.json"));
  Vocabulary vocab = Vocabulary::load(sidecar(path, ".vocab"));
  if (vocab.size() != cfg.model.vocab_size) {
    throw FormatError("checkpoint bundle: vocabulary has " + std::to_string(vocab.size()) + " tokens, config says " +
                      std::to_string(cfg.model.vocab_size));
  }
  CocaModel<float> model(cfg.model, cfg.seed, cfg.initial_temperature);
  model.load(path);
  return {std::move(cfg), std::move(vocab), std::move(model)};
}

/// Hex digest of the checkpoint file, used to tag derived artifacts.
inline std::string checkpoint_hash(const std::filesystem::path& path) { return io::hex64(io::fnv1a64(io::read_file(path))); }

// ---- shared helpers ---------------------------------------------------------

inline Tensor<float> patches_tensor(std::vector<float> patches, std::size_t batch, const ModelConfig& m) {
  return Tensor<float>::from({batch * m.num_patches(), m.patch_dim()}, std::move(patches));
}

/// Unnormalized contrastive image embeddings v for every record (center crop), [N, D] row-major.
inline std::vector<double> image_embeddings(const CocaModel<float>& model, const Manifest& manifest,
                                            const AugmentationConfig& aug, std::size_t chunk = 64) {
  ad::NoGradGuard guard;
  ImageStore store(manifest);
  const auto& m = model.config();
  std::vector<double> out;
  std::mt19937_64 unused(0);
  for (std::size_t i = 0; i < manifest.records.size(); i += chunk) {
    const std::size_t n = std::min(chunk, manifest.records.size() - i);
    std::vector<float> patches;
    for (std::size_t j = i; j < i + n; ++j) {
      const auto p = image_patches<float>(prepare_image(store.get(j), aug, unused, false), m.patch_size);
      patches.insert(patches.end(), p.begin(), p.end());
    }
    auto v = model.image_embedding_raw(model.encode_images(patches_tensor(std::move(patches), n, m), n), n);
    out.insert(out.end(), v.data().begin(), v.data().end());
  }
  return out;
}

// ---- pretraining ------------------------------------------------------------

struct PretrainState {
  TrainConfig config;
  Vocabulary vocab;
  CocaModel<float> model;
  AdamW<float> optimizer;
  std::size_t step = 0;  // completed steps
  RunLog log;

  PretrainState(TrainConfig c, Vocabulary v)
      : config(std::move(c)), vocab(std::move(v)), model(config.model, config.seed, config.initial_temperature),
        optimizer(model.parameters(), {0.9, 0.999, 1e-8, config.weight_decay}) {}
};

inline std::vector<std::string> all_comments(const Manifest& manifest) {
  std::vector<std::string> out;
  for (const auto& r : manifest.records) out.insert(out.end(), r.comments.begin(), r.comments.end());
  return out;
}

/// Fresh state: vocabulary from the manifest comments, model initialized from the seed.
inline PretrainState init_pretrain(TrainConfig cfg, const Manifest& manifest) {
  validate_for_pretraining(manifest.records);
  const auto corpus = all_comments(manifest);
  Vocabulary vocab = Vocabulary::build(corpus, cfg.max_vocab);
  cfg.model.vocab_size = vocab.size();
  cfg.stage = Stage::pretrain;
  cfg.validate();
  return PretrainState(std::move(cfg), std::move(vocab));
}

/// Resumes from a checkpoint written by save_pretrain. Schedule fields come from
/// `cfg`; model shape, vocabulary and seed from the checkpoint.
inline PretrainState resume_pretrain(const std::filesystem::path& path, std::optional<TrainConfig> cfg = {}) {
  ModelBundle b = load_bundle(path);
  TrainConfig c = cfg ? *cfg : b.config;
  c.model = b.config.model;
  c.seed = b.config.seed;
  c.stage = Stage::pretrain;
  c.validate();
  PretrainState s(std::move(c), std::move(b.vocab));
  s.model.load_records(b.model.to_records());
  const auto optim_path = sidecar(path, ".optim");
  if (std::filesystem::exists(optim_path)) s.optimizer.load_records(ckpt::load(optim_path));
  s.step = s.optimizer.step_count();
  const auto log_path = sidecar(path, ".runlog.jsonl");
  if (std::filesystem::exists(log_path)) s.log = RunLog::load(log_path);
  return s;
}

inline void save_pretrain(const PretrainState& s, const std::filesystem::path& path) {
  TrainConfig cfg = s.config;
  cfg.stop_at_step.reset();
  s.model.save(path);
  s.vocab.save(sidecar(path, ".vocab"));
  io::atomic_write(sidecar(path, ".config.json"), nlohmann::json(cfg).dump(2) + "\n");
  ckpt::save(s.optimizer.to_records(), sidecar(path, ".optim"));
  s.log.save(sidecar(path, ".runlog.jsonl"));
}

struct PretrainLosses {
  Tensor<float> total;
  double contrastive = 0.0;
  double generative = 0.0;
};

/// alpha·L_con + beta·L_gen on one batch; L_gen is the per-caption token-sum NLL averaged over the batch.
inline PretrainLosses pretrain_forward(const CocaModel<float>& model, const Batch& batch, const TrainConfig& cfg) {
  const auto& m = model.config();
  const std::size_t n = batch.size();
  auto visual = model.encode_images(patches_tensor(batch.patches, n, m), n);
  auto x = ad::l2_normalize(model.image_embedding_raw(visual, n));
  auto y = ad::l2_normalize(model.text_embedding_raw(TokenBatch::from(batch.contrastive)));
  auto con = contrastive_loss(x, y, model.temperature());
  auto pooled = model.attentional_pool(visual, n, model.generative_pooler());
  const auto gb = GenerativeBatch::from(batch.generative);
  auto logits = model.multimodal_logits(gb.inputs, pooled);
  auto gen = ad::scale(generative_loss(logits, std::span<const TokenId>(gb.targets), std::span<const std::uint8_t>(gb.mask)),
                       1.0 / static_cast<double>(n));
  PretrainLosses out{pretraining_loss(con, gen, LossWeights{cfg.alpha, cfg.beta}), con.item(), gen.item()};
  return out;
}

inline std::size_t batches_per_epoch(std::size_t n, std::size_t batch_size) { return (n + batch_size - 1) / batch_size; }

/// Indices for 1-indexed step `step`: epoch-seeded shuffle, cycling through epochs.
inline std::vector<std::size_t> step_batch(std::size_t n, std::size_t batch_size, std::uint64_t seed, std::size_t step,
                                           std::size_t* epoch_out = nullptr, std::size_t* index_out = nullptr) {
  const std::size_t per = batches_per_epoch(n, batch_size);
  const std::size_t epoch = (step - 1) / per;
  const std::size_t index = (step - 1) % per;
  if (epoch_out) *epoch_out = epoch;
  if (index_out) *index_out = index;
  return make_batch_indices(n, batch_size, seed, epoch)[index];
}

struct PretrainHooks {
  std::function<void(const PretrainState&)> on_checkpoint;
  std::function<void(const std::string&)> on_log;
};

/// Runs steps (state.step, until]. The lr schedule always spans config.steps.
inline void run_pretrain(PretrainState& s, const Manifest& manifest, std::size_t until, const PretrainHooks& hooks = {}) {
  validate_for_pretraining(manifest.records);
  const auto& cfg = s.config;
  until = std::min(until, cfg.steps);
  ImageStore store(manifest);
  const std::size_t n = manifest.records.size();
  auto params = s.model.parameters();
  auto log_tau = s.model.log_temperature();
  while (s.step < until) {
    const std::size_t step = s.step + 1;
    std::size_t epoch = 0, index = 0;
    const auto idx = step_batch(n, cfg.batch_size, cfg.seed, step, &epoch, &index);
    auto rng = derived_rng(cfg.seed, epoch, index, 1);
    const Batch batch = assemble_batch(manifest, store, idx, s.vocab, cfg.model, cfg.augmentation,
                                       cfg.comment_sampling, rng, true);
    PretrainLosses losses;
    try {
      losses = pretrain_forward(s.model, batch, cfg);
    } catch (const Error& e) {
      throw Error("pretrain: aborting at step " + std::to_string(step) + ": " + e.what());
    }
    s.model.zero_grad();
    ad::backward(losses.total);
    const double grad_norm = clip_grad_norm(params, cfg.grad_clip);
    const double lr = linear_decay_lr(cfg.learning_rate, step, cfg.steps);
    s.optimizer.step(lr);
    auto& lt = log_tau.data()[0];
    lt = std::clamp(lt, static_cast<float>(kMinLogTau), static_cast<float>(kMaxLogTau));
    s.step = step;

    nlohmann::ordered_json entry;
    entry["kind"] = "step";
    entry["step"] = step;
    entry["loss"] = static_cast<double>(losses.total.item());
    entry["contrastive"] = losses.contrastive;
    entry["generative"] = losses.generative;
    entry["tau"] = std::exp(static_cast<double>(lt));
    entry["lr"] = lr;
    entry["grad_norm"] = grad_norm;
    s.log.append(entry);
    if (hooks.on_log && (cfg.log_every > 0 && (step % cfg.log_every == 0 || step == until))) hooks.on_log(s.log.lines().back());

    if (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
      // Loss on the first batch_size records: center crop, first comment.
      ad::NoGradGuard guard;
      std::vector<std::size_t> first(std::min(n, cfg.batch_size));
      std::iota(first.begin(), first.end(), 0);
      std::mt19937_64 eval_rng(0);
      const Batch eb = assemble_batch(manifest, store, first, s.vocab, cfg.model, cfg.augmentation,
                                      CommentSampling::fixed, eval_rng, false);
      const auto el = pretrain_forward(s.model, eb, cfg);
      nlohmann::ordered_json ev;
      ev["kind"] = "eval";
      ev["step"] = step;
      ev["loss"] = static_cast<double>(el.total.item());
      ev["contrastive"] = el.contrastive;
      ev["generative"] = el.generative;
      s.log.append(ev);
      if (hooks.on_log) hooks.on_log(s.log.lines().back());
    }
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && hooks.on_checkpoint) hooks.on_checkpoint(s);
  }
}

// ---- adapter finetuning -----------------------------------------------------

struct AdapterResult {
  AdapterState<double> adapter;
  RunLog log;
  std::size_t tunable = 0;
  std::size_t total = 0;
  double tunable_fraction = 0.0;
  // Names of tensors (backbone and adapter) whose values changed during training.
  std::vector<std::string> updated;
};

inline std::vector<double> anchor_embedding(const CocaModel<float>& model, const Vocabulary& vocab,
                                            const std::string& text) {
  return embed_texts(model, vocab, {text}).front();
}

/// Trains H (and the learnable anchor in the no-text-anchor variant) on cached
/// frozen embeddings. The backbone is only read.
inline AdapterResult adapter_finetune(const TrainConfig& cfg, const Manifest& manifest, const ModelBundle& bundle,
                                      const std::string& anchor_text = "good image",
                                      const std::function<void(const std::string&)>& on_log = {}) {
  cfg.validate();
  validate_for_adapter(manifest.records);
  if (cfg.model.image_size != bundle.config.model.image_size) {
    throw InvalidArgument("adapter: config image_size differs from the checkpoint's");
  }
  const std::size_t n = manifest.records.size();
  std::vector<double> labels;
  for (const auto& r : manifest.records) labels.push_back(*r.mos);
  if (strict_order_pairs(labels).empty()) {
    throw InvalidArgument("adapter: all mos labels are tied, no batch has an ordered pair");
  }
  const auto before = bundle.model.to_records();

  const std::size_t d = bundle.model.config().dim;
  const auto v_all = image_embeddings(bundle.model, manifest, cfg.augmentation);
  const auto w_p = anchor_embedding(bundle.model, bundle.vocab, anchor_text);
  AdapterResult result{AdapterState<double>(w_p, {cfg.margin, cfg.use_residual, cfg.use_text_anchor}, cfg.seed), {}, 0, 0, 0.0, {}};
  const auto initial = result.adapter.to_records();
  AdamW<double> opt(result.adapter.trainable(), {0.9, 0.999, 1e-8, cfg.weight_decay});

  for (std::size_t step = 1; step <= (cfg.stop_at_step ? *cfg.stop_at_step : cfg.steps); ++step) {
    const auto idx = step_batch(n, cfg.batch_size, cfg.seed, step);
    std::vector<double> v, l;
    for (auto i : idx) {
      v.insert(v.end(), v_all.begin() + static_cast<std::ptrdiff_t>(i * d), v_all.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
      l.push_back(labels[i]);
    }
    const double lr = linear_decay_lr(cfg.learning_rate, step, cfg.steps);
    nlohmann::ordered_json entry;
    entry["kind"] = "step";
    entry["step"] = step;
    if (strict_order_pairs(l).empty()) {
      entry["skipped"] = "all-tied batch";
      entry["lr"] = lr;
      result.log.append(entry);
      continue;
    }
    auto vt = Tensor<double>::from({idx.size(), d}, std::move(v));
    auto loss = rank_adapter_loss(vt, l, result.adapter);
    for (auto& [name, t] : result.adapter.trainable()) t.zero_grad();
    ad::backward(loss);
    opt.step(lr);
    entry["loss"] = loss.item();
    entry["lr"] = lr;
    result.log.append(entry);
    if (on_log && cfg.log_every > 0 && step % cfg.log_every == 0) on_log(result.log.lines().back());
  }

  // Registry diff: which tensors changed at all.
  const auto after = bundle.model.to_records();
  for (std::size_t i = 0; i < before.size(); ++i)
    if (!(before[i] == after[i])) result.updated.push_back(before[i].name);
  const auto final_records = result.adapter.to_records();
  for (const auto& r : final_records) {
    const auto* r0 = ckpt::find(initial, r.name);
    if (!r0 || !(*r0 == r)) result.updated.push_back(r.name);
  }
  result.tunable = result.adapter.trainable_count();
  result.total = bundle.model.parameter_count() + result.tunable;
  result.tunable_fraction = static_cast<double>(result.tunable) / static_cast<double>(result.total);
  return result;
}

/// Adapter scores (cosine to the anchor) for raw embeddings [N, D].
inline std::vector<double> adapter_scores(const AdapterState<double>& adapter, const std::vector<double>& v, std::size_t d) {
  ad::NoGradGuard guard;
  auto t = Tensor<double>::from({v.size() / d, d}, v);
  auto s = adapter_score(adapt_embedding(t, adapter), adapter);
  return s.data();
}

// ---- captioning -------------------------------------------------------------

/// Greedy decoding for a batch of images. PAD, BOS and CLS are never emitted;
/// each caption stops at EOS or after max_tokens words.
inline std::vector<std::vector<TokenId>> greedy_decode(const CocaModel<float>& model, const Tensor<float>& patches,
                                                       std::size_t batch, std::size_t max_tokens) {
  ad::NoGradGuard guard;
  const auto visual = model.encode_images(patches, batch);
  const auto pooled = model.attentional_pool(visual, batch, model.generative_pooler());
  const std::size_t vocab = model.config().vocab_size;
  std::vector<std::vector<TokenId>> seqs(batch, std::vector<TokenId>{tokens::kBos});
  std::vector<bool> done(batch, false);
  std::vector<std::vector<TokenId>> out(batch);
  for (std::size_t t = 0; t < max_tokens; ++t) {
    const auto tb = TokenBatch::from(seqs);
    const auto logits = model.multimodal_logits(tb, pooled);
    bool all_done = true;
    for (std::size_t b = 0; b < batch; ++b) {
      const float* row = logits.data().data() + (b * tb.length + tb.length - 1) * vocab;
      TokenId best = tokens::kEos;
      float best_v = -std::numeric_limits<float>::infinity();
      for (std::size_t k = 0; k < vocab; ++k) {
        const auto id = static_cast<TokenId>(k);
        if (id == tokens::kPad || id == tokens::kBos || id == tokens::kCls) continue;
        if (row[k] > best_v) {
          best_v = row[k];
          best = id;
        }
      }
      seqs[b].push_back(best);
      if (!done[b]) {
        if (best == tokens::kEos) {
          done[b] = true;
        } else {
          out[b].push_back(best);
        }
      }
      all_done = all_done && done[b];
    }
    if (all_done) break;
  }
  return out;
}

/// Greedy captions for every record (center crop).
inline std::vector<std::string> generate_captions(const ModelBundle& bundle, const Manifest& manifest, std::size_t chunk = 32) {
  ImageStore store(manifest);
  const auto& m = bundle.model.config();
  std::mt19937_64 unused(0);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < manifest.records.size(); i += chunk) {
    const std::size_t n = std::min(chunk, manifest.records.size() - i);
    std::vector<float> patches;
    for (std::size_t j = i; j < i + n; ++j) {
      const auto p = image_patches<float>(prepare_image(store.get(j), bundle.config.augmentation, unused, false), m.patch_size);
      patches.insert(patches.end(), p.begin(), p.end());
    }
    const auto ids = greedy_decode(bundle.model, patches_tensor(std::move(patches), n, m), n, m.max_text_length - 1);
    for (const auto& s : ids) out.push_back(decode(s, bundle.vocab));
  }
  return out;
}

}  // namespace vila
