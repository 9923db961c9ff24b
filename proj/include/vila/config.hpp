#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vila/error.hpp"
#include "vila/io.hpp"

namespace vila {

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t patch_size = 8;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t encoder_layers = 2;
  std::size_t unimodal_layers = 2;
  std::size_t multimodal_layers = 2;
  std::size_t mlp_dim = 256;
  std::size_t generative_pool_queries = 8;
  std::size_t vocab_size = 512;
  std::size_t max_text_length = 64;

  std::size_t patches_per_side() const { return image_size / patch_size; }
  /// Number of visual tokens K.
  std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw InvalidArgument(std::string("model config: ") + name + " must be positive");
    };
    positive(image_size, "image_size");
    positive(channels, "channels");
    positive(patch_size, "patch_size");
    positive(dim, "dim");
    positive(heads, "heads");
    positive(mlp_dim, "mlp_dim");
    positive(generative_pool_queries, "generative_pool_queries");
    positive(vocab_size, "vocab_size");
    if (image_size % patch_size != 0) {
      throw InvalidArgument("model config: image_size " + std::to_string(image_size) +
                            " not divisible by patch_size " + std::to_string(patch_size));
    }
    if (dim % heads != 0) {
      throw InvalidArgument("model config: dim " + std::to_string(dim) + " not divisible by heads " +
                            std::to_string(heads));
    }
    if (max_text_length < 3) throw InvalidArgument("model config: max_text_length must be at least 3");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"channels", c.channels},
                     {"patch_size", c.patch_size},
                     {"dim", c.dim},
                     {"heads", c.heads},
                     {"encoder_layers", c.encoder_layers},
                     {"unimodal_layers", c.unimodal_layers},
                     {"multimodal_layers", c.multimodal_layers},
                     {"mlp_dim", c.mlp_dim},
                     {"generative_pool_queries", c.generative_pool_queries},
                     {"vocab_size", c.vocab_size},
                     {"max_text_length", c.max_text_length}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.channels = j.value("channels", d.channels);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.dim = j.value("dim", d.dim);
  c.heads = j.value("heads", d.heads);
  c.encoder_layers = j.value("encoder_layers", d.encoder_layers);
  c.unimodal_layers = j.value("unimodal_layers", d.unimodal_layers);
  c.multimodal_layers = j.value("multimodal_layers", d.multimodal_layers);
  c.mlp_dim = j.value("mlp_dim", d.mlp_dim);
  c.generative_pool_queries = j.value("generative_pool_queries", d.generative_pool_queries);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_text_length = j.value("max_text_length", d.max_text_length);
}

struct AugmentationConfig {
  std::size_t source_size = 40;
  std::size_t crop_size = 32;
  bool horizontal_flip = true;
  bool enabled = true;

  void validate() const {
    if (crop_size == 0 || crop_size > source_size) {
      throw InvalidArgument("augmentation: crop_size must be in [1, source_size]");
    }
  }
  bool operator==(const AugmentationConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const AugmentationConfig& a) {
  j = nlohmann::json{{"source_size", a.source_size},
                     {"crop_size", a.crop_size},
                     {"horizontal_flip", a.horizontal_flip},
                     {"enabled", a.enabled}};
}

inline void from_json(const nlohmann::json& j, AugmentationConfig& a) {
  AugmentationConfig d;
  a.source_size = j.value("source_size", d.source_size);
  a.crop_size = j.value("crop_size", d.crop_size);
  a.horizontal_flip = j.value("horizontal_flip", d.horizontal_flip);
  a.enabled = j.value("enabled", d.enabled);
}

enum class Stage { pretrain, adapt };
enum class CommentSampling { random, fixed };

/// Training hyperparameters for either stage.
struct TrainConfig {
  ModelConfig model;
  AugmentationConfig augmentation;
  Stage stage = Stage::pretrain;
  std::size_t steps = 2000;
  // Stop early at this step while keeping the schedule length `steps`.
  std::optional<std::size_t> stop_at_step;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double alpha = 1.0;
  double beta = 2.0;
  double margin = 0.1;
  bool use_residual = true;
  bool use_text_anchor = true;
  double grad_clip = 1.0;
  double initial_temperature = 0.07;
  std::size_t max_vocab = 512;
  CommentSampling comment_sampling = CommentSampling::random;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;
  std::size_t eval_every = 0;
  std::size_t log_every = 1;

  void validate() const {
    model.validate();
    augmentation.validate();
    if (augmentation.crop_size != model.image_size) {
      throw InvalidArgument("train config: augmentation crop_size must equal model image_size");
    }
    if (steps < 1) throw InvalidArgument("train config: steps must be >= 1");
    if (!(learning_rate > 0.0)) throw InvalidArgument("train config: learning_rate must be > 0");
    if (batch_size < 1) throw InvalidArgument("train config: batch_size must be >= 1");
    if (alpha < 0.0 || beta < 0.0 || !(alpha + beta > 0.0)) {
      throw InvalidArgument("train config: loss weights must be nonnegative with positive sum");
    }
    if (weight_decay < 0.0) throw InvalidArgument("train config: weight_decay must be >= 0");
    if (stage == Stage::adapt && batch_size < 2) {
      throw InvalidArgument("train config: adapter batches need at least two images");
    }
    if (stop_at_step && *stop_at_step > steps) {
      throw InvalidArgument("train config: stop_at_step exceeds steps");
    }
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"model", c.model},
                     {"augmentation", c.augmentation},
                     {"stage", c.stage == Stage::pretrain ? "pretrain" : "adapt"},
                     {"steps", c.steps},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"weight_decay", c.weight_decay},
                     {"alpha", c.alpha},
                     {"beta", c.beta},
                     {"margin", c.margin},
                     {"use_residual", c.use_residual},
                     {"use_text_anchor", c.use_text_anchor},
                     {"grad_clip", c.grad_clip},
                     {"initial_temperature", c.initial_temperature},
                     {"max_vocab", c.max_vocab},
                     {"comment_sampling", c.comment_sampling == CommentSampling::random ? "random" : "fixed"},
                     {"seed", c.seed},
                     {"checkpoint_every", c.checkpoint_every},
                     {"eval_every", c.eval_every},
                     {"log_every", c.log_every}};
  if (c.stop_at_step) j["stop_at_step"] = *c.stop_at_step;
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.model = j.value("model", d.model);
  c.augmentation = j.value("augmentation", d.augmentation);
  const std::string stage = j.value("stage", std::string("pretrain"));
  if (stage != "pretrain" && stage != "adapt") throw FormatError("train config: unknown stage '" + stage + "'");
  c.stage = stage == "pretrain" ? Stage::pretrain : Stage::adapt;
  c.steps = j.value("steps", d.steps);
  if (j.contains("stop_at_step")) c.stop_at_step = j.at("stop_at_step").get<std::size_t>();
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.alpha = j.value("alpha", d.alpha);
  c.beta = j.value("beta", d.beta);
  c.margin = j.value("margin", d.margin);
  c.use_residual = j.value("use_residual", d.use_residual);
  c.use_text_anchor = j.value("use_text_anchor", d.use_text_anchor);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.initial_temperature = j.value("initial_temperature", d.initial_temperature);
  c.max_vocab = j.value("max_vocab", d.max_vocab);
  const std::string sampling = j.value("comment_sampling", std::string("random"));
  if (sampling != "random" && sampling != "fixed") {
    throw FormatError("train config: unknown comment_sampling '" + sampling + "'");
  }
  c.comment_sampling = sampling == "random" ? CommentSampling::random : CommentSampling::fixed;
  c.seed = j.value("seed", d.seed);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.log_every = j.value("log_every", d.log_every);
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(io::read_file(path)).get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace vila
