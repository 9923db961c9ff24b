#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "vila/config.hpp"
#include "vila/error.hpp"
#include "vila/image.hpp"
#include "vila/io.hpp"
#include "vila/model.hpp"
#include "vila/tokenizer.hpp"

namespace vila {

inline constexpr int kNumStyles = 14;

struct ManifestRecord {
  std::string id;
  std::string image;  // as written in the manifest, relative to its directory
  std::vector<std::string> comments;
  std::optional<double> mos;
  std::optional<std::vector<int>> styles;

  bool operator==(const ManifestRecord&) const = default;
};

struct Manifest {
  std::filesystem::path base_dir;
  std::vector<ManifestRecord> records;

  std::filesystem::path image_path(const ManifestRecord& r) const { return base_dir / r.image; }
};

inline nlohmann::ordered_json to_json(const ManifestRecord& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["image"] = r.image;
  j["comments"] = r.comments;
  if (r.mos) j["mos"] = *r.mos;
  if (r.styles) j["styles"] = *r.styles;
  return j;
}

inline ManifestRecord parse_manifest_line(const std::string& line, std::size_t lineno) {
  const std::string where = "manifest line " + std::to_string(lineno) + ": ";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(where + "invalid JSON (" + e.what() + ")");
  }
  if (!j.is_object()) throw FormatError(where + "record must be an object");
  ManifestRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.image = j.at("image").get<std::string>();
    if (j.contains("comments")) r.comments = j.at("comments").get<std::vector<std::string>>();
    if (j.contains("mos") && !j.at("mos").is_null()) r.mos = j.at("mos").get<double>();
    if (j.contains("styles") && !j.at("styles").is_null()) r.styles = j.at("styles").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + e.what());
  }
  if (r.id.empty()) throw FormatError(where + "empty id");
  if (r.mos && !(*r.mos >= 1.0 && *r.mos <= 10.0)) throw FormatError(where + "mos outside [1, 10]");
  if (r.styles) {
    for (int s : *r.styles)
      if (s < 0 || s >= kNumStyles) throw FormatError(where + "style label outside [0, 13]");
  }
  return r;
}

/// One JSON record per line; blank lines are skipped. Image files are not touched.
inline Manifest load_manifest(const std::filesystem::path& path) {
  Manifest m;
  m.base_dir = path.parent_path();
  std::istringstream in(io::read_file(path));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    m.records.push_back(parse_manifest_line(line, lineno));
  }
  return m;
}

inline std::string serialize_manifest(std::span<const ManifestRecord> records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  return out;
}

inline void save_manifest(std::span<const ManifestRecord> records, const std::filesystem::path& path) {
  io::atomic_write(path, serialize_manifest(records));
}

inline void validate_for_pretraining(std::span<const ManifestRecord> records) {
  for (const auto& r : records)
    if (r.comments.empty()) throw InvalidArgument("record '" + r.id + "' has no comments for pretraining");
}

inline void validate_for_adapter(std::span<const ManifestRecord> records) {
  for (const auto& r : records)
    if (!r.mos) throw InvalidArgument("record '" + r.id + "' has no mos label for adapter training");
}

/// Uniform comment choice; fixed mode always returns the first comment.
inline const std::string& sample_comment(const ManifestRecord& r, std::mt19937_64& rng,
                                         CommentSampling mode = CommentSampling::random) {
  if (r.comments.empty()) throw InvalidArgument("sample_comment: record '" + r.id + "' has no comments");
  if (mode == CommentSampling::fixed) return r.comments.front();
  std::uniform_int_distribution<std::size_t> pick(0, r.comments.size() - 1);
  return r.comments[pick(rng)];
}

/// Random crop (and optional flip with probability 0.5); disabled mode returns the center crop.
inline Image augment(const Image& img, const AugmentationConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  if (img.width != cfg.source_size || img.height != cfg.source_size) {
    throw ShapeError("augment: image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                     ", expected " + std::to_string(cfg.source_size) + "x" + std::to_string(cfg.source_size));
  }
  const std::size_t slack = cfg.source_size - cfg.crop_size;
  if (!cfg.enabled) return crop(img, slack / 2, slack / 2, cfg.crop_size);
  std::uniform_int_distribution<std::size_t> offset(0, slack);
  const std::size_t x0 = offset(rng);
  const std::size_t y0 = offset(rng);
  Image out = crop(img, x0, y0, cfg.crop_size);
  if (cfg.horizontal_flip) {
    std::bernoulli_distribution flip(0.5);
    if (flip(rng)) out = flip_horizontal(out);
  }
  return out;
}

/// Deterministic generator for a (seed, epoch, batch, stream) coordinate.
inline std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

/// Epoch-seeded shuffle split into batches; the last partial batch is kept.
inline std::vector<std::vector<std::size_t>> make_batch_indices(std::size_t count, std::size_t batch_size,
                                                                std::uint64_t seed, std::uint64_t epoch) {
  if (count == 0) throw InvalidArgument("make_batches: no records");
  if (batch_size == 0) throw InvalidArgument("make_batches: batch_size must be positive");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  auto rng = derived_rng(seed, epoch, 0, 0x5eed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < count; i += batch_size)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(count, i + batch_size)));
  return batches;
}

/// Decodes images lazily and keeps them in memory.
class ImageStore {
 public:
  explicit ImageStore(const Manifest& manifest) : manifest_(&manifest) {}

  const Image& get(std::size_t index) {
    auto it = cache_.find(index);
    if (it != cache_.end()) return it->second;
    return cache_.emplace(index, read_image(manifest_->image_path(manifest_->records.at(index)))).first->second;
  }

 private:
  const Manifest* manifest_;
  std::map<std::size_t, Image> cache_;
};

struct Batch {
  std::vector<std::size_t> indices;
  std::vector<float> patches;  // size × K × patch_dim
  std::vector<std::vector<TokenId>> contrastive;
  std::vector<std::vector<TokenId>> generative;
  std::vector<double> mos;
  std::size_t size() const { return indices.size(); }
};

/// Image for model input: augmented when training, center-cropped otherwise.
inline Image prepare_image(const Image& img, const AugmentationConfig& aug, std::mt19937_64& rng, bool train) {
  if (img.width == aug.crop_size && img.height == aug.crop_size) return img;
  AugmentationConfig cfg = aug;
  cfg.enabled = train && aug.enabled;
  return augment(img, cfg, rng);
}

/// Builds the pretraining batch for `indices` with per-record comment sampling and augmentation.
inline Batch assemble_batch(const Manifest& manifest, ImageStore& images, std::span<const std::size_t> indices,
                            const Vocabulary& vocab, const ModelConfig& model, const AugmentationConfig& aug,
                            CommentSampling sampling, std::mt19937_64& rng, bool train = true) {
  Batch b;
  b.indices.assign(indices.begin(), indices.end());
  for (std::size_t idx : indices) {
    const auto& rec = manifest.records.at(idx);
    const Image img = prepare_image(images.get(idx), aug, rng, train);
    if (img.channels != model.channels || img.width != model.image_size) {
      throw ShapeError("batch: image '" + rec.id + "' does not match the model input size");
    }
    const auto p = image_patches<float>(img, model.patch_size);
    b.patches.insert(b.patches.end(), p.begin(), p.end());
    if (!rec.comments.empty()) {
      const std::string& text = sample_comment(rec, rng, sampling);
      b.contrastive.push_back(encode(text, vocab, EncodeMode::contrastive, model.max_text_length));
      b.generative.push_back(encode(text, vocab, EncodeMode::generative, model.max_text_length));
    }
    if (rec.mos) b.mos.push_back(*rec.mos);
  }
  return b;
}

}  // namespace vila
