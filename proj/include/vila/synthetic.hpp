#pragma once

// Procedural image/comment corpus with a luminance-driven mos, for self-contained
// end-to-end runs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "vila/data.hpp"
#include "vila/image.hpp"
#include "vila/prompt_bank.hpp"

namespace vila {

struct SyntheticSpec {
  std::size_t count = 512;
  std::size_t image_size = 40;
  std::size_t comments_per_image = 3;
  // mos = 1 + 9 * mean_luminance + U(-mos_noise, mos_noise)
  double mos_noise = 0.25;
  std::string statistic = "luminance";

  void validate() const {
    if (count == 0) throw InvalidArgument("synthetic spec: count must be positive");
    if (image_size < 8) throw InvalidArgument("synthetic spec: image_size must be at least 8");
    if (comments_per_image == 0) throw InvalidArgument("synthetic spec: comments_per_image must be positive");
    if (!(mos_noise >= 0.0 && mos_noise <= 0.5)) throw InvalidArgument("synthetic spec: mos_noise must be in [0, 0.5]");
    if (statistic != "luminance") throw InvalidArgument("synthetic spec: unsupported statistic '" + statistic + "'");
  }
};

/// Latent attributes of one rendered image.
struct SyntheticAttributes {
  double brightness = 0.5;
  double contrast = 0.5;
  std::size_t hue = 0;
  std::size_t pattern = 0;
};

struct SyntheticHue {
  const char* name;
  std::array<double, 3> tint;
};

inline const std::array<SyntheticHue, 6>& synthetic_hues() {
  static const std::array<SyntheticHue, 6> hues{{{"red", {1.35, 0.80, 0.85}},
                                                 {"green", {0.80, 1.35, 0.85}},
                                                 {"blue", {0.85, 0.85, 1.30}},
                                                 {"yellow", {1.20, 1.15, 0.65}},
                                                 {"purple", {1.15, 0.70, 1.15}},
                                                 {"cyan", {0.70, 1.15, 1.15}}}};
  return hues;
}

struct SyntheticPattern {
  const char* name;
  const char* style;  // style class in the default prompt bank
};

inline const std::array<SyntheticPattern, 6>& synthetic_patterns() {
  static const std::array<SyntheticPattern, 6> patterns{{{"grain", "Image_Grain"},
                                                         {"streaks", "Motion_Blur"},
                                                         {"silhouette", "Silhouettes"},
                                                         {"split", "Duotones"},
                                                         {"rays", "Vanishing_Point"},
                                                         {"blob", "Soft_Focus"}}};
  return patterns;
}

namespace detail {

// Pattern field in [-1, 1] at pixel (x, y) of an s×s image.
inline double pattern_value(std::size_t pattern, std::size_t x, std::size_t y, std::size_t s, std::mt19937_64& rng) {
  constexpr double kPi = 3.14159265358979323846;
  const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(s) - 0.5;
  const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(s) - 0.5;
  const double r = std::sqrt(u * u + v * v);
  switch (pattern) {
    case 0: return std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
    case 1: return std::sin(2.0 * kPi * static_cast<double>(y) / 8.0);
    case 2: return r < 0.25 ? -1.0 : 1.0;
    case 3: return x < s / 2 ? 1.0 : -1.0;
    case 4: return std::sin(8.0 * std::atan2(v, u));
    default: return 2.0 * std::exp(-r * r / (2.0 * 0.2 * 0.2)) - 1.0;
  }
}

template <std::size_t N>
const char* pick(const std::array<const char*, N>& options, std::mt19937_64& rng) {
  return options[std::uniform_int_distribution<std::size_t>(0, N - 1)(rng)];
}

}  // namespace detail

inline Image render_synthetic(const SyntheticAttributes& a, std::size_t size, std::mt19937_64& rng) {
  Image img(size, size, 3);
  const auto& tint = synthetic_hues().at(a.hue).tint;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double gray = a.brightness + 0.3 * a.contrast * detail::pattern_value(a.pattern, x, y, size, rng);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(gray * tint[c], 0.0, 1.0);
        img.at(x, y, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  return img;
}

/// Mean of all channel values, scaled to [0, 1].
inline double mean_luminance(const Image& img) {
  double total = 0.0;
  for (auto p : img.pixels) total += p;
  return total / (255.0 * static_cast<double>(img.pixels.size()));
}

/// One comment from attribute-keyed phrases. Brightness drives the quality and
/// lighting phrases; hue, contrast and pattern add content words.
inline std::string synthetic_comment(const SyntheticAttributes& a, double luminance, std::mt19937_64& rng) {
  const int level = luminance > 0.65 ? 2 : (luminance < 0.35 ? 0 : 1);
  static const std::array<std::array<const char*, 3>, 3> quality{{{"bad image", "poor photo", "dull shot"},
                                                                  {"decent image", "okay photo", "average shot"},
                                                                  {"good image", "great photo", "beautiful shot"}}};
  static const std::array<std::array<const char*, 3>, 3> lighting{
      {{"bad lighting", "too dark", "underexposed"},
       {"fair lighting", "exposure is fine", "moderate light"},
       {"good lighting", "bright and well exposed", "great light"}}};
  const std::string color = synthetic_hues().at(a.hue).name;
  std::vector<std::string> extras{color + " tones", "nice " + color + " colors", "lots of " + color};
  extras.push_back(a.contrast > 0.6 ? "strong contrast" : "flat contrast");
  const auto& bank = default_prompt_bank();
  const auto& style = bank.styles.at(bank.style_index(synthetic_patterns().at(a.pattern).style));
  extras.push_back(style.ensemble[std::uniform_int_distribution<std::size_t>(0, style.ensemble.size() - 1)(rng)]);

  std::bernoulli_distribution coin(0.5);
  std::string out = coin(rng) ? detail::pick(quality[level], rng) : detail::pick(lighting[level], rng);
  std::uniform_int_distribution<std::size_t> extra(0, extras.size() - 1);
  out += " " + extras[extra(rng)];
  if (coin(rng)) out += " " + std::string(coin(rng) ? detail::pick(lighting[level], rng) : detail::pick(quality[level], rng));
  return out;
}

/// Renders `spec.count` images into out_dir/images and writes out_dir/manifest.jsonl.
inline std::vector<ManifestRecord> generate_synthetic_corpus(const SyntheticSpec& spec, std::uint64_t seed,
                                                             const std::filesystem::path& out_dir) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<ManifestRecord> records;
  for (std::size_t i = 0; i < spec.count; ++i) {
    SyntheticAttributes a;
    a.brightness = 0.05 + 0.9 * unit(rng);
    a.contrast = 0.2 + 0.8 * unit(rng);
    a.hue = std::uniform_int_distribution<std::size_t>(0, synthetic_hues().size() - 1)(rng);
    a.pattern = std::uniform_int_distribution<std::size_t>(0, synthetic_patterns().size() - 1)(rng);
    const Image img = render_synthetic(a, spec.image_size, rng);
    const double lum = mean_luminance(img);

    char id[32];
    std::snprintf(id, sizeof(id), "syn_%05zu", i);
    ManifestRecord r;
    r.id = id;
    r.image = "images/" + r.id + ".ppm";
    for (std::size_t c = 0; c < spec.comments_per_image; ++c) r.comments.push_back(synthetic_comment(a, lum, rng));
    const double noise = spec.mos_noise > 0.0 ? (2.0 * unit(rng) - 1.0) * spec.mos_noise : 0.0;
    r.mos = std::clamp(1.0 + 9.0 * lum + noise, 1.0, 10.0);
    r.styles = std::vector<int>{static_cast<int>(default_prompt_bank().style_index(synthetic_patterns().at(a.pattern).style))};
    write_image(img, out_dir / r.image);
    records.push_back(std::move(r));
  }
  save_manifest(records, out_dir / "manifest.jsonl");
  return records;
}

}  // namespace vila
