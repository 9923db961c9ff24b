#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "vila/metrics.hpp"
#include "vila/trainer.hpp"
#include "vila/zsl.hpp"

namespace vila {

inline const std::vector<std::string>& known_tasks() {
  static const std::vector<std::string> tasks{"iaa", "zsl-iaa", "zsl-style", "caption"};
  return tasks;
}

/// Comma-separated task list, validated and deduplicated in canonical order.
inline std::vector<std::string> parse_tasks(const std::string& list) {
  std::set<std::string> wanted;
  std::string item;
  std::istringstream in(list);
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    if (std::find(known_tasks().begin(), known_tasks().end(), item) == known_tasks().end()) {
      throw InvalidArgument("unknown task '" + item + "'");
    }
    wanted.insert(item);
  }
  if (wanted.empty()) throw InvalidArgument("no tasks requested");
  std::vector<std::string> out;
  for (const auto& t : known_tasks())
    if (wanted.count(t)) out.push_back(t);
  return out;
}

struct EvalOptions {
  std::vector<std::string> tasks;
  bool zsl_ensemble = true;
  StyleMode style_mode = StyleMode::ensemble;
  PromptBank bank = default_prompt_bank();
};

namespace detail {

inline std::vector<double> mos_labels(const Manifest& m, const std::string& task) {
  std::vector<double> out;
  for (const auto& r : m.records) {
    if (!r.mos) throw InvalidArgument("task " + task + ": record '" + r.id + "' has no mos label");
    out.push_back(*r.mos);
  }
  return out;
}

inline nlohmann::ordered_json correlation_report(const std::vector<double>& pred, const std::vector<double>& mos) {
  nlohmann::ordered_json j;
  j["n"] = pred.size();
  j["srcc"] = metrics::srcc(pred, mos);
  j["plcc"] = metrics::plcc(pred, mos);
  return j;
}

inline std::vector<double> unit_rows(const std::vector<double>& v, std::size_t d) {
  std::vector<double> out(v);
  for (std::size_t i = 0; i < v.size(); i += d) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += v[i + k] * v[i + k];
    s = std::sqrt(s);
    if (s < ad::kEps) throw DegenerateError("image embedding " + std::to_string(i / d) + " has zero norm");
    for (std::size_t k = 0; k < d; ++k) out[i + k] /= s;
  }
  return out;
}

}  // namespace detail

/// Runs the requested tasks and returns a report. Identical inputs give identical bytes.
inline nlohmann::ordered_json evaluate(const ModelBundle& bundle, const AdapterState<double>* adapter,
                                       const Manifest& manifest, const EvalOptions& options) {
  if (manifest.records.empty()) throw InvalidArgument("evaluate: empty manifest");
  nlohmann::ordered_json report;
  report["records"] = manifest.records.size();
  const std::size_t d = bundle.model.config().dim;
  std::optional<std::vector<double>> v;
  auto embeddings = [&]() -> const std::vector<double>& {
    if (!v) v = image_embeddings(bundle.model, manifest, bundle.config.augmentation);
    return *v;
  };
  std::optional<PromptCache> cache;
  auto prompts = [&]() -> const PromptCache& {
    if (!cache) cache = build_prompt_cache(bundle.model, bundle.vocab, options.bank, "");
    return *cache;
  };

  for (const auto& task : options.tasks) {
    if (task == "iaa") {
      if (!adapter) throw InvalidArgument("task iaa: requires an adapter checkpoint");
      const auto mos = detail::mos_labels(manifest, task);
      report["iaa"] = detail::correlation_report(adapter_scores(*adapter, embeddings(), d), mos);
    } else if (task == "zsl-iaa") {
      const auto mos = detail::mos_labels(manifest, task);
      const auto x = detail::unit_rows(embeddings(), d);
      const auto pairs = iaa_pairs(prompts(), options.bank);
      const auto single = single_pair(prompts(), options.bank);
      std::vector<double> ens, one;
      for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        std::span<const double> row(x.data() + i * d, d);
        ens.push_back(zsl_iaa_ensemble(row, pairs));
        one.push_back(zsl_iaa_single(row, single));
      }
      auto j = detail::correlation_report(options.zsl_ensemble ? ens : one, mos);
      j["mode"] = options.zsl_ensemble ? "ensemble" : "single";
      j["single"] = detail::correlation_report(one, mos);
      j["ensemble"] = detail::correlation_report(ens, mos);
      report["zsl-iaa"] = j;
    } else if (task == "zsl-style") {
      for (const auto& r : manifest.records)
        if (!r.styles) throw InvalidArgument("task zsl-style: record '" + r.id + "' has no style labels");
      const auto x = detail::unit_rows(embeddings(), d);
      const auto styles = style_embeddings(prompts(), options.bank);
      std::vector<metrics::ClassScores> classes;
      std::vector<std::string> skipped;
      for (std::size_t c = 0; c < styles.size(); ++c) {
        metrics::ClassScores cs{styles[c].name, {}, {}};
        for (std::size_t i = 0; i < manifest.records.size(); ++i) {
          std::span<const double> row(x.data() + i * d, d);
          cs.scores.push_back(style_score(row, styles, styles[c].name, options.style_mode));
          const auto& labels = *manifest.records[i].styles;
          cs.positives.push_back(std::find(labels.begin(), labels.end(), static_cast<int>(c)) != labels.end() ? 1 : 0);
        }
        if (std::count(cs.positives.begin(), cs.positives.end(), 1) == 0) {
          skipped.push_back(cs.name);
        } else {
          classes.push_back(std::move(cs));
        }
      }
      if (classes.empty()) throw InvalidArgument("task zsl-style: no style class has a positive example");
      const auto map = metrics::mean_average_precision(classes);
      nlohmann::ordered_json j;
      j["mode"] = options.style_mode == StyleMode::ensemble ? "ensemble" : "single";
      j["map"] = map.mean;
      nlohmann::ordered_json per = nlohmann::ordered_json::object();
      for (const auto& [name, ap] : map.per_class) per[name] = ap;
      j["per_class_ap"] = per;
      j["classes_without_positives"] = skipped;
      report["zsl-style"] = j;
    } else if (task == "caption") {
      for (const auto& r : manifest.records)
        if (r.comments.empty()) throw InvalidArgument("task caption: record '" + r.id + "' has no reference comments");
      const auto captions = generate_captions(bundle, manifest);
      std::vector<metrics::CaptionItem> items;
      std::array<double, 4> bleu{};
      double rouge = 0.0;
      for (std::size_t i = 0; i < captions.size(); ++i) {
        const auto& refs = manifest.records[i].comments;
        for (std::size_t n = 1; n <= 4; ++n) bleu[n - 1] += metrics::bleu(captions[i], refs, n);
        rouge += metrics::rouge_l(captions[i], refs);
        items.push_back({captions[i], refs});
      }
      const double count = static_cast<double>(captions.size());
      const auto cider = metrics::cider(items);
      nlohmann::ordered_json j;
      for (std::size_t n = 1; n <= 4; ++n) j["bleu" + std::to_string(n)] = bleu[n - 1] / count;
      j["rouge_l"] = rouge / count;
      j["cider"] = cider.score;
      j["cider_degenerate"] = cider.degenerate;
      report["caption"] = j;
    }
  }
  return report;
}

}  // namespace vila
