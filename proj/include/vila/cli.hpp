#pragma once

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "vila/evaluate.hpp"
#include "vila/synthetic.hpp"
#include "vila/trainer.hpp"

namespace vila {

namespace cli_detail {

struct Args {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  std::string adapter;
  std::string manifest;
  std::string out;
  std::string task;
  std::string prompts;
  std::size_t count = 512;
  std::size_t comments = 3;
};

inline TrainConfig config_for(const Args& a, Stage stage) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_train_config(a.config);
  if (a.config.empty()) cfg.stage = stage;
  if (cfg.stage != stage) throw InvalidArgument("config stage does not match the subcommand");
  if (a.seed) cfg.seed = *a.seed;
  return cfg;
}

inline PromptBank bank_for(const Args& a) {
  return a.prompts.empty() ? default_prompt_bank() : load_prompt_bank(a.prompts);
}

inline void emit(const Args& a, const std::string& text, std::ostream& out) {
  if (a.out.empty()) {
    out << text;
  } else {
    io::atomic_write(a.out, text);
  }
}

}  // namespace cli_detail

/// Exit status: 0 success, 1 usage error, 2 runtime failure.
inline int cli_dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using cli_detail::Args;
  Args a;
  CLI::App app{"vila: aesthetic pretraining, adapter finetuning and zero-shot scoring", "vila"};
  app.require_subcommand(1, 1);

  auto* synth = app.add_subcommand("synth", "render a synthetic corpus (manifest.jsonl + images)");
  synth->add_option("--out", a.out, "output directory")->required();
  synth->add_option("--seed", a.seed, "random seed");
  synth->add_option("--count", a.count, "number of images");
  synth->add_option("--comments", a.comments, "comments per image");

  auto* pretrain = app.add_subcommand("pretrain", "contrastive + captioning pretraining");
  pretrain->add_option("--config", a.config, "train config (JSON)");
  pretrain->add_option("--manifest", a.manifest, "training manifest")->required();
  pretrain->add_option("--out", a.out, "output checkpoint")->required();
  pretrain->add_option("--seed", a.seed, "random seed");
  pretrain->add_option("--checkpoint", a.checkpoint, "resume from this checkpoint");

  auto* adapt = app.add_subcommand("adapt", "rank-adapter finetuning on a frozen backbone");
  adapt->add_option("--config", a.config, "train config (JSON)");
  adapt->add_option("--manifest", a.manifest, "manifest with mos labels")->required();
  adapt->add_option("--checkpoint", a.checkpoint, "pretrained checkpoint")->required();
  adapt->add_option("--out", a.out, "output adapter checkpoint")->required();
  adapt->add_option("--seed", a.seed, "random seed");

  auto* zsl = app.add_subcommand("zsl", "zero-shot aesthetic and style scores per image");
  zsl->add_option("--checkpoint", a.checkpoint, "pretrained checkpoint")->required();
  zsl->add_option("--manifest", a.manifest, "images to score")->required();
  zsl->add_option("--out", a.out, "output JSON Lines (stdout if omitted)");
  zsl->add_option("--prompts", a.prompts, "prompt bank (JSON)");

  auto* caption = app.add_subcommand("caption", "greedy captions per image");
  caption->add_option("--checkpoint", a.checkpoint, "pretrained checkpoint")->required();
  caption->add_option("--manifest", a.manifest, "images to caption")->required();
  caption->add_option("--out", a.out, "output JSON Lines (stdout if omitted)");

  auto* eval = app.add_subcommand("eval", "evaluation report");
  eval->add_option("--checkpoint", a.checkpoint, "pretrained checkpoint")->required();
  eval->add_option("--manifest", a.manifest, "labelled manifest")->required();
  eval->add_option("--task", a.task, "comma list of iaa,zsl-iaa,zsl-style,caption")->required();
  eval->add_option("--adapter", a.adapter, "adapter checkpoint (for iaa)");
  eval->add_option("--out", a.out, "report path (stdout if omitted)");
  eval->add_option("--prompts", a.prompts, "prompt bank (JSON)");

  auto* exportp = app.add_subcommand("export-prompts", "cache prompt-bank text embeddings");
  exportp->add_option("--checkpoint", a.checkpoint, "pretrained checkpoint")->required();
  exportp->add_option("--out", a.out, "prompt cache path")->required();
  exportp->add_option("--prompts", a.prompts, "prompt bank (JSON)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    auto log_line = [&out](const std::string& line) { out << line << "\n"; };
    if (synth->parsed()) {
      SyntheticSpec spec;
      spec.count = a.count;
      spec.comments_per_image = a.comments;
      const auto records = generate_synthetic_corpus(spec, a.seed.value_or(0), a.out);
      out << "wrote " << records.size() << " records to " << (std::filesystem::path(a.out) / "manifest.jsonl").string()
          << "\n";
    } else if (pretrain->parsed()) {
      const Manifest manifest = load_manifest(a.manifest);
      TrainConfig cfg = cli_detail::config_for(a, Stage::pretrain);
      PretrainState state = a.checkpoint.empty() ? init_pretrain(cfg, manifest) : resume_pretrain(a.checkpoint, cfg);
      PretrainHooks hooks;
      hooks.on_log = log_line;
      hooks.on_checkpoint = [&](const PretrainState& s) { save_pretrain(s, a.out); };
      run_pretrain(state, manifest, state.config.stop_at_step.value_or(state.config.steps), hooks);
      save_pretrain(state, a.out);
      out << "saved checkpoint " << a.out << " at step " << state.step << "\n";
    } else if (adapt->parsed()) {
      const Manifest manifest = load_manifest(a.manifest);
      TrainConfig cfg = cli_detail::config_for(a, Stage::adapt);
      const ModelBundle bundle = load_bundle(a.checkpoint);
      cfg.model = bundle.config.model;
      const auto result = adapter_finetune(cfg, manifest, bundle, default_prompt_bank().anchor, log_line);
      ckpt::save(result.adapter.to_records(), a.out);
      result.log.save(sidecar(a.out, ".runlog.jsonl"));
      out << "tunable parameters: " << result.tunable << " of " << result.total << " ("
          << 100.0 * result.tunable_fraction << "%)\n";
    } else if (zsl->parsed()) {
      const Manifest manifest = load_manifest(a.manifest);
      const ModelBundle bundle = load_bundle(a.checkpoint);
      const auto bank = cli_detail::bank_for(a);
      const auto cache = build_prompt_cache(bundle.model, bundle.vocab, bank, "");
      const auto pairs = iaa_pairs(cache, bank);
      const auto single = single_pair(cache, bank);
      const auto styles = style_embeddings(cache, bank);
      const std::size_t d = bundle.model.config().dim;
      const auto x = detail::unit_rows(image_embeddings(bundle.model, manifest, bundle.config.augmentation), d);
      std::string text;
      for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        std::span<const double> row(x.data() + i * d, d);
        nlohmann::ordered_json j;
        j["id"] = manifest.records[i].id;
        j["zsl_iaa"] = zsl_iaa_ensemble(row, pairs);
        j["zsl_iaa_single"] = zsl_iaa_single(row, single);
        nlohmann::ordered_json st = nlohmann::ordered_json::object();
        for (const auto& [name, s] : zsl_style_scores(row, styles, StyleMode::ensemble)) st[name] = s;
        j["styles"] = st;
        text += j.dump() + "\n";
      }
      cli_detail::emit(a, text, out);
    } else if (caption->parsed()) {
      const Manifest manifest = load_manifest(a.manifest);
      const ModelBundle bundle = load_bundle(a.checkpoint);
      const auto captions = generate_captions(bundle, manifest);
      std::string text;
      for (std::size_t i = 0; i < captions.size(); ++i) {
        nlohmann::ordered_json j;
        j["id"] = manifest.records[i].id;
        j["caption"] = captions[i];
        text += j.dump() + "\n";
      }
      cli_detail::emit(a, text, out);
    } else if (eval->parsed()) {
      EvalOptions options;
      options.tasks = parse_tasks(a.task);
      options.bank = cli_detail::bank_for(a);
      const Manifest manifest = load_manifest(a.manifest);
      const ModelBundle bundle = load_bundle(a.checkpoint);
      std::optional<AdapterState<double>> adapter;
      if (!a.adapter.empty()) adapter = AdapterState<double>::from_records(ckpt::load(a.adapter));
      const auto report = evaluate(bundle, adapter ? &*adapter : nullptr, manifest, options);
      cli_detail::emit(a, report.dump(2) + "\n", out);
    } else if (exportp->parsed()) {
      const ModelBundle bundle = load_bundle(a.checkpoint);
      const auto bank = cli_detail::bank_for(a);
      build_prompt_cache(bundle.model, bundle.vocab, bank, checkpoint_hash(a.checkpoint)).save(a.out);
      out << "cached " << bank.all_texts().size() << " prompt embeddings in " << a.out << "\n";
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace vila
