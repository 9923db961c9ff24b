#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <random>
#include <sstream>

#include "support.hpp"
#include "vila/cli.hpp"

namespace vila {
namespace {

TrainConfig tiny_config(std::size_t steps) {
  TrainConfig cfg;
  cfg.model.image_size = 8;
  cfg.model.patch_size = 4;
  cfg.model.dim = 8;
  cfg.model.heads = 2;
  cfg.model.encoder_layers = 1;
  cfg.model.unimodal_layers = 1;
  cfg.model.multimodal_layers = 1;
  cfg.model.mlp_dim = 16;
  cfg.model.generative_pool_queries = 2;
  cfg.model.max_text_length = 12;
  cfg.augmentation = {10, 8, true, true};
  cfg.steps = steps;
  cfg.batch_size = 4;
  cfg.learning_rate = 3e-3;
  cfg.max_vocab = 64;
  cfg.seed = 17;
  return cfg;
}

/// A small synthetic corpus with 10×10 images, generated once per test binary.
class Corpus : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new test::TempDir("trainer_corpus");
    SyntheticSpec spec;
    spec.count = 24;
    spec.image_size = 10;
    generate_synthetic_corpus(spec, 3, dir_->path());
    manifest_ = new Manifest(load_manifest(*dir_ / "manifest.jsonl"));
  }
  static void TearDownTestSuite() {
    delete manifest_;
    delete dir_;
  }
  static const Manifest& manifest() { return *manifest_; }
  static std::filesystem::path corpus_dir() { return dir_->path(); }

  static ModelBundle pretrained(std::size_t steps) {
    auto s = init_pretrain(tiny_config(steps), manifest());
    run_pretrain(s, manifest(), steps);
    return {s.config, s.vocab, std::move(s.model)};
  }

 private:
  static inline test::TempDir* dir_ = nullptr;
  static inline Manifest* manifest_ = nullptr;
};

std::vector<nlohmann::json> parse_log(const RunLog& log) {
  std::vector<nlohmann::json> out;
  for (const auto& l : log.lines()) out.push_back(nlohmann::json::parse(l));
  return out;
}

// ---- schedule -----------------------------------------------------------------------

TEST(Schedule, LinearDecayToZero) {
  for (std::size_t s = 1; s <= 10; ++s) EXPECT_DOUBLE_EQ(linear_decay_lr(0.5, s, 10), 0.5 * (1.0 - s / 10.0));
  EXPECT_EQ(linear_decay_lr(0.5, 10, 10), 0.0);
  EXPECT_THROW(linear_decay_lr(0.5, 11, 10), InvalidArgument);
}

TEST(Config, JsonRoundTripAndValidation) {
  auto cfg = tiny_config(7);
  cfg.margin = 0.2;
  cfg.comment_sampling = CommentSampling::fixed;
  const auto back = nlohmann::json::parse(nlohmann::json(cfg).dump()).get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back).dump(), nlohmann::json(cfg).dump());
  EXPECT_EQ(back.alpha, 1.0);
  EXPECT_EQ(back.beta, 2.0);
  auto bad = cfg;
  bad.steps = 0;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = cfg;
  bad.learning_rate = 0;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = cfg;
  bad.augmentation.crop_size = 6;
  EXPECT_THROW(bad.validate(), InvalidArgument);
}

// ---- pretraining ---------------------------------------------------------------------

TEST_F(Corpus, ZeroStepCheckpointEqualsInit) {
  test::TempDir dir("zero");
  auto s = init_pretrain(tiny_config(10), manifest());
  run_pretrain(s, manifest(), 0);
  save_pretrain(s, dir / "c.ckpt");
  CocaModel<float> fresh(s.config.model, s.config.seed, s.config.initial_temperature);
  fresh.save(dir / "fresh.ckpt");
  EXPECT_EQ(io::read_file(dir / "c.ckpt"), io::read_file(dir / "fresh.ckpt"));
  EXPECT_TRUE(s.log.lines().empty());
}

TEST_F(Corpus, RunLogRecordsEveryStep) {
  auto s = init_pretrain(tiny_config(12), manifest());
  run_pretrain(s, manifest(), 12);
  const auto log = parse_log(s.log);
  ASSERT_EQ(log.size(), 12u);
  for (std::size_t i = 0; i < log.size(); ++i) {
    EXPECT_EQ(log[i]["step"], i + 1);
    EXPECT_DOUBLE_EQ(log[i]["lr"].get<double>(), linear_decay_lr(3e-3, i + 1, 12));
    for (const char* key : {"loss", "contrastive", "generative", "tau", "grad_norm"})
      EXPECT_TRUE(std::isfinite(log[i][key].get<double>())) << key;
    EXPECT_NEAR(log[i]["loss"].get<double>(),
                log[i]["contrastive"].get<double>() + 2.0 * log[i]["generative"].get<double>(), 1e-4);
  }
  EXPECT_NEAR(log[0]["tau"].get<double>(), 0.07, 1e-3);
}

TEST_F(Corpus, SameSeedGivesBitwiseIdenticalLogs) {
  auto a = init_pretrain(tiny_config(15), manifest());
  auto b = init_pretrain(tiny_config(15), manifest());
  run_pretrain(a, manifest(), 15);
  run_pretrain(b, manifest(), 15);
  EXPECT_EQ(a.log.text(), b.log.text());
  EXPECT_EQ(ckpt::serialize(a.model.to_records()), ckpt::serialize(b.model.to_records()));
  auto other = tiny_config(15);
  other.seed = 18;
  auto c = init_pretrain(other, manifest());
  run_pretrain(c, manifest(), 15);
  EXPECT_NE(a.log.text(), c.log.text());
}

TEST_F(Corpus, ResumeMatchesUninterruptedRun) {
  test::TempDir dir("resume");
  auto full = init_pretrain(tiny_config(100), manifest());
  run_pretrain(full, manifest(), 100);

  auto half = init_pretrain(tiny_config(100), manifest());
  run_pretrain(half, manifest(), 50);
  save_pretrain(half, dir / "half.ckpt");
  auto resumed = resume_pretrain(dir / "half.ckpt", tiny_config(100));
  EXPECT_EQ(resumed.step, 50u);
  run_pretrain(resumed, manifest(), 100);

  EXPECT_EQ(resumed.log.text(), full.log.text());
  save_pretrain(full, dir / "full.ckpt");
  save_pretrain(resumed, dir / "resumed.ckpt");
  EXPECT_EQ(io::read_file(dir / "full.ckpt"), io::read_file(dir / "resumed.ckpt"));
  EXPECT_EQ(io::read_file(dir / "full.ckpt.optim"), io::read_file(dir / "resumed.ckpt.optim"));
}

TEST_F(Corpus, NonFiniteLossAbortsWithStep) {
  auto s = init_pretrain(tiny_config(5), manifest());
  run_pretrain(s, manifest(), 2);
  auto& w = s.model.parameter("text.head.w").node()->value;
  std::fill(w.begin(), w.end(), NAN);
  try {
    run_pretrain(s, manifest(), 5);
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("generative"), std::string::npos) << msg;
  }
}

TEST_F(Corpus, TrainingReducesLoss) {
  auto s = init_pretrain(tiny_config(200), manifest());
  run_pretrain(s, manifest(), 200);
  const auto log = parse_log(s.log);
  double early = 0, late = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    early += log[i]["loss"].get<double>();
    late += log[190 + i]["loss"].get<double>();
  }
  EXPECT_LT(late, early);
}

// ---- adapter ------------------------------------------------------------------------------

TrainConfig adapt_config(std::size_t steps) {
  auto cfg = tiny_config(steps);
  cfg.stage = Stage::adapt;
  cfg.batch_size = 8;
  cfg.learning_rate = 0.01;
  return cfg;
}

TEST_F(Corpus, FreezeContractDefaultVariant) {
  const auto bundle = pretrained(5);
  const auto before = ckpt::serialize(bundle.model.to_records());
  auto cfg = adapt_config(30);
  cfg.model = bundle.config.model;
  const auto r = adapter_finetune(cfg, manifest(), bundle);
  EXPECT_EQ(ckpt::serialize(bundle.model.to_records()), before);
  EXPECT_EQ(r.updated, std::vector<std::string>{"adapter.H"});
  EXPECT_EQ(r.tunable, 64u);
  EXPECT_EQ(r.total, bundle.model.parameter_count() + 64u);
  EXPECT_DOUBLE_EQ(r.tunable_fraction, 64.0 / static_cast<double>(r.total));
  EXPECT_EQ(r.log.lines().size(), 30u);
}

TEST_F(Corpus, FreezeContractVariants) {
  const auto bundle = pretrained(5);
  auto cfg = adapt_config(20);
  cfg.model = bundle.config.model;
  cfg.use_text_anchor = false;
  auto r = adapter_finetune(cfg, manifest(), bundle);
  std::sort(r.updated.begin(), r.updated.end());
  EXPECT_EQ(r.updated, (std::vector<std::string>{"adapter.H", "adapter.learnable_anchor"}));
  EXPECT_EQ(r.tunable, 72u);

  cfg.use_text_anchor = true;
  cfg.use_residual = false;
  r = adapter_finetune(cfg, manifest(), bundle);
  EXPECT_EQ(r.updated, std::vector<std::string>{"adapter.H"});
}

TEST_F(Corpus, AdapterRunIsDeterministic) {
  const auto bundle = pretrained(5);
  auto cfg = adapt_config(25);
  cfg.model = bundle.config.model;
  const auto a = adapter_finetune(cfg, manifest(), bundle);
  const auto b = adapter_finetune(cfg, manifest(), bundle);
  EXPECT_EQ(a.log.text(), b.log.text());
  EXPECT_EQ(ckpt::serialize(a.adapter.to_records()), ckpt::serialize(b.adapter.to_records()));
}

Manifest with_mos(const Manifest& m, const std::vector<double>& mos) {
  Manifest out = m;
  for (std::size_t i = 0; i < out.records.size(); ++i) out.records[i].mos = mos[i % mos.size()];
  return out;
}

TEST_F(Corpus, AllTiedLabelsAbortAndTiedBatchesAreSkipped) {
  const auto bundle = pretrained(2);
  auto cfg = adapt_config(40);
  cfg.model = bundle.config.model;
  try {
    adapter_finetune(cfg, with_mos(manifest(), {5.0}), bundle);
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("tied"), std::string::npos);
  }
  std::vector<double> mostly_tied(manifest().records.size(), 5.0);
  mostly_tied[0] = 6.0;
  cfg.batch_size = 2;
  const auto r = adapter_finetune(cfg, with_mos(manifest(), mostly_tied), bundle);
  const auto text = r.log.text();
  EXPECT_NE(text.find("all-tied batch"), std::string::npos);
  EXPECT_NE(text.find("\"loss\""), std::string::npos);
}

TEST_F(Corpus, AdapterRequiresMos) {
  const auto bundle = pretrained(1);
  Manifest m = manifest();
  m.records[3].mos.reset();
  auto cfg = adapt_config(5);
  cfg.model = bundle.config.model;
  EXPECT_THROW(adapter_finetune(cfg, m, bundle), InvalidArgument);
}

// ---- evaluation ------------------------------------------------------------------------------

TEST_F(Corpus, EvaluateIsDeterministicAndComplete) {
  const auto bundle = pretrained(10);
  auto cfg = adapt_config(10);
  cfg.model = bundle.config.model;
  const auto adapter = adapter_finetune(cfg, manifest(), bundle).adapter;
  EvalOptions options;
  options.tasks = parse_tasks("caption,iaa,zsl-style,zsl-iaa");
  const auto a = evaluate(bundle, &adapter, manifest(), options).dump(2);
  const auto b = evaluate(bundle, &adapter, manifest(), options).dump(2);
  EXPECT_EQ(a, b);
  const auto j = nlohmann::json::parse(a);
  for (const char* k : {"iaa", "zsl-iaa", "zsl-style", "caption"}) EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_TRUE(j["iaa"].contains("srcc"));
  EXPECT_TRUE(j["caption"].contains("cider"));
}

TEST_F(Corpus, MissingLabelsNameTheTask) {
  const auto bundle = pretrained(1);
  Manifest m = manifest();
  m.records[2].mos.reset();
  m.records[4].styles.reset();
  for (const char* task : {"zsl-iaa", "zsl-style"}) {
    EvalOptions options;
    options.tasks = {task};
    try {
      evaluate(bundle, nullptr, m, options);
      FAIL() << task;
    } catch (const InvalidArgument& e) {
      EXPECT_NE(std::string(e.what()).find(task), std::string::npos) << e.what();
    }
  }
  EvalOptions iaa;
  iaa.tasks = {"iaa"};
  EXPECT_THROW(evaluate(bundle, nullptr, manifest(), iaa), InvalidArgument);
  EXPECT_THROW(parse_tasks("iaa,bogus"), InvalidArgument);
}

TEST(EvaluateSanity, ShuffledLabelsGiveNearZeroSrcc) {
  std::mt19937_64 rng(2024);
  const auto pred = test::random_values(200, rng, 1, 10);
  std::vector<double> labels = pred;
  std::shuffle(labels.begin(), labels.end(), rng);
  EXPECT_LT(std::abs(metrics::srcc(pred, labels)), 0.2);
}

// ---- CLI --------------------------------------------------------------------------------------

int dispatch(std::vector<std::string> args, std::string* err_text = nullptr) {
  std::vector<const char*> argv{"vila"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  if (err_text) *err_text = err.str();
  return code;
}

TEST(Cli, UsageErrorsExitOne) {
  std::string err;
  EXPECT_EQ(dispatch({}, &err), 1);
  EXPECT_EQ(dispatch({"frobnicate"}, &err), 1);
  EXPECT_EQ(dispatch({"pretrain", "--out", "x.ckpt"}, &err), 1);
  EXPECT_NE(err.find("--manifest"), std::string::npos);
  EXPECT_NE(err.find("Usage"), std::string::npos);
  EXPECT_EQ(dispatch({"eval", "--checkpoint", "c", "--manifest", "m", "--task", "iaa", "--bogus"}, &err), 1);
}

TEST(Cli, RuntimeFailureExitsTwo) {
  test::TempDir dir("cli_fail");
  std::string err;
  EXPECT_EQ(dispatch({"pretrain", "--manifest", (dir / "missing.jsonl").string(), "--out", (dir / "c").string()}, &err), 2);
  EXPECT_NE(err.find("error"), std::string::npos);
  EXPECT_EQ(dispatch({"eval", "--checkpoint", (dir / "c").string(), "--manifest", (dir / "m").string(), "--task",
                      "nonsense"},
                     &err),
            2);
}

TEST(Cli, SynthPretrainAdaptEvalSmokePath) {
  test::TempDir dir("cli_smoke");
  const auto d = [&](const char* name) { return (dir / name).string(); };
  std::string err;
  ASSERT_EQ(dispatch({"synth", "--out", d("corpus"), "--seed", "7", "--count", "16"}, &err), 0) << err;

  auto pre = tiny_config(6);
  pre.augmentation = {40, 8, true, true};
  io::atomic_write(dir / "pre.json", nlohmann::json(pre).dump());
  auto ad = pre;
  ad.stage = Stage::adapt;
  ad.batch_size = 8;
  io::atomic_write(dir / "adapt.json", nlohmann::json(ad).dump());

  const std::string manifest = (dir / "corpus" / "manifest.jsonl").string();
  ASSERT_EQ(dispatch({"pretrain", "--config", d("pre.json"), "--manifest", manifest, "--out", d("m.ckpt")}, &err), 0)
      << err;
  EXPECT_TRUE(std::filesystem::exists(dir / "m.ckpt"));
  EXPECT_EQ(RunLog::load(dir / "m.ckpt.runlog.jsonl").lines().size(), 6u);
  ASSERT_EQ(dispatch({"adapt", "--config", d("adapt.json"), "--manifest", manifest, "--checkpoint", d("m.ckpt"),
                      "--out", d("a.ckpt")},
                     &err),
            0)
      << err;
  ASSERT_EQ(dispatch({"eval", "--checkpoint", d("m.ckpt"), "--adapter", d("a.ckpt"), "--manifest", manifest, "--task",
                      "iaa,zsl-iaa", "--out", d("report.json")},
                     &err),
            0)
      << err;
  EXPECT_TRUE(nlohmann::json::parse(io::read_file(dir / "report.json")).contains("iaa"));
  ASSERT_EQ(dispatch({"zsl", "--checkpoint", d("m.ckpt"), "--manifest", manifest, "--out", d("zsl.jsonl")}, &err), 0);
  EXPECT_EQ(RunLog::load(dir / "zsl.jsonl").lines().size(), 16u);
  ASSERT_EQ(dispatch({"caption", "--checkpoint", d("m.ckpt"), "--manifest", manifest, "--out", d("cap.jsonl")}, &err), 0);
  // A stage mismatch between config and subcommand is a runtime failure.
  EXPECT_EQ(dispatch({"pretrain", "--config", d("adapt.json"), "--manifest", manifest, "--out", d("x.ckpt")}, &err), 2);
}

#ifdef VILA_CLI_PATH
TEST(Cli, BinaryExitCodes) {
  auto run = [](const std::string& args) {
    const int status = std::system((std::string(VILA_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
    return WEXITSTATUS(status);
  };
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("pretrain --out /tmp/x"), 1);
  EXPECT_EQ(run("pretrain --manifest /nonexistent/m.jsonl --out /tmp/x"), 2);
  EXPECT_EQ(run("--help"), 0);
}
#endif

}  // namespace
}  // namespace vila
