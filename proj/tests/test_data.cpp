#include <gtest/gtest.h>
#include <png.h>

#include <cmath>
#include <random>
#include <set>

#include "support.hpp"
#include "vila/data.hpp"
#include "vila/metrics.hpp"
#include "vila/synthetic.hpp"

namespace vila {
namespace {

// ---- manifest ------------------------------------------------------------------

TEST(Manifest, EmptyFileGivesNoRecords) {
  test::TempDir dir("manifest");
  io::atomic_write(dir / "m.jsonl", "");
  EXPECT_TRUE(load_manifest(dir / "m.jsonl").records.empty());
}

TEST(Manifest, HandWrittenFixtureRoundTrips) {
  test::TempDir dir("manifest");
  const std::string fixture =
      "{\"id\":\"a\",\"image\":\"img/a.ppm\",\"comments\":[\"nice light\",\"too dark\"],\"mos\":6.5}\n"
      "{\"id\":\"b\",\"image\":\"img/b.png\",\"comments\":[\"good\"],\"styles\":[0,13]}\n"
      "{\"id\":\"c\",\"image\":\"c.ppm\",\"comments\":[],\"mos\":1.0,\"styles\":[]}\n";
  io::atomic_write(dir / "m.jsonl", fixture);
  const auto m = load_manifest(dir / "m.jsonl");
  ASSERT_EQ(m.records.size(), 3u);
  EXPECT_EQ(m.records[0].id, "a");
  EXPECT_EQ(m.records[0].comments, (std::vector<std::string>{"nice light", "too dark"}));
  EXPECT_EQ(m.records[0].mos, 6.5);
  EXPECT_FALSE(m.records[0].styles.has_value());
  EXPECT_EQ(m.records[1].styles, (std::vector<int>{0, 13}));
  EXPECT_FALSE(m.records[1].mos.has_value());
  EXPECT_EQ(m.image_path(m.records[2]), dir / "c.ppm");
  EXPECT_EQ(serialize_manifest(m.records), fixture);
}

TEST(Manifest, MalformedLineNamesLineNumber) {
  test::TempDir dir("manifest");
  io::atomic_write(dir / "m.jsonl", "{\"id\":\"a\",\"image\":\"a.ppm\"}\n\n{broken\n");
  try {
    load_manifest(dir / "m.jsonl");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  io::atomic_write(dir / "bad_mos.jsonl", "{\"id\":\"a\",\"image\":\"a.ppm\",\"mos\":11}\n");
  EXPECT_THROW(load_manifest(dir / "bad_mos.jsonl"), FormatError);
  io::atomic_write(dir / "bad_style.jsonl", "{\"id\":\"a\",\"image\":\"a.ppm\",\"styles\":[14]}\n");
  EXPECT_THROW(load_manifest(dir / "bad_style.jsonl"), FormatError);
}

TEST(Manifest, ValidationNamesRecord) {
  std::vector<ManifestRecord> records(2);
  records[0] = {"ok", "ok.ppm", {"x"}, 5.0, {}};
  records[1] = {"lonely", "l.ppm", {}, {}, {}};
  try {
    validate_for_pretraining(records);
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("lonely"), std::string::npos);
  }
  EXPECT_THROW(validate_for_adapter(records), InvalidArgument);
}

TEST(Manifest, MissingImageFailsOnAccessNotLoad) {
  test::TempDir dir("manifest");
  io::atomic_write(dir / "m.jsonl", "{\"id\":\"a\",\"image\":\"nowhere.ppm\",\"comments\":[\"x\"]}\n");
  const auto m = load_manifest(dir / "m.jsonl");
  ImageStore store(m);
  EXPECT_THROW(store.get(0), Error);
}

// ---- images ---------------------------------------------------------------------

Image ramp(std::size_t size, std::size_t channels) {
  Image img(size, size, channels);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      for (std::size_t c = 0; c < channels; ++c) img.at(x, y, c) = static_cast<std::uint8_t>(x + 50 * c + 3 * y);
  return img;
}

TEST(Images, PnmAndPngRoundTrip) {
  test::TempDir dir("images");
  const Image img = ramp(6, 3);
  write_image(img, dir / "r.ppm");
  EXPECT_EQ(read_image(dir / "r.ppm").pixels, img.pixels);

  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = 6;
  png.height = 6;
  png.format = PNG_FORMAT_RGB;
  ASSERT_TRUE(png_image_write_to_file(&png, (dir / "r.png").string().c_str(), 0, img.pixels.data(), 0, nullptr));
  const Image back = read_image(dir / "r.png");
  EXPECT_EQ(back.channels, 3u);
  EXPECT_EQ(back.pixels, img.pixels);

  io::atomic_write(dir / "bad.ppm", "P6\n6 6\n255\nxx");
  EXPECT_THROW(read_image(dir / "bad.ppm"), FormatError);
}

// ---- comment sampling --------------------------------------------------------------

TEST(Sampling, SingleCommentAlwaysReturned) {
  ManifestRecord r{"a", "a.ppm", {"only"}, {}, {}};
  std::mt19937_64 rng(1);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sample_comment(r, rng), "only");
}

TEST(Sampling, TwoCommentsWithinThreeSigma) {
  ManifestRecord r{"a", "a.ppm", {"first", "second"}, {}, {}};
  std::mt19937_64 rng(2);
  const int n = 10000;
  int first = 0;
  for (int i = 0; i < n; ++i) first += sample_comment(r, rng) == "first";
  const double sigma = std::sqrt(n * 0.25);
  EXPECT_LT(std::abs(first - n / 2), 3 * sigma);
}

TEST(Sampling, FixedModeIgnoresRng) {
  ManifestRecord r{"a", "a.ppm", {"first", "second", "third"}, {}, {}};
  for (std::uint64_t s = 0; s < 50; ++s) {
    std::mt19937_64 rng(s);
    EXPECT_EQ(sample_comment(r, rng, CommentSampling::fixed), "first");
  }
  ManifestRecord empty{"e", "e.ppm", {}, {}, {}};
  std::mt19937_64 rng(0);
  EXPECT_THROW(sample_comment(empty, rng), InvalidArgument);
}

TEST(Sampling, EpochsCoverEveryComment) {
  // With c = 3 and E = 40 each comment is missed with probability (2/3)^40 < 1e-7.
  std::vector<ManifestRecord> records;
  for (int i = 0; i < 20; ++i) records.push_back({"r" + std::to_string(i), "x.ppm", {"a", "b", "c"}, {}, {}});
  std::vector<std::set<std::string>> seen(records.size());
  for (std::uint64_t epoch = 0; epoch < 40; ++epoch)
    for (std::size_t i = 0; i < records.size(); ++i) {
      auto rng = derived_rng(7, epoch, i, 1);
      seen[i].insert(sample_comment(records[i], rng));
    }
  for (const auto& s : seen) EXPECT_EQ(s.size(), 3u);
}

// ---- augmentation -------------------------------------------------------------------

TEST(Augment, DisabledIsCenterCrop) {
  AugmentationConfig cfg{10, 6, true, false};
  const Image img = ramp(10, 3);
  std::mt19937_64 a(1), b(99);
  const Image x = augment(img, cfg, a), y = augment(img, cfg, b);
  EXPECT_EQ(x.pixels, y.pixels);
  EXPECT_EQ(x.pixels, crop(img, 2, 2, 6).pixels);
}

TEST(Augment, FullSizeCropIsIdentityOrFlip) {
  AugmentationConfig cfg{8, 8, true, true};
  const Image img = ramp(8, 1);
  const Image flipped = flip_horizontal(img);
  bool saw_identity = false, saw_flip = false;
  for (std::uint64_t s = 0; s < 40; ++s) {
    std::mt19937_64 rng(s);
    const Image out = augment(img, cfg, rng);
    saw_identity |= out.pixels == img.pixels;
    saw_flip |= out.pixels == flipped.pixels;
    EXPECT_TRUE(out.pixels == img.pixels || out.pixels == flipped.pixels);
  }
  EXPECT_TRUE(saw_identity);
  EXPECT_TRUE(saw_flip);
}

TEST(Augment, SeededOffsetMatchesRngTrace) {
  AugmentationConfig cfg{12, 5, false, true};
  const Image img = ramp(12, 1);
  for (std::uint64_t s = 0; s < 20; ++s) {
    std::mt19937_64 rng(s), trace(s);
    std::uniform_int_distribution<std::size_t> offset(0, 7);
    const std::size_t x0 = offset(trace), y0 = offset(trace);
    const Image out = augment(img, cfg, rng);
    // On the ramp, pixel (0, 0) encodes its source coordinates.
    EXPECT_EQ(out.at(0, 0, 0), img.at(x0, y0, 0));
    EXPECT_EQ(out.pixels, crop(img, x0, y0, 5).pixels);
  }
}

TEST(Augment, OutputAlwaysCropSizeAndMismatchRejected) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    const std::size_t src = test::random_size(rng, 1, 20), c = test::random_size(rng, 1, src);
    AugmentationConfig cfg{src, c, t % 2 == 0, t % 3 != 0};
    const Image out = augment(ramp(src, 3), cfg, rng);
    EXPECT_EQ(out.width, c);
    EXPECT_EQ(out.height, c);
    EXPECT_EQ(out.channels, 3u);
  }
  AugmentationConfig cfg{10, 6, true, true};
  EXPECT_THROW(augment(ramp(9, 3), cfg, rng), ShapeError);
  AugmentationConfig bad{4, 6, true, true};
  EXPECT_THROW(augment(ramp(4, 3), bad, rng), InvalidArgument);
}

// ---- batching ----------------------------------------------------------------------------

TEST(Batches, PartialLastBatchKept) {
  const auto b = make_batch_indices(5, 2, 1, 0);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].size(), 2u);
  EXPECT_EQ(b[1].size(), 2u);
  EXPECT_EQ(b[2].size(), 1u);
  std::set<std::size_t> all;
  for (const auto& batch : b) all.insert(batch.begin(), batch.end());
  EXPECT_EQ(all.size(), 5u);
}

TEST(Batches, SeedAndEpochDetermineOrder) {
  EXPECT_EQ(make_batch_indices(100, 8, 3, 4), make_batch_indices(100, 8, 3, 4));
  EXPECT_NE(make_batch_indices(100, 8, 3, 4), make_batch_indices(100, 8, 3, 5));
  EXPECT_NE(make_batch_indices(100, 8, 3, 4), make_batch_indices(100, 8, 4, 4));
  EXPECT_THROW(make_batch_indices(0, 8, 3, 4), InvalidArgument);
}

// ---- synthetic corpus ---------------------------------------------------------------------

TEST(Synthetic, ZeroNoiseMosIsMonotoneInLuminance) {
  test::TempDir dir("synth");
  SyntheticSpec spec;
  spec.count = 48;
  spec.mos_noise = 0.0;
  const auto records = generate_synthetic_corpus(spec, 5, dir.path());
  std::vector<double> lum, mos;
  for (const auto& r : records) {
    lum.push_back(mean_luminance(read_image(dir / r.image)));
    mos.push_back(*r.mos);
  }
  EXPECT_EQ(metrics::srcc(lum, mos), 1.0);
}

TEST(Synthetic, SchemaAndBrightCommentsMentionGoodLighting) {
  test::TempDir dir("synth");
  SyntheticSpec spec;
  spec.count = 64;
  const auto records = generate_synthetic_corpus(spec, 6, dir.path());
  const auto m = load_manifest(dir / "manifest.jsonl");
  ASSERT_EQ(m.records.size(), 64u);
  std::size_t bright_good = 0, bright = 0;
  for (const auto& r : m.records) {
    EXPECT_EQ(r.comments.size(), 3u);
    ASSERT_TRUE(r.mos.has_value());
    EXPECT_GE(*r.mos, 1.0);
    EXPECT_LE(*r.mos, 10.0);
    ASSERT_TRUE(r.styles.has_value());
    ASSERT_EQ(r.styles->size(), 1u);
    const Image img = read_image(m.image_path(r));
    EXPECT_EQ(img.width, 40u);
    EXPECT_EQ(img.channels, 3u);
    if (*r.mos > 7.0) {
      ++bright;
      for (const auto& c : r.comments) bright_good += c.find("good lighting") != std::string::npos;
    }
  }
  ASSERT_GT(bright, 0u);
  EXPECT_GT(bright_good, 0u);
}

TEST(Synthetic, SameSeedIsByteIdenticalOtherSeedDiffers) {
  test::TempDir a("synth_a"), b("synth_b"), c("synth_c");
  SyntheticSpec spec;
  spec.count = 64;
  generate_synthetic_corpus(spec, 11, a.path());
  generate_synthetic_corpus(spec, 11, b.path());
  generate_synthetic_corpus(spec, 12, c.path());
  const auto ma = io::read_file(a / "manifest.jsonl");
  EXPECT_EQ(ma, io::read_file(b / "manifest.jsonl"));
  EXPECT_EQ(io::read_file(a / "images/syn_00007.ppm"), io::read_file(b / "images/syn_00007.ppm"));
  EXPECT_NE(ma, io::read_file(c / "manifest.jsonl"));
  EXPECT_NE(io::read_file(a / "images/syn_00007.ppm"), io::read_file(c / "images/syn_00007.ppm"));
}

TEST(Synthetic, InvalidSpecRejected) {
  test::TempDir dir("synth");
  SyntheticSpec spec;
  spec.count = 0;
  EXPECT_THROW(generate_synthetic_corpus(spec, 1, dir.path()), InvalidArgument);
  spec.count = 4;
  spec.mos_noise = 2.0;
  EXPECT_THROW(generate_synthetic_corpus(spec, 1, dir.path()), InvalidArgument);
  spec.mos_noise = 0.1;
  spec.statistic = "edge_density";
  EXPECT_THROW(generate_synthetic_corpus(spec, 1, dir.path()), InvalidArgument);
}

// ---- assembled batches ---------------------------------------------------------------------

TEST(AssembleBatch, DeterministicAndShaped) {
  test::TempDir dir("batch");
  SyntheticSpec spec;
  spec.count = 6;
  generate_synthetic_corpus(spec, 2, dir.path());
  const auto m = load_manifest(dir / "manifest.jsonl");
  ModelConfig model;
  model.image_size = 32;
  model.patch_size = 8;
  std::vector<std::string> texts;
  for (const auto& r : m.records) texts.insert(texts.end(), r.comments.begin(), r.comments.end());
  const auto vocab = Vocabulary::build(texts, 128);
  AugmentationConfig aug;
  std::vector<std::size_t> idx{4, 1, 3};

  auto run = [&](std::uint64_t seed, bool train) {
    ImageStore store(m);
    std::mt19937_64 rng(seed);
    return assemble_batch(m, store, idx, vocab, model, aug, CommentSampling::random, rng, train);
  };
  const Batch a = run(1, true), b = run(1, true), c = run(2, true);
  EXPECT_EQ(a.size(), 3u);
  EXPECT_EQ(a.patches.size(), 3 * model.num_patches() * model.patch_dim());
  EXPECT_EQ(a.patches, b.patches);
  EXPECT_EQ(a.contrastive, b.contrastive);
  EXPECT_EQ(a.generative, b.generative);
  EXPECT_EQ(a.mos, (std::vector<double>{*m.records[4].mos, *m.records[1].mos, *m.records[3].mos}));
  EXPECT_NE(a.patches, c.patches);
  EXPECT_EQ(run(1, false).patches, run(2, false).patches);
  for (const auto& ids : a.contrastive) EXPECT_EQ(ids.back(), tokens::kCls);
  for (const auto& ids : a.generative) EXPECT_EQ(ids.front(), tokens::kBos);
}

}  // namespace
}  // namespace vila
