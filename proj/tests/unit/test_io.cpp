#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "megatron/dataset.hpp"
#include "megatron/errors.hpp"
#include "megatron/harness.hpp"
#include "megatron/io.hpp"
#include "oracles.hpp"

namespace megatron {
namespace {

namespace fs = std::filesystem;

class IoTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("megatron_io_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

Image grid_image(Rng& rng, int c, int h, int w) {
  Image img(c, h, w);
  for (double& v : img.raw()) v = u8_to_unit(static_cast<int>(rng.index(256)));
  return img;
}

TEST_F(IoTest, PngRoundTripIsExactOnTheByteGrid) {
  Rng rng(1);
  for (int c : {1, 3}) {
    const Image img = grid_image(rng, c, 7, 5);
    io::write_png(dir_ / "x.png", img);
    EXPECT_EQ(io::read_png(dir_ / "x.png"), img);
  }
  EXPECT_THROW(io::write_png(dir_ / "y.png", Image(2, 4, 4)), InputError);
  EXPECT_THROW(io::read_png(dir_ / "missing.png"), ArtifactError);
}

TEST_F(IoTest, PngEncodingIsDeterministic) {
  Rng rng(2);
  const Image img = grid_image(rng, 3, 16, 16);
  io::write_png(dir_ / "a.png", img);
  io::write_png(dir_ / "b.png", img);
  EXPECT_EQ(io::sha256_file(dir_ / "a.png"), io::sha256_file(dir_ / "b.png"));
}

TEST_F(IoTest, CheckpointRoundTripIsValueExact) {
  auto cfg = testing::tiny_config();
  cfg.pooling = vit::Pooling::Mean;
  const auto m = testing::random_model(cfg, 3);
  io::save_checkpoint(dir_ / "m.ckpt", m);
  const auto back = io::load_checkpoint(dir_ / "m.ckpt");
  EXPECT_EQ(back.config, m.config);
  vit::for_each_tensor_pair(m.params, back.params,
                            [](const std::string& n, const vit::Matrix& a, const vit::Matrix& b) { EXPECT_EQ(a, b) << n; });
  io::save_checkpoint(dir_ / "m2.ckpt", back);
  EXPECT_EQ(io::sha256_file(dir_ / "m.ckpt"), io::sha256_file(dir_ / "m2.ckpt"));
}

TEST_F(IoTest, CorruptCheckpointsAreArtifactErrors) {
  const auto m = testing::random_model(testing::tiny_config(), 4);
  io::save_checkpoint(dir_ / "m.ckpt", m);
  const std::string bytes = io::read_text(dir_ / "m.ckpt");
  io::write_text(dir_ / "trunc.ckpt", bytes.substr(0, bytes.size() - 9));
  io::write_text(dir_ / "trail.ckpt", bytes + "x");
  io::write_text(dir_ / "magic.ckpt", "NOTACKPT" + bytes.substr(8));
  for (const char* f : {"trunc.ckpt", "trail.ckpt", "magic.ckpt", "absent.ckpt"}) {
    try {
      io::load_checkpoint(dir_ / f);
      FAIL() << f;
    } catch (const ArtifactError& e) {
      EXPECT_NE(e.artifact().find(f), std::string::npos);
    }
  }
}

TEST(Sha256, KnownVectors) {
  EXPECT_EQ(io::sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(io::sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_F(IoTest, JsonWriteIsStable) {
  const nlohmann::json j = {{"b", 1}, {"a", {1.5, 2}}};
  io::write_json(dir_ / "j.json", j);
  EXPECT_EQ(io::read_text(dir_ / "j.json"), j.dump(2) + "\n");
  EXPECT_EQ(io::read_json(dir_ / "j.json"), j);
  io::write_text(dir_ / "bad.json", "{");
  EXPECT_THROW(io::read_json(dir_ / "bad.json"), ArtifactError);
}

TEST_F(IoTest, TriggerArtifactRoundTripIsBitExact) {
  Rng rng(5);
  trigger::Trigger t;
  t.pattern = grid_image(rng, 3, 8, 8);
  t.location = {12, 12};
  t.final_loss = 4.125;
  t.iterations_used = 2;
  t.history = {{0.5, 4.0, 4.5}, {0.25, 3.875, 4.125}};
  io::save_trigger(dir_ / "trigger", t, {{"gamma", 1.0}, {"k", 8}, {"seed", 9}});
  const auto a = io::load_trigger(dir_ / "trigger");
  EXPECT_EQ(a.trigger.pattern, t.pattern);
  EXPECT_EQ(a.trigger.location, t.location);
  EXPECT_EQ(a.trigger.final_loss, t.final_loss);
  EXPECT_EQ(a.trigger.iterations_used, 2);
  ASSERT_EQ(a.trigger.history.size(), 2u);
  EXPECT_EQ(a.trigger.history[1].combined, 4.125);
  EXPECT_EQ(a.meta["k"], 8);

  // Tampering with the pattern is detected by the sidecar hash.
  Image other = t.pattern;
  other.raw()[0] = other.raw()[0] > 0.5 ? 0.0 : 1.0;
  io::write_png(dir_ / "trigger.png", other);
  EXPECT_THROW(io::load_trigger(dir_ / "trigger"), ArtifactError);

  t.pattern.raw()[0] = 0.3;  // off the 8-bit grid
  EXPECT_THROW(io::save_trigger(dir_ / "t2", t, {}), InputError);
}

TEST_F(IoTest, DatasetDirectoryRoundTrip) {
  Rng rng(6);
  Dataset d;
  for (int i = 0; i < 6; ++i) d.push_back({grid_image(rng, 3, 8, 8), i % 2, "s" + std::to_string(i)});
  poison::PoisonRecord r;
  r.poisoned = d[3];
  r.target_origin = "s3";
  r.patched_source_id = "s0";
  r.sub_trigger_index = 1;
  r.initial_feature_dist = 3.5;
  r.final_feature_dist = 1.25;
  r.linf_used = 16.0 / 255.0;
  r.steps_used = 100;
  io::save_dataset_dir(dir_ / "ds", d, {3}, {r});
  const auto back = io::load_dataset_dir(dir_ / "ds");
  ASSERT_EQ(back.samples.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(back.samples[i].pixels, d[i].pixels);
    EXPECT_EQ(back.samples[i].label, d[i].label);
    EXPECT_EQ(back.samples[i].id, d[i].id);
  }
  ASSERT_EQ(back.positions, (std::vector<std::size_t>{3}));
  EXPECT_EQ(back.records[0].patched_source_id, "s0");
  EXPECT_EQ(back.records[0].final_feature_dist, 1.25);
  EXPECT_EQ(back.records[0].linf_used, 16.0 / 255.0);
  EXPECT_EQ(back.records[0].steps_used, 100);

  // Saving again yields a byte-identical manifest.
  const std::string first = io::read_text(dir_ / "ds" / "manifest.jsonl");
  io::save_dataset_dir(dir_ / "ds2", back.samples, back.positions, back.records);
  EXPECT_EQ(io::read_text(dir_ / "ds2" / "manifest.jsonl"), first);
  EXPECT_THROW(io::load_dataset_dir(dir_ / "nothing"), ArtifactError);
}

TEST_F(IoTest, ScoreGridAndHeatmap) {
  rollout::ImportanceScores s;
  s.scores = (vit::Vector(5) << 9, 0.5, 0.25, -1, 2).finished();
  s.grid_rows = s.grid_cols = 2;
  io::write_score_grid(dir_ / "s.txt", s);
  EXPECT_EQ(io::read_text(dir_ / "s.txt"), "0.5 0.25\n-1 2\n");
  io::write_score_heatmap(dir_ / "s.png", s, 3);
  const Image h = io::read_png(dir_ / "s.png");
  EXPECT_EQ(h.height(), 6);
  EXPECT_EQ(h.at(0, 4, 0), 0.0);
  EXPECT_EQ(h.at(0, 4, 5), 1.0);
}

// Binary batch records: one label byte then 3x32x32 channel-planar pixels.
void write_cifar_batch(const fs::path& path, const std::vector<int>& labels, int salt) {
  std::ofstream out(path, std::ios::binary);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    out.put(static_cast<char>(labels[r]));
    for (int k = 0; k < 3 * 32 * 32; ++k) out.put(static_cast<char>((k + 7 * r + salt) % 256));
  }
}

TEST_F(IoTest, CifarBinaryLoaderFiltersAndRelabels) {
  for (int b = 1; b <= 5; ++b) write_cifar_batch(dir_ / ("data_batch_" + std::to_string(b) + ".bin"), {3, 5, 1, 3}, b);
  write_cifar_batch(dir_ / "test_batch.bin", {5, 5, 3}, 0);

  const auto train = data::load_cifar10_binary(dir_, true, {5, 3}, 0);
  ASSERT_EQ(train.size(), 15u);
  EXPECT_EQ(train[0].label, 1);  // class 3 -> index 1
  EXPECT_EQ(train[1].label, 0);  // class 5 -> index 0
  EXPECT_EQ(train[0].id, "cifar-train-00000");
  EXPECT_EQ(train[1].id, "cifar-train-00001");
  EXPECT_EQ(train[2].id, "cifar-train-00003");
  EXPECT_EQ(train[0].pixels.at(0, 0, 0), u8_to_unit(1));
  EXPECT_EQ(train[0].pixels.at(2, 31, 31), u8_to_unit((3 * 1024 - 1 + 1) % 256));
  EXPECT_TRUE(on_u8_grid(train[4].pixels));

  EXPECT_EQ(data::load_cifar10_binary(dir_, true, {5, 3}, 4).size(), 4u);
  EXPECT_EQ(data::load_cifar10_binary(dir_, false, {3}, 0).size(), 1u);
  fs::remove(dir_ / "test_batch.bin");
  EXPECT_THROW(data::load_cifar10_binary(dir_, false, {3}, 0), ArtifactError);
  EXPECT_THROW(data::load_cifar10_binary(dir_, true, {}, 0), InputError);
}

TEST_F(IoTest, ImageDirDatasetFeedsTheHarness) {
  Rng rng(12);
  for (const char* split : {"train", "test"}) {
    Dataset d;
    for (int i = 0; i < 12; ++i) d.push_back({grid_image(rng, 3, 16, 16), 7 + i % 3, std::string(split) + std::to_string(i)});
    io::save_dataset_dir(dir_ / split, d);
  }
  config::ExperimentConfig cfg;
  cfg.dataset.format = "image-dir";
  cfg.dataset.path = dir_.string();
  cfg.dataset.classes = {9, 7};
  cfg.dataset.train_size = 5;
  cfg.dataset.test_size = 100;
  cfg.victim.model.image_size = 16;
  const auto s = harness::load_data(cfg);
  ASSERT_EQ(s.train.size(), 5u);
  ASSERT_EQ(s.test.size(), 8u);
  for (const auto& x : s.train) EXPECT_TRUE(x.label == 0 || x.label == 1);
  EXPECT_EQ(s.test[0].id, "test0");
  EXPECT_EQ(s.test[0].label, 1);  // class 7 -> index 1
  EXPECT_EQ(s.test[1].id, "test2");
  EXPECT_EQ(s.test[1].label, 0);

  cfg.dataset.path = (dir_ / "absent").string();
  EXPECT_THROW(harness::load_data(cfg), ArtifactError);
}

}  // namespace
}  // namespace megatron
