#include <gtest/gtest.h>

#include "semgan/checkpoint.hpp"
#include "tmpdir.hpp"

using namespace semgan;

TEST(Checkpoint, RoundTripPreservesEverything) {
  semgan::testing::TempDir dir;
  auto h = nets::make_network<float>(nets::ArchConfig::detector(32, 4, 3), 7);
  h.trainable = false;
  h.provenance = {{"pretrain", "embed"}, "abc", "def"};
  checkpoint::save(dir.path() / "sub" / "t.ckpt", h, {{"rng", "42"}});
  auto l = checkpoint::load_full(dir.path() / "sub" / "t.ckpt");
  EXPECT_EQ(l.handle.arch, h.arch);
  EXPECT_FALSE(l.handle.trainable);
  EXPECT_EQ(l.handle.provenance, h.provenance);
  ASSERT_EQ(l.handle.params.size(), h.params.size());
  for (std::size_t i = 0; i < h.params.size(); ++i) EXPECT_EQ(l.handle.params[i].vec(), h.params[i].vec());
  EXPECT_EQ(checkpoint::parameter_hash(l.handle), checkpoint::parameter_hash(h));
  EXPECT_EQ(l.header.at("extra").at("rng"), "42");
  EXPECT_EQ(l.header.at("params").at(0).at("name"), "stem.weight");
}

TEST(Checkpoint, HashTracksParametersOnly) {
  auto h = nets::make_network<float>(nets::ArchConfig::generator(16, 4, 1), 3);
  const auto before = checkpoint::parameter_hash(h);
  h.trainable = false;
  h.provenance.lineage.push_back("x");
  EXPECT_EQ(checkpoint::parameter_hash(h), before);
  h.params[0][0] += 1e-6f;
  EXPECT_NE(checkpoint::parameter_hash(h), before);
}

TEST(Checkpoint, ArchitectureMismatchRejected) {
  semgan::testing::TempDir dir;
  auto h = nets::make_network<float>(nets::ArchConfig::discriminator(16, 4, 2), 1);
  checkpoint::save(dir.path() / "d.ckpt", h);
  EXPECT_NO_THROW(checkpoint::load(dir.path() / "d.ckpt", h.arch));
  EXPECT_THROW(checkpoint::load(dir.path() / "d.ckpt", nets::ArchConfig::discriminator(16, 8, 2)),
               checkpoint::CheckpointError);
}

TEST(Checkpoint, CorruptionDetected) {
  auto h = nets::make_network<float>(nets::ArchConfig::generator(16, 4, 1), 3);
  const std::string good = checkpoint::serialize(h);
  EXPECT_THROW(checkpoint::deserialize("garbage"), checkpoint::CheckpointError);
  EXPECT_THROW(checkpoint::deserialize(good.substr(0, good.size() - 4)), checkpoint::CheckpointError);
  EXPECT_THROW(checkpoint::deserialize(good + "x"), checkpoint::CheckpointError);
  std::string flipped = good;
  flipped[flipped.size() - 1] ^= 0x01;
  EXPECT_THROW(checkpoint::deserialize(flipped), checkpoint::CheckpointError);
  std::string version = good;
  version[8] = 9;
  EXPECT_THROW(checkpoint::deserialize(version), checkpoint::CheckpointError);
  semgan::testing::TempDir dir;
  EXPECT_THROW(checkpoint::load(dir.path() / "missing.ckpt"), checkpoint::CheckpointError);
}
