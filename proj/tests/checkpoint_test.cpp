#include <gtest/gtest.h>

#include <filesystem>

#include "steerscope/checkpoint.hpp"

using namespace steerscope;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_head = 4;
  c.d_ff = 12;
  c.vocab = 24;
  c.max_seq = 16;
  return c;
}

}  // namespace

TEST(Checkpoint, ModelRoundTripIsByteIdentical) {
  Model m = Model::init(small_config(), 3);
  auto bytes = encode(model_checkpoint(m));
  Model back = model_from_checkpoint(decode(bytes));
  EXPECT_EQ(back.checksum(), m.checksum());
  EXPECT_EQ(back.config, m.config);
  EXPECT_EQ(encode(model_checkpoint(back)), bytes);
}

TEST(Checkpoint, VectorRoundTrip) {
  SteeringVector v{Tensor::vector({1.5, -2.0, 0.25}), 2, -3, -1.0, Method::PO};
  auto path = std::filesystem::temp_directory_path() / "steerscope_vec.stsc";
  save_vector(v, path);
  auto back = load_vector(path);
  EXPECT_EQ(back.values, v.values);
  EXPECT_EQ(back.layer, 2);
  EXPECT_EQ(back.position, -3);
  EXPECT_EQ(back.coefficient, -1.0);
  EXPECT_EQ(back.method, Method::PO);
  std::filesystem::remove(path);
}

TEST(Checkpoint, HeaderLayout) {
  Checkpoint ck;
  ck.kind = CheckpointKind::iestore;
  ck.metadata = "{}";
  ck.tensors.emplace_back("x", Tensor::vector({1.0}));
  auto b = encode(ck);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "STSC");
  EXPECT_EQ(b[4], kCheckpointVersion);
  EXPECT_EQ(b[8], 3);
  // magic 4 + version 4 + kind 4 + len 8 + meta 2 + count 4 + name (4+1) + rank 4 + dim 8 + payload 8 + crc 4
  EXPECT_EQ(b.size(), 55u);
}

TEST(Checkpoint, CorruptionAndVersionRejected) {
  Model m = Model::init(small_config(), 4);
  auto bytes = encode(model_checkpoint(m));
  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x01;
  EXPECT_THROW(decode(flipped), InputError);
  auto versioned = bytes;
  versioned[4] = 9;
  EXPECT_THROW(decode(versioned), InputError);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode(magic), InputError);
  std::vector<unsigned char> truncated(bytes.begin(), bytes.begin() + 20);
  EXPECT_THROW(decode(truncated), InputError);
  EXPECT_THROW(vector_from_checkpoint(decode(bytes)), InputError);
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.stsc"), IoError);
}
