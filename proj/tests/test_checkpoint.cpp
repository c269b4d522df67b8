#include <filesystem>
#include <fstream>

#include <catch2/catch_amalgamated.hpp>

#include "fixtures.hpp"
#include "hopespeech/checkpoint.hpp"

using namespace hopespeech;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config(int vocab) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.max_positions = 16;
  return cfg;
}

Checkpoint make_checkpoint(std::uint64_t seed = 7, bool with_head = false) {
  Checkpoint ckpt;
  ckpt.tokenizer = TokenizerModel::base();
  ckpt.config = tiny_config(ckpt.tokenizer.vocab_size());
  ckpt.encoder = init_weights<float>(ckpt.config, seed);
  if (with_head) {
    ckpt.head_schema = coarse_schema();
    ckpt.head = init_head<float>(ckpt.config, 4, seed);
  }
  ckpt.manifest = {{"stage", "init"}, {"seed", std::to_string(seed)}};
  return ckpt;
}

bool weights_identical(const EncoderWeights<float>& a,
                       const EncoderWeights<float>& b) {
  auto ra = read_tensor_refs(a);
  auto rb = read_tensor_refs(b);
  for (std::size_t i = 0; i < ra.size(); ++i) {
    if (ra[i].tensor->shape != rb[i].tensor->shape) return false;
    if (ra[i].tensor->data != rb[i].tensor->data) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("checkpoint round trip is bit-exact") {
  auto dir = fixtures::temp_dir("ckpt_rt") + "/c1";
  auto ckpt = make_checkpoint();
  save_checkpoint(ckpt, dir);
  auto back = load_checkpoint(dir);
  CHECK(weights_identical(ckpt.encoder, back.encoder));
  CHECK(back.manifest == ckpt.manifest);
  CHECK(back.tokenizer.id_to_token == ckpt.tokenizer.id_to_token);
  CHECK_FALSE(back.head.has_value());
}

TEST_CASE("checkpoint with head round trips") {
  auto dir = fixtures::temp_dir("ckpt_head") + "/c1";
  auto ckpt = make_checkpoint(11, true);
  save_checkpoint(ckpt, dir);
  auto back = load_checkpoint(dir);
  REQUIRE(back.head.has_value());
  CHECK(back.head->w.data == ckpt.head->w.data);
  CHECK(back.head->b.data == ckpt.head->b.data);
  CHECK(back.head_schema->name == "coarse");
}

TEST_CASE("missing tokenizer file is named in the error") {
  auto dir = fixtures::temp_dir("ckpt_missing") + "/c1";
  save_checkpoint(make_checkpoint(), dir);
  fs::remove(dir + "/tokenizer.json");
  CHECK_THROWS_WITH(load_checkpoint(dir),
                    Catch::Matchers::ContainsSubstring("tokenizer.json"));
}

TEST_CASE("missing tensor file is named in the error") {
  auto dir = fixtures::temp_dir("ckpt_missing2") + "/c1";
  save_checkpoint(make_checkpoint(), dir);
  fs::remove(dir + "/encoder.bin");
  CHECK_THROWS_WITH(load_checkpoint(dir),
                    Catch::Matchers::ContainsSubstring("encoder.bin"));
}

TEST_CASE("format version mismatch reports both versions") {
  auto dir = fixtures::temp_dir("ckpt_ver") + "/c1";
  save_checkpoint(make_checkpoint(), dir);
  {
    std::ifstream in(dir + "/config.json");
    nlohmann::json j;
    in >> j;
    j["format_version"] = "999";
    std::ofstream out(dir + "/config.json");
    out << j.dump(2);
  }
  CHECK_THROWS_WITH(load_checkpoint(dir),
                    Catch::Matchers::ContainsSubstring("999") &&
                        Catch::Matchers::ContainsSubstring("1"));
}

TEST_CASE("shape mismatch between config and tensors is rejected") {
  auto dir = fixtures::temp_dir("ckpt_shape") + "/c1";
  save_checkpoint(make_checkpoint(), dir);
  {
    // Shrink d_model in the stored config; tensors no longer fit.
    std::ifstream in(dir + "/config.json");
    nlohmann::json j;
    in >> j;
    j["model"]["d_model"] = 8;
    j["model"]["n_heads"] = 2;
    std::ofstream out(dir + "/config.json");
    out << j.dump(2);
  }
  CHECK_THROWS_WITH(load_checkpoint(dir),
                    Catch::Matchers::ContainsSubstring("shape mismatch"));
}

TEST_CASE("manifest strings survive losslessly") {
  auto dir = fixtures::temp_dir("ckpt_manifest") + "/c1";
  auto ckpt = make_checkpoint();
  ckpt.manifest = {{"stage", "adapted"},
                   {"epochs", "2"},
                   {"batch_size", "16"},
                   {"learning_rate", "5e-05"},
                   {"note", "unicode ಕಥೆ / tabs\tok"}};
  save_checkpoint(ckpt, dir);
  auto back = load_checkpoint(dir);
  CHECK(back.manifest == ckpt.manifest);
}
