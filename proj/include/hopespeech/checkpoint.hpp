#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hopespeech/encoder.hpp"
#include "hopespeech/tokenizer.hpp"

namespace hopespeech {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kCheckpointFormatVersion = "1";

/// The unit persisted between pipeline stages: encoder weights, an
/// optional classification head, the tokenizer, the model config, and a
/// provenance manifest.
struct Checkpoint {
  ModelConfig config;
  EncoderWeights<float> encoder;
  std::optional<ClassifierHead<float>> head;
  std::optional<TaskSchema> head_schema;
  TokenizerModel tokenizer;
  std::map<std::string, std::string> manifest;
};

namespace detail {

inline void write_le_f32(std::ofstream& out, const float* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &data[i], 4);
    const unsigned char bytes[4] = {
        static_cast<unsigned char>(bits & 0xff),
        static_cast<unsigned char>((bits >> 8) & 0xff),
        static_cast<unsigned char>((bits >> 16) & 0xff),
        static_cast<unsigned char>((bits >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(bytes), 4);
  }
}

inline void read_le_f32(std::ifstream& in, float* data, std::size_t n,
                        const std::string& file) {
  for (std::size_t i = 0; i < n; ++i) {
    unsigned char bytes[4];
    if (!in.read(reinterpret_cast<char*>(bytes), 4)) {
      throw CheckpointError("truncated tensor data in " + file);
    }
    const std::uint32_t bits = std::uint32_t(bytes[0]) |
                               (std::uint32_t(bytes[1]) << 8) |
                               (std::uint32_t(bytes[2]) << 16) |
                               (std::uint32_t(bytes[3]) << 24);
    std::memcpy(&data[i], &bits, 4);
  }
}

template <typename W>
void save_tensors(const W& weights, const std::string& bin_path,
                  const std::string& shapes_path) {
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw CheckpointError("cannot write " + bin_path);
  std::ofstream shapes(shapes_path, std::ios::binary);
  if (!shapes) throw CheckpointError("cannot write " + shapes_path);
  for (const auto& ref : read_tensor_refs(weights)) {
    shapes << ref.name;
    for (auto d : ref.tensor->shape) shapes << ' ' << d;
    shapes << '\n';
    write_le_f32(bin, ref.tensor->data.data(), ref.tensor->data.size());
  }
}

template <typename W>
void load_tensors(W& weights, const std::string& bin_path,
                  const std::string& shapes_path) {
  std::ifstream shapes(shapes_path, std::ios::binary);
  if (!shapes) throw CheckpointError("missing checkpoint file: " + shapes_path);
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw CheckpointError("missing checkpoint file: " + bin_path);

  auto refs = tensor_refs(weights);
  std::string line;
  std::size_t idx = 0;
  while (std::getline(shapes, line)) {
    if (line.empty()) continue;
    if (idx >= refs.size()) {
      throw CheckpointError(shapes_path + ": more tensors than the config "
                            "defines");
    }
    std::istringstream ls(line);
    std::string name;
    ls >> name;
    std::vector<std::size_t> shape;
    std::size_t d;
    while (ls >> d) shape.push_back(d);
    auto& ref = refs[idx];
    if (name != ref.name) {
      throw CheckpointError(shapes_path + ": expected tensor '" + ref.name +
                            "', found '" + name + "'");
    }
    if (shape != ref.tensor->shape) {
      throw CheckpointError("shape mismatch for tensor '" + name +
                            "' between config and " + shapes_path);
    }
    read_le_f32(bin, ref.tensor->data.data(), ref.tensor->data.size(),
                bin_path);
    ++idx;
  }
  if (idx != refs.size()) {
    throw CheckpointError(shapes_path + ": missing tensors, expected " +
                          std::to_string(refs.size()) + ", found " +
                          std::to_string(idx));
  }
  char extra;
  if (bin.read(&extra, 1)) {
    throw CheckpointError(bin_path + ": trailing data after last tensor");
  }
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  nlohmann::json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["model"] = model_config_to_json(ckpt.config);
  j["manifest"] = ckpt.manifest;
  if (ckpt.head) {
    if (!ckpt.head_schema) {
      throw CheckpointError("checkpoint has a head but no head schema");
    }
    j["head_schema"] = ckpt.head_schema->name;
  }
  {
    std::ofstream out(dir + "/config.json", std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + dir + "/config.json");
    out << j.dump(2) << '\n';
  }
  save_tokenizer(ckpt.tokenizer, dir + "/tokenizer.json");
  detail::save_tensors(ckpt.encoder, dir + "/encoder.bin",
                       dir + "/encoder.shapes");
  if (ckpt.head) {
    detail::save_tensors(*ckpt.head, dir + "/head.bin", dir + "/head.shapes");
  }
}

inline Checkpoint load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string config_path = dir + "/config.json";
  std::ifstream in(config_path, std::ios::binary);
  if (!in) throw CheckpointError("missing checkpoint file: " + config_path);
  nlohmann::json j;
  in >> j;

  const std::string version = j.at("format_version").get<std::string>();
  if (version != kCheckpointFormatVersion) {
    throw CheckpointError("checkpoint format version '" + version +
                          "' not supported by this reader (supports '" +
                          kCheckpointFormatVersion + "')");
  }

  Checkpoint ckpt;
  ckpt.config = model_config_from_json(j.at("model"));
  ckpt.manifest = j.at("manifest").get<std::map<std::string, std::string>>();
  if (!fs::exists(dir + "/tokenizer.json")) {
    throw CheckpointError("missing checkpoint file: " + dir +
                          "/tokenizer.json");
  }
  ckpt.tokenizer = load_tokenizer(dir + "/tokenizer.json");
  if (ckpt.tokenizer.vocab_size() != ckpt.config.vocab_size) {
    throw CheckpointError(
        "tokenizer vocab (" + std::to_string(ckpt.tokenizer.vocab_size()) +
        ") does not match model vocab_size (" +
        std::to_string(ckpt.config.vocab_size) + ")");
  }
  ckpt.encoder = EncoderWeights<float>::shaped(ckpt.config);
  detail::load_tensors(ckpt.encoder, dir + "/encoder.bin",
                       dir + "/encoder.shapes");
  if (j.contains("head_schema")) {
    ckpt.head_schema = schema_by_name(j.at("head_schema").get<std::string>());
    auto head = ClassifierHead<float>::shaped(
        ckpt.config, static_cast<int>(ckpt.head_schema->labels.size()));
    detail::load_tensors(head, dir + "/head.bin", dir + "/head.shapes");
    ckpt.head = std::move(head);
  }
  return ckpt;
}

}  // namespace hopespeech
