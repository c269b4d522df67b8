// Synthetic data generators shared by the unit and acceptance suites.
#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "hopespeech/corpus.hpp"
#include "hopespeech/rng.hpp"

namespace fixtures {

inline std::string temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() /
             ("hopespeech_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir.string();
}

/// Writes a labeled TSV whose class counts match `counts` exactly.
inline std::string write_labeled_tsv(
    const std::string& path,
    const std::vector<std::pair<std::string, std::size_t>>& counts) {
  std::ofstream out(path, std::ios::binary);
  out << "id\ttext\tlabel\n";
  std::size_t next = 0;
  for (const auto& [label, n] : counts) {
    for (std::size_t i = 0; i < n; ++i) {
      out << "r" << next << "\tcomment number " << next << " about " << label
          << "\t" << label << "\n";
      ++next;
    }
  }
  return path;
}

/// Table-style coarse-grained training counts (total 5991).
inline std::vector<std::pair<std::string, std::size_t>> coarse_counts() {
  return {{"blended_tone", 895},
          {"discouraging", 711},
          {"encouraging", 1895},
          {"uninvolved", 2490}};
}

/// Table-style fine-grained training counts (total 3185).
inline std::vector<std::pair<std::string, std::size_t>> fine_counts() {
  return {{"fading_hope", 236},
          {"hopelessness", 937},
          {"inspiring_hope", 1129},
          {"optimistic_hope", 380},
          {"realistic_hope", 503}};
}

/// Latin-script pseudo-language document.
inline std::string latin_doc(hopespeech::Rng& rng, int words = 8) {
  static const char* vocab[] = {"namma", "ooru", "super", "kathe", "bari",
                                "porlu", "madlu", "aand", "yaan", "eer"};
  std::string doc;
  for (int i = 0; i < words; ++i) {
    if (i) doc += ' ';
    doc += vocab[rng.uniform_int(10)];
  }
  return doc;
}

/// Kannada-block pseudo-language document (disjoint alphabet from Latin).
inline std::string kannada_doc(hopespeech::Rng& rng, int words = 8) {
  static const char* vocab[] = {"ನಮಸ್ಕಾರ", "ಕಥೆ",  "ಊರು",  "ಚಂದ",  "ಬಾರಿ",
                                "ಪೊರ್ಲು",  "ಮದಲು", "ಆಂಡ್", "ಯಾನ್", "ಈರ್"};
  std::string doc;
  for (int i = 0; i < words; ++i) {
    if (i) doc += ' ';
    doc += vocab[rng.uniform_int(10)];
  }
  return doc;
}

/// 4-class dataset where each class carries an unmistakable token pattern.
inline hopespeech::LabeledDataset separable_coarse_dataset(std::size_t per_class) {
  using namespace hopespeech;
  LabeledDataset ds{coarse_schema(), {}, "train"};
  static const std::map<std::string, std::string> marker = {
      {"blended_tone", "zig zag mixed feelings here"},
      {"discouraging", "all is lost give up now"},
      {"encouraging", "great work keep going strong"},
      {"uninvolved", "video posted at noon today"}};
  std::size_t next = 0;
  for (const auto& label : ds.schema.labels) {
    for (std::size_t i = 0; i < per_class; ++i) {
      ds.examples.push_back({"s" + std::to_string(next),
                             marker.at(label) + " v" + std::to_string(i),
                             label});
      ++next;
    }
  }
  return ds;
}

}  // namespace fixtures
