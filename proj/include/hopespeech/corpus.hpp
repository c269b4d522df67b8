#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "hopespeech/unicode.hpp"

namespace hopespeech {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Label inventory for one classification task.
struct TaskSchema {
  std::string name;
  std::vector<std::string> labels;

  int label_index(const std::string& label) const {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == label) return static_cast<int>(i);
    }
    return -1;
  }
};

/// 4-way hope tone schema.
inline TaskSchema coarse_schema() {
  return {"coarse", {"blended_tone", "discouraging", "encouraging", "uninvolved"}};
}

/// 5-way hope type schema.
inline TaskSchema fine_schema() {
  return {"fine",
          {"fading_hope", "hopelessness", "inspiring_hope", "optimistic_hope",
           "realistic_hope"}};
}

inline TaskSchema schema_by_name(const std::string& name) {
  if (name == "coarse") return coarse_schema();
  if (name == "fine") return fine_schema();
  throw DataError("unknown task schema: " + name);
}

struct LabeledExample {
  std::string id;
  std::string text;
  std::string label;
};

struct LabeledDataset {
  TaskSchema schema;
  std::vector<LabeledExample> examples;
  std::string split_tag;

  std::size_t size() const { return examples.size(); }
};

struct Corpus {
  std::vector<std::pair<std::string, std::string>> docs;  // (id, text)

  std::size_t size() const { return docs.size(); }
};

struct DistributionReport {
  std::map<std::string, std::size_t> counts;
  std::size_t total = 0;
  std::map<std::string, double> fractions;
  double imbalance_ratio = 0.0;
  bool imbalance_defined = true;  // false when some class count is 0
};

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return fields;
}

inline std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

inline std::string read_file_checked(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  std::string content = buf.str();
  std::size_t bad = 0;
  if (!utf8_valid(content, &bad)) {
    throw Utf8Error("invalid UTF-8 in " + path + " at byte offset " +
                    std::to_string(bad));
  }
  return content;
}

}  // namespace detail

/// Reads a labeled TSV (`id<TAB>text<TAB>label`, header required).
/// Empty text is a data error: labeled rows feed loss computation.
inline LabeledDataset load_labeled_dataset(const std::string& path,
                                           const TaskSchema& schema,
                                           const std::string& split_tag) {
  std::string content = detail::read_file_checked(path);
  std::istringstream in(content);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty file: " + path);
  line = detail::strip_cr(line);
  if (line != "id\ttext\tlabel") {
    throw DataError(path + ": expected header 'id\\ttext\\tlabel', got '" +
                    line + "'");
  }

  LabeledDataset ds{schema, {}, split_tag};
  std::unordered_set<std::string> seen_ids;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    auto fields = detail::split_tabs(line);
    if (fields.size() != 3) {
      throw DataError(path + ":" + std::to_string(line_no) +
                      ": malformed row, expected 3 tab-separated fields, got " +
                      std::to_string(fields.size()));
    }
    const std::string& id = fields[0];
    const std::string& text = fields[1];
    const std::string& label = fields[2];
    if (id.empty()) {
      throw DataError(path + ":" + std::to_string(line_no) + ": empty id");
    }
    if (text.empty()) {
      throw DataError(path + ":" + std::to_string(line_no) +
                      ": empty text for id '" + id + "'");
    }
    if (schema.label_index(label) < 0) {
      throw DataError(path + ":" + std::to_string(line_no) + ": row '" + id +
                      "' has unknown label '" + label + "' for schema '" +
                      schema.name + "'");
    }
    if (!seen_ids.insert(id).second) {
      throw DataError(path + ":" + std::to_string(line_no) +
                      ": duplicate id '" + id + "'");
    }
    ds.examples.push_back({id, text, label});
  }
  return ds;
}

inline void save_labeled_dataset(const LabeledDataset& ds,
                                 const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write file: " + path);
  out << "id\ttext\tlabel\n";
  for (const auto& ex : ds.examples) {
    out << ex.id << '\t' << ex.text << '\t' << ex.label << '\n';
  }
}

inline DistributionReport class_distribution(const LabeledDataset& ds) {
  if (ds.examples.empty()) {
    throw DataError("class distribution undefined for an empty dataset");
  }
  DistributionReport rep;
  for (const auto& label : ds.schema.labels) rep.counts[label] = 0;
  for (const auto& ex : ds.examples) rep.counts[ex.label]++;
  rep.total = ds.examples.size();
  std::size_t min_count = rep.total, max_count = 0;
  for (const auto& [label, count] : rep.counts) {
    rep.fractions[label] =
        static_cast<double>(count) / static_cast<double>(rep.total);
    min_count = std::min(min_count, count);
    max_count = std::max(max_count, count);
  }
  if (min_count == 0) {
    rep.imbalance_defined = false;
  } else {
    rep.imbalance_ratio =
        static_cast<double>(max_count) / static_cast<double>(min_count);
  }
  return rep;
}

/// Reads an unlabeled corpus, one document per line. Blank lines are
/// skipped; ids are assigned sequentially from "0".
inline Corpus load_corpus(const std::string& path) {
  std::string content = detail::read_file_checked(path);
  std::istringstream in(content);
  Corpus corpus;
  std::string line;
  std::size_t next_id = 0;
  while (std::getline(in, line)) {
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    corpus.docs.emplace_back(std::to_string(next_id++), line);
  }
  return corpus;
}

inline void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write file: " + path);
  for (const auto& [id, text] : corpus.docs) out << text << '\n';
}

}  // namespace hopespeech
