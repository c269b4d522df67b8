#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hopespeech/corpus.hpp"
#include "hopespeech/unicode.hpp"

namespace hopespeech {

struct TokenizerError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Special token ids. Fixed layout: specials first, then the 256 byte
// tokens, then learned merges.
struct SpecialIds {
  int pad = 0;
  int unk = 1;
  int cls = 2;
  int sep = 3;
  int mask = 4;
};

inline constexpr int kNumSpecials = 5;
inline constexpr int kNumBytes = 256;
inline constexpr int kBaseVocab = kNumSpecials + kNumBytes;  // 261

/// Byte-level pair-merge subword tokenizer. Every byte is in the base
/// vocabulary, so no input can produce an unknown token.
struct TokenizerModel {
  SpecialIds specials;
  bool normalize_nfc = true;
  // Learned merges in application order; each entry is a pair of existing
  // token ids whose concatenation becomes token id kBaseVocab + index.
  std::vector<std::pair<int, int>> merges;
  // Byte strings for every non-special token, indexed by id. Specials hold
  // their surface forms, which can never arise from merges.
  std::vector<std::string> id_to_token;

  int vocab_size() const { return static_cast<int>(id_to_token.size()); }

  static TokenizerModel base() {
    TokenizerModel tok;
    tok.id_to_token = {"<pad>", "<unk>", "<cls>", "<sep>", "<mask>"};
    tok.id_to_token.reserve(kBaseVocab);
    for (int b = 0; b < kNumBytes; ++b) {
      tok.id_to_token.push_back(std::string(1, static_cast<char>(b)));
    }
    return tok;
  }

  void add_merge(int left, int right) {
    merges.emplace_back(left, right);
    id_to_token.push_back(id_to_token[left] + id_to_token[right]);
  }
};

struct TokenSequence {
  std::vector<int> ids;
  std::vector<int> attention_mask;
  bool overflow = false;
};

namespace detail {

inline std::vector<int> text_to_byte_ids(const TokenizerModel& tok,
                                         const std::string& text) {
  std::string t = utf8_sanitize(text);
  if (tok.normalize_nfc) t = nfc(t);
  std::vector<int> ids;
  ids.reserve(t.size());
  for (unsigned char b : t) ids.push_back(kNumSpecials + b);
  return ids;
}

inline void apply_one_merge(std::vector<int>& syms, int left, int right,
                            int merged) {
  std::size_t w = 0;
  for (std::size_t r = 0; r < syms.size();) {
    if (r + 1 < syms.size() && syms[r] == left && syms[r + 1] == right) {
      syms[w++] = merged;
      r += 2;
    } else {
      syms[w++] = syms[r++];
    }
  }
  syms.resize(w);
}

}  // namespace detail

/// Greedy pair-merge training over byte-level symbols. Deterministic:
/// the most frequent adjacent pair wins, ties broken by the
/// lexicographically smaller (left, right) token-string pair.
inline TokenizerModel train_tokenizer(const Corpus& corpus, int vocab_size) {
  if (corpus.docs.empty()) {
    throw TokenizerError("cannot train tokenizer on an empty corpus");
  }
  if (vocab_size <= kBaseVocab) {
    throw TokenizerError("vocab_size must exceed base vocabulary (" +
                         std::to_string(kBaseVocab) + "), got " +
                         std::to_string(vocab_size));
  }
  TokenizerModel tok = TokenizerModel::base();

  std::vector<std::vector<int>> seqs;
  seqs.reserve(corpus.docs.size());
  for (const auto& [id, text] : corpus.docs) {
    seqs.push_back(detail::text_to_byte_ids(tok, text));
  }

  while (tok.vocab_size() < vocab_size) {
    std::map<std::pair<int, int>, std::size_t> pair_counts;
    for (const auto& syms : seqs) {
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        pair_counts[{syms[i], syms[i + 1]}]++;
      }
    }
    std::pair<int, int> best{-1, -1};
    std::size_t best_count = 0;
    for (const auto& [pair, count] : pair_counts) {
      if (count > best_count) {
        best = pair;
        best_count = count;
      } else if (count == best_count && best_count > 0) {
        auto key = std::make_pair(tok.id_to_token[pair.first],
                                  tok.id_to_token[pair.second]);
        auto best_key = std::make_pair(tok.id_to_token[best.first],
                                       tok.id_to_token[best.second]);
        if (key < best_key) best = pair;
      }
    }
    if (best_count < 2) break;
    int merged = tok.vocab_size();
    tok.add_merge(best.first, best.second);
    for (auto& syms : seqs) {
      detail::apply_one_merge(syms, best.first, best.second, merged);
    }
  }
  return tok;
}

/// Segments `text` and frames it as [CLS] body [SEP] padded to `max_len`.
inline TokenSequence encode(const TokenizerModel& tok, const std::string& text,
                            int max_len) {
  if (max_len < 2) {
    throw TokenizerError("max_len must be >= 2, got " +
                         std::to_string(max_len));
  }
  std::vector<int> body = detail::text_to_byte_ids(tok, text);
  for (std::size_t m = 0; m < tok.merges.size(); ++m) {
    detail::apply_one_merge(body, tok.merges[m].first, tok.merges[m].second,
                            kBaseVocab + static_cast<int>(m));
  }

  TokenSequence seq;
  if (static_cast<int>(body.size()) + 2 > max_len) {
    body.resize(static_cast<std::size_t>(max_len) - 2);
    seq.overflow = true;
  }
  seq.ids.reserve(max_len);
  seq.ids.push_back(tok.specials.cls);
  seq.ids.insert(seq.ids.end(), body.begin(), body.end());
  seq.ids.push_back(tok.specials.sep);
  seq.attention_mask.assign(seq.ids.size(), 1);
  seq.ids.resize(max_len, tok.specials.pad);
  seq.attention_mask.resize(max_len, 0);
  return seq;
}

/// Drops specials, concatenates byte pieces, decodes as UTF-8 with
/// replacement characters for invalid splices.
inline std::string decode(const TokenizerModel& tok,
                          const std::vector<int>& ids) {
  std::string bytes;
  for (int id : ids) {
    if (id < 0 || id >= tok.vocab_size()) {
      throw TokenizerError("token id " + std::to_string(id) +
                           " out of range for vocab of size " +
                           std::to_string(tok.vocab_size()));
    }
    if (id < kNumSpecials) continue;
    bytes += tok.id_to_token[id];
  }
  return utf8_sanitize(bytes);
}

inline nlohmann::json tokenizer_to_json(const TokenizerModel& tok) {
  nlohmann::json j;
  j["version"] = 1;
  j["normalize_nfc"] = tok.normalize_nfc;
  j["specials"] = {{"pad", tok.specials.pad},
                   {"unk", tok.specials.unk},
                   {"cls", tok.specials.cls},
                   {"sep", tok.specials.sep},
                   {"mask", tok.specials.mask}};
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& [l, r] : tok.merges) merges.push_back({l, r});
  j["merges"] = std::move(merges);
  return j;
}

inline TokenizerModel tokenizer_from_json(const nlohmann::json& j) {
  if (j.at("version").get<int>() != 1) {
    throw TokenizerError("unsupported tokenizer format version " +
                         j.at("version").dump());
  }
  TokenizerModel tok = TokenizerModel::base();
  tok.normalize_nfc = j.at("normalize_nfc").get<bool>();
  const auto& sp = j.at("specials");
  tok.specials = {sp.at("pad").get<int>(), sp.at("unk").get<int>(),
                  sp.at("cls").get<int>(), sp.at("sep").get<int>(),
                  sp.at("mask").get<int>()};
  for (const auto& m : j.at("merges")) {
    int l = m.at(0).get<int>();
    int r = m.at(1).get<int>();
    if (l < kNumSpecials || r < kNumSpecials || l >= tok.vocab_size() ||
        r >= tok.vocab_size()) {
      throw TokenizerError("merge rule references token id out of range");
    }
    tok.add_merge(l, r);
  }
  return tok;
}

inline void save_tokenizer(const TokenizerModel& tok, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw TokenizerError("cannot write tokenizer file: " + path);
  out << tokenizer_to_json(tok).dump(2) << '\n';
}

inline TokenizerModel load_tokenizer(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TokenizerError("cannot open tokenizer file: " + path);
  nlohmann::json j;
  in >> j;
  return tokenizer_from_json(j);
}

}  // namespace hopespeech
