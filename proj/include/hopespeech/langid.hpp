#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "hopespeech/corpus.hpp"
#include "hopespeech/unicode.hpp"

namespace hopespeech {

struct LangIdError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Additive-smoothed character n-gram profiles, one per language.
/// Probabilities for each (language, order) sum to 1 over the model-wide
/// n-gram vocabulary of that order plus one unseen bucket.
struct LangIdModel {
  std::vector<std::string> languages;
  int n_max = 3;
  double alpha = 0.5;
  // profiles[lang][order-1]: n-gram (UTF-8 string) -> log-probability.
  std::vector<std::vector<std::unordered_map<std::string, double>>> profiles;
  // log-probability of any unseen n-gram, per language per order.
  std::vector<std::vector<double>> unseen_logprob;

  int language_index(const std::string& code) const {
    for (std::size_t i = 0; i < languages.size(); ++i) {
      if (languages[i] == code) return static_cast<int>(i);
    }
    return -1;
  }
};

namespace detail {

inline std::vector<std::string> extract_ngrams(
    const std::vector<std::uint32_t>& cps, int n) {
  std::vector<std::string> grams;
  if (static_cast<int>(cps.size()) < n) return grams;
  grams.reserve(cps.size() - n + 1);
  for (std::size_t i = 0; i + n <= cps.size(); ++i) {
    std::string g;
    for (int k = 0; k < n; ++k) append_utf8(g, cps[i + k]);
    grams.push_back(std::move(g));
  }
  return grams;
}

}  // namespace detail

inline LangIdModel train_langid(
    const std::vector<std::pair<std::string, std::string>>& docs,  // (text, lang)
    int n_max, double alpha) {
  if (docs.empty()) throw LangIdError("cannot train on an empty document set");
  if (n_max < 1) throw LangIdError("n_max must be >= 1");
  if (alpha <= 0.0) {
    throw LangIdError("smoothing alpha must be positive (unseen n-grams "
                      "would be unscorable)");
  }

  LangIdModel model;
  model.n_max = n_max;
  model.alpha = alpha;
  for (const auto& [text, lang] : docs) {
    if (model.language_index(lang) < 0) model.languages.push_back(lang);
  }
  if (model.languages.size() < 2) {
    throw LangIdError("need at least 2 distinct languages, got " +
                      std::to_string(model.languages.size()));
  }

  const std::size_t n_langs = model.languages.size();
  // counts[lang][order-1]: n-gram -> count
  std::vector<std::vector<std::unordered_map<std::string, std::size_t>>> counts(
      n_langs, std::vector<std::unordered_map<std::string, std::size_t>>(n_max));
  std::vector<std::unordered_set<std::string>> vocab(n_max);

  for (const auto& [text, lang] : docs) {
    int li = model.language_index(lang);
    auto cps = decode_utf8_lossy(text);
    for (int n = 1; n <= n_max; ++n) {
      for (auto& g : detail::extract_ngrams(cps, n)) {
        vocab[n - 1].insert(g);
        counts[li][n - 1][g]++;
      }
    }
  }

  model.profiles.assign(n_langs, {});
  model.unseen_logprob.assign(n_langs, std::vector<double>(n_max, 0.0));
  for (std::size_t li = 0; li < n_langs; ++li) {
    model.profiles[li].resize(n_max);
    for (int n = 1; n <= n_max; ++n) {
      double total = 0;
      for (const auto& [g, c] : counts[li][n - 1]) total += c;
      const double denom =
          total + alpha * (static_cast<double>(vocab[n - 1].size()) + 1.0);
      for (const auto& g : vocab[n - 1]) {
        auto it = counts[li][n - 1].find(g);
        double c = it == counts[li][n - 1].end() ? 0.0 : double(it->second);
        model.profiles[li][n - 1][g] = std::log((c + alpha) / denom);
      }
      model.unseen_logprob[li][n - 1] = std::log(alpha / denom);
    }
  }
  return model;
}

/// Argmax language of summed n-gram log-likelihoods; confidence is the
/// softmax over per-language mean log-likelihoods.
inline std::pair<std::string, double> identify(const LangIdModel& model,
                                               const std::string& text) {
  auto cps = decode_utf8_lossy(text);
  bool has_content = false;
  for (auto cp : cps) {
    if (cp != ' ' && cp != '\t' && cp != '\n' && cp != '\r') {
      has_content = true;
      break;
    }
  }
  if (!has_content) {
    throw LangIdError("cannot identify empty or whitespace-only text");
  }

  const std::size_t n_langs = model.languages.size();
  std::vector<double> sums(n_langs, 0.0);
  std::size_t n_grams = 0;
  for (int n = 1; n <= model.n_max; ++n) {
    for (auto& g : detail::extract_ngrams(cps, n)) {
      ++n_grams;
      for (std::size_t li = 0; li < n_langs; ++li) {
        auto it = model.profiles[li][n - 1].find(g);
        sums[li] += it == model.profiles[li][n - 1].end()
                        ? model.unseen_logprob[li][n - 1]
                        : it->second;
      }
    }
  }
  if (n_grams == 0) throw LangIdError("no n-grams extracted from text");

  std::size_t best = 0;
  for (std::size_t li = 1; li < n_langs; ++li) {
    if (sums[li] > sums[best]) best = li;
  }
  // Softmax over mean log-likelihoods, max-shifted for stability.
  std::vector<double> means(n_langs);
  double max_mean = -1e300;
  for (std::size_t li = 0; li < n_langs; ++li) {
    means[li] = sums[li] / static_cast<double>(n_grams);
    max_mean = std::max(max_mean, means[li]);
  }
  double z = 0.0;
  for (auto m : means) z += std::exp(m - max_mean);
  double confidence = std::exp(means[best] - max_mean) / z;
  return {model.languages[best], confidence};
}

struct FilterReport {
  std::size_t kept = 0;
  std::size_t dropped = 0;
  std::map<std::string, std::size_t> dropped_by_language;
};

/// Keeps docs identified as `target` with confidence >= threshold;
/// preserves input order.
inline std::pair<Corpus, FilterReport> filter_corpus(const LangIdModel& model,
                                                     const Corpus& corpus,
                                                     const std::string& target,
                                                     double threshold) {
  if (model.language_index(target) < 0) {
    throw LangIdError("unknown target language: " + target);
  }
  Corpus kept;
  FilterReport report;
  for (const auto& doc : corpus.docs) {
    auto [lang, confidence] = identify(model, doc.second);
    if (lang == target && confidence >= threshold) {
      kept.docs.push_back(doc);
      report.kept++;
    } else {
      report.dropped++;
      report.dropped_by_language[lang]++;
    }
  }
  return {std::move(kept), report};
}

// ---------------------------------------------------------------------------
// Script profiling

struct ScriptBlock {
  std::string name;
  // Letter code point ranges, inclusive.
  std::vector<std::pair<std::uint32_t, std::uint32_t>> ranges;
};

/// Default blocks: Latin letters and the Kannada block (minus its digits).
inline std::vector<ScriptBlock> default_script_blocks() {
  return {
      {"Kannada", {{0x0c80, 0x0ce5}, {0x0cf0, 0x0cff}}},
      {"Latin", {{0x41, 0x5a}, {0x61, 0x7a}}},
  };
}

struct ScriptProfile {
  std::map<std::string, std::size_t> counts;
  std::size_t other_count = 0;
  std::string dominant_script = "none";
  bool mixed = false;
};

inline bool is_whitespace_cp(std::uint32_t cp) {
  return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == 0x0b ||
         cp == 0x0c || cp == 0xa0;
}

/// Buckets letter code points by script block; `mixed` means at least two
/// blocks each hold >= 10% of the letters.
inline ScriptProfile script_profile(
    const std::string& text,
    const std::vector<ScriptBlock>& blocks = default_script_blocks()) {
  ScriptProfile profile;
  std::size_t total_letters = 0;
  for (auto cp : decode_utf8_lossy(text)) {
    const ScriptBlock* hit = nullptr;
    for (const auto& block : blocks) {
      for (const auto& [lo, hi] : block.ranges) {
        if (cp >= lo && cp <= hi) {
          hit = &block;
          break;
        }
      }
      if (hit) break;
    }
    if (hit) {
      profile.counts[hit->name]++;
      ++total_letters;
    } else if (!is_whitespace_cp(cp)) {
      profile.other_count++;
    }
  }
  if (total_letters > 0) {
    // std::map iterates in name order, so ties resolve to the smaller name.
    std::size_t best = 0;
    for (const auto& [name, count] : profile.counts) {
      if (count > best) {
        best = count;
        profile.dominant_script = name;
      }
    }
    std::size_t at_least_tenth = 0;
    for (const auto& [name, count] : profile.counts) {
      if (10 * count >= total_letters) ++at_least_tenth;
    }
    profile.mixed = at_least_tenth >= 2;
  }
  return profile;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json langid_to_json(const LangIdModel& model) {
  nlohmann::json j;
  j["version"] = 1;
  j["languages"] = model.languages;
  j["n_max"] = model.n_max;
  j["alpha"] = model.alpha;
  nlohmann::json profiles = nlohmann::json::array();
  for (std::size_t li = 0; li < model.languages.size(); ++li) {
    nlohmann::json orders = nlohmann::json::array();
    for (int n = 1; n <= model.n_max; ++n) {
      nlohmann::json grams = nlohmann::json::object();
      for (const auto& [g, lp] : model.profiles[li][n - 1]) grams[g] = lp;
      orders.push_back({{"ngrams", std::move(grams)},
                        {"unseen", model.unseen_logprob[li][n - 1]}});
    }
    profiles.push_back(std::move(orders));
  }
  j["profiles"] = std::move(profiles);
  return j;
}

inline LangIdModel langid_from_json(const nlohmann::json& j) {
  LangIdModel model;
  model.languages = j.at("languages").get<std::vector<std::string>>();
  model.n_max = j.at("n_max").get<int>();
  model.alpha = j.at("alpha").get<double>();
  const auto& profiles = j.at("profiles");
  model.profiles.resize(model.languages.size());
  model.unseen_logprob.resize(model.languages.size());
  for (std::size_t li = 0; li < model.languages.size(); ++li) {
    model.profiles[li].resize(model.n_max);
    model.unseen_logprob[li].resize(model.n_max);
    for (int n = 1; n <= model.n_max; ++n) {
      const auto& order = profiles.at(li).at(n - 1);
      for (auto it = order.at("ngrams").begin(); it != order.at("ngrams").end();
           ++it) {
        model.profiles[li][n - 1][it.key()] = it.value().get<double>();
      }
      model.unseen_logprob[li][n - 1] = order.at("unseen").get<double>();
    }
  }
  return model;
}

inline void save_langid(const LangIdModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LangIdError("cannot write model file: " + path);
  out << langid_to_json(model).dump() << '\n';
}

inline LangIdModel load_langid(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LangIdError("cannot open model file: " + path);
  nlohmann::json j;
  in >> j;
  return langid_from_json(j);
}

}  // namespace hopespeech
