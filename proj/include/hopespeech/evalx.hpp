#pragma once

#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hopespeech/corpus.hpp"

namespace hopespeech {

struct EvalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfusionMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<std::size_t>> cells;  // [gold][predicted]
  std::size_t total = 0;
};

struct EvaluationReport {
  std::string schema_name;
  double accuracy = 0;
  std::vector<double> precision, recall, f1;  // per class, schema order
  std::vector<std::size_t> support;
  double macro_f1 = 0;
  double weighted_f1 = 0;
  ConfusionMatrix confusion;
};

inline ConfusionMatrix confusion(const std::vector<std::string>& preds,
                                 const std::vector<std::string>& golds,
                                 const TaskSchema& schema) {
  if (preds.size() != golds.size()) {
    throw EvalError("prediction/gold length mismatch: " +
                    std::to_string(preds.size()) + " vs " +
                    std::to_string(golds.size()));
  }
  if (preds.empty()) throw EvalError("cannot score an empty prediction list");
  const std::size_t n = schema.labels.size();
  ConfusionMatrix cm;
  cm.labels = schema.labels;
  cm.cells.assign(n, std::vector<std::size_t>(n, 0));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int g = schema.label_index(golds[i]);
    const int p = schema.label_index(preds[i]);
    if (g < 0) throw EvalError("unknown gold label '" + golds[i] + "'");
    if (p < 0) throw EvalError("unknown predicted label '" + preds[i] + "'");
    cm.cells[g][p]++;
  }
  cm.total = preds.size();
  return cm;
}

/// Per-class precision/recall/F1 with the 0-for-0/0 convention, macro F1
/// over every schema class (including zero-support ones), weighted F1 by
/// support, accuracy as trace/total.
inline EvaluationReport evaluate(const ConfusionMatrix& cm,
                                 const std::string& schema_name = "") {
  if (cm.total == 0) throw EvalError("cannot evaluate an empty matrix");
  const std::size_t n = cm.labels.size();
  EvaluationReport rep;
  rep.schema_name = schema_name;
  rep.confusion = cm;
  rep.precision.assign(n, 0.0);
  rep.recall.assign(n, 0.0);
  rep.f1.assign(n, 0.0);
  rep.support.assign(n, 0);

  std::size_t trace = 0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t tp = cm.cells[c][c];
    trace += tp;
    std::size_t predicted = 0, gold = 0;
    for (std::size_t j = 0; j < n; ++j) {
      predicted += cm.cells[j][c];
      gold += cm.cells[c][j];
    }
    rep.support[c] = gold;
    rep.precision[c] = predicted == 0 ? 0.0 : double(tp) / double(predicted);
    rep.recall[c] = gold == 0 ? 0.0 : double(tp) / double(gold);
    const double pr = rep.precision[c] + rep.recall[c];
    rep.f1[c] = pr == 0.0 ? 0.0 : 2.0 * rep.precision[c] * rep.recall[c] / pr;
  }
  rep.accuracy = double(trace) / double(cm.total);
  double macro = 0, weighted = 0;
  for (std::size_t c = 0; c < n; ++c) {
    macro += rep.f1[c];
    weighted += double(rep.support[c]) * rep.f1[c];
  }
  rep.macro_f1 = macro / double(n);
  rep.weighted_f1 = weighted / double(cm.total);
  return rep;
}

struct ComparisonRow {
  std::string name;
  double accuracy, macro_f1, weighted_f1;
  bool winner = false;
};

/// Side-by-side metric table; the macro-F1 winner is flagged, ties going
/// to the earlier system.
inline std::vector<ComparisonRow> compare(
    const std::vector<std::pair<std::string, EvaluationReport>>& systems) {
  if (systems.size() < 2) {
    throw EvalError("compare needs at least 2 systems");
  }
  for (std::size_t i = 1; i < systems.size(); ++i) {
    if (systems[i].second.schema_name != systems[0].second.schema_name) {
      throw EvalError("cannot compare reports for different schemas: '" +
                      systems[0].second.schema_name + "' vs '" +
                      systems[i].second.schema_name + "'");
    }
  }
  std::vector<ComparisonRow> rows;
  std::size_t best = 0;
  for (std::size_t i = 0; i < systems.size(); ++i) {
    const auto& rep = systems[i].second;
    rows.push_back({systems[i].first, rep.accuracy, rep.macro_f1,
                    rep.weighted_f1, false});
    if (rep.macro_f1 > systems[best].second.macro_f1) best = i;
  }
  rows[best].winner = true;
  return rows;
}

/// Aligned plain-text rendering; `decimals` is 4 for validation-style
/// tables and 2 for test-summary style.
inline std::string render_comparison(const std::vector<ComparisonRow>& rows,
                                     int decimals = 4) {
  std::size_t name_w = 6;
  for (const auto& r : rows) name_w = std::max(name_w, r.name.size() + 2);
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(name_w)) << "system"
      << std::right << std::setw(10) << "accuracy" << std::setw(10)
      << "macro_f1" << std::setw(12) << "weighted_f1" << '\n';
  out << std::fixed << std::setprecision(decimals);
  for (const auto& r : rows) {
    std::string name = r.name + (r.winner ? " *" : "");
    out << std::left << std::setw(static_cast<int>(name_w)) << name
        << std::right << std::setw(10) << r.accuracy << std::setw(10)
        << r.macro_f1 << std::setw(12) << r.weighted_f1 << '\n';
  }
  return out.str();
}

inline std::string render_comparison_tsv(const std::vector<ComparisonRow>& rows,
                                         int decimals = 4) {
  std::ostringstream out;
  out << "system\taccuracy\tmacro_f1\tweighted_f1\twinner\n";
  out << std::fixed << std::setprecision(decimals);
  for (const auto& r : rows) {
    out << r.name << '\t' << r.accuracy << '\t' << r.macro_f1 << '\t'
        << r.weighted_f1 << '\t' << (r.winner ? 1 : 0) << '\n';
  }
  return out.str();
}

inline nlohmann::json report_to_json(const EvaluationReport& rep) {
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t c = 0; c < rep.confusion.labels.size(); ++c) {
    per_class.push_back({{"label", rep.confusion.labels[c]},
                         {"precision", rep.precision[c]},
                         {"recall", rep.recall[c]},
                         {"f1", rep.f1[c]},
                         {"support", rep.support[c]}});
  }
  return {{"schema", rep.schema_name},
          {"accuracy", rep.accuracy},
          {"macro_f1", rep.macro_f1},
          {"weighted_f1", rep.weighted_f1},
          {"per_class", std::move(per_class)},
          {"confusion",
           {{"labels", rep.confusion.labels},
            {"cells", rep.confusion.cells},
            {"total", rep.confusion.total}}}};
}

inline EvaluationReport report_from_json(const nlohmann::json& j) {
  EvaluationReport rep;
  rep.schema_name = j.at("schema").get<std::string>();
  rep.accuracy = j.at("accuracy").get<double>();
  rep.macro_f1 = j.at("macro_f1").get<double>();
  rep.weighted_f1 = j.at("weighted_f1").get<double>();
  for (const auto& pc : j.at("per_class")) {
    rep.precision.push_back(pc.at("precision").get<double>());
    rep.recall.push_back(pc.at("recall").get<double>());
    rep.f1.push_back(pc.at("f1").get<double>());
    rep.support.push_back(pc.at("support").get<std::size_t>());
  }
  const auto& cj = j.at("confusion");
  rep.confusion.labels = cj.at("labels").get<std::vector<std::string>>();
  rep.confusion.cells =
      cj.at("cells").get<std::vector<std::vector<std::size_t>>>();
  rep.confusion.total = cj.at("total").get<std::size_t>();
  return rep;
}

}  // namespace hopespeech
