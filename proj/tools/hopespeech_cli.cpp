// Command-line front end for the two-stage hope-speech pipeline:
// tokenizer training, language-id filtering, masked-LM domain adaptation,
// supervised fine-tuning, evaluation, prediction, and system comparison.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hopespeech/checkpoint.hpp"
#include "hopespeech/corpus.hpp"
#include "hopespeech/encoder.hpp"
#include "hopespeech/evalx.hpp"
#include "hopespeech/langid.hpp"
#include "hopespeech/tokenizer.hpp"
#include "hopespeech/train.hpp"

namespace fs = std::filesystem;
using namespace hopespeech;

namespace {

// Pre-run validation failures exit with code 1; runtime failures with 2.
struct ValidationFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const std::string& flag) {
  if (!fs::exists(path)) {
    throw ValidationFailure(flag + ": file not found: " + path);
  }
}

void require_dir(const std::string& path, const std::string& flag) {
  if (!fs::is_directory(path)) {
    throw ValidationFailure(flag + ": directory not found: " + path);
  }
}

void log_event(const nlohmann::json& j) { std::cerr << j.dump() << "\n"; }

/// Marker-file lock around one output path; concurrent writers fail fast.
class OutputLock {
 public:
  explicit OutputLock(const std::string& target) : lock_path_(target + ".lock") {
    if (fs::exists(lock_path_)) {
      throw ValidationFailure("output '" + target +
                              "' is locked by another run (" + lock_path_ +
                              " exists)");
    }
    std::ofstream marker(lock_path_);
    marker << "locked\n";
  }
  ~OutputLock() {
    std::error_code ec;
    fs::remove(lock_path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::string lock_path_;
};

void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << content;
  }
  fs::rename(tmp, path);
}

/// Saves a checkpoint (plus the resolved run config) into `dir` via a
/// temporary directory rename, so a failed run never leaves partial state.
void save_checkpoint_atomic(const Checkpoint& ckpt, const std::string& dir,
                            const std::string& resolved_config) {
  const std::string tmp = dir + ".tmp";
  fs::remove_all(tmp);
  save_checkpoint(ckpt, tmp);
  {
    std::ofstream out(tmp + "/run_config.resolved", std::ios::binary);
    out << resolved_config;
  }
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// (id, text) rows from a header-bearing `id<TAB>text` TSV.
std::vector<std::pair<std::string, std::string>> load_unlabeled_tsv(
    const std::string& path) {
  std::string content = detail::read_file_checked(path);
  std::istringstream in(content);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty file: " + path);
  line = detail::strip_cr(line);
  if (line != "id\ttext") {
    throw DataError(path + ": expected header 'id\\ttext', got '" + line + "'");
  }
  std::vector<std::pair<std::string, std::string>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    auto fields = detail::split_tabs(line);
    if (fields.size() != 2) {
      throw DataError(path + ":" + std::to_string(line_no) +
                      ": malformed row, expected 2 tab-separated fields");
    }
    rows.emplace_back(fields[0], fields[1]);
  }
  return rows;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hope-speech detection pipeline for code-mixed text"};
  app.require_subcommand(1);
  app.set_config("--config", "", "Read options from a config file (sections "
                                 "per subcommand; flags override the file)");

  std::uint64_t seed = 42;
  app.add_option("--seed", seed, "Master seed for every random stream")
      ->capture_default_str();

  // --- tokenizer-train -----------------------------------------------------
  auto* tok_cmd = app.add_subcommand("tokenizer-train",
                                     "Train the subword tokenizer on a corpus");
  std::string tok_corpus, tok_out = "tokenizer.json";
  int tok_vocab = 4096;
  tok_cmd->add_option("--corpus", tok_corpus, "Unlabeled corpus, one doc per line")
      ->required();
  tok_cmd->add_option("--vocab-size", tok_vocab, "Target vocabulary size")
      ->capture_default_str();
  tok_cmd->add_option("--out", tok_out, "Output tokenizer file")
      ->capture_default_str();

  // --- langid train / filter -----------------------------------------------
  auto* langid_cmd = app.add_subcommand("langid", "Language identification");
  langid_cmd->require_subcommand(1);
  auto* lid_train = langid_cmd->add_subcommand("train", "Train an n-gram model");
  std::string lid_data, lid_out = "langid.json";
  int lid_nmax = 3;
  double lid_alpha = 0.5;
  lid_train->add_option("--data", lid_data,
                        "Training TSV: lang<TAB>text, no header")
      ->required();
  lid_train->add_option("--n-max", lid_nmax, "Maximum n-gram order")
      ->capture_default_str();
  lid_train->add_option("--alpha", lid_alpha, "Additive smoothing")
      ->capture_default_str();
  lid_train->add_option("--out", lid_out, "Output model file")
      ->capture_default_str();

  auto* lid_filter = langid_cmd->add_subcommand("filter",
                                                "Filter a corpus by language");
  std::string flt_model, flt_corpus, flt_target, flt_out = "filtered.txt",
              flt_report = "filter_report.json";
  double flt_threshold = 0.5;
  lid_filter->add_option("--model", flt_model, "Trained langid model")->required();
  lid_filter->add_option("--corpus", flt_corpus, "Corpus to filter")->required();
  lid_filter->add_option("--target", flt_target, "Language code to keep")
      ->required();
  lid_filter->add_option("--threshold", flt_threshold,
                         "Minimum identification confidence")
      ->capture_default_str();
  lid_filter->add_option("--out", flt_out, "Filtered corpus output")
      ->capture_default_str();
  lid_filter->add_option("--report", flt_report, "Filter report JSON")
      ->capture_default_str();

  // --- init ------------------------------------------------------------
  auto* init_cmd = app.add_subcommand(
      "init", "Create a randomly initialized baseline checkpoint");
  std::string init_tok, init_out;
  ModelConfig init_cfg;
  init_cmd->add_option("--tokenizer", init_tok, "Trained tokenizer file")
      ->required();
  init_cmd->add_option("--out", init_out, "Checkpoint directory")->required();
  init_cmd->add_option("--d-model", init_cfg.d_model)->capture_default_str();
  init_cmd->add_option("--n-layers", init_cfg.n_layers)->capture_default_str();
  init_cmd->add_option("--n-heads", init_cfg.n_heads)->capture_default_str();
  init_cmd->add_option("--d-ff", init_cfg.d_ff)->capture_default_str();
  init_cmd->add_option("--max-positions", init_cfg.max_positions)
      ->capture_default_str();
  init_cmd->add_option("--dropout", init_cfg.dropout_rate)
      ->capture_default_str();

  // --- adapt ------------------------------------------------------------
  auto* adapt_cmd = app.add_subcommand(
      "adapt", "Masked-LM domain adaptation on an unlabeled corpus");
  std::string adapt_from, adapt_corpus, adapt_out;
  TrainPlan adapt_plan = TrainPlan::adapt_defaults(0);
  adapt_cmd->add_option("--from", adapt_from, "Input checkpoint directory")
      ->required();
  adapt_cmd->add_option("--corpus", adapt_corpus, "Adaptation corpus")
      ->required();
  adapt_cmd->add_option("--out", adapt_out, "Output checkpoint directory")
      ->required();
  adapt_cmd->add_option("--epochs", adapt_plan.epochs)->capture_default_str();
  adapt_cmd->add_option("--batch-size", adapt_plan.batch_size)
      ->capture_default_str();
  adapt_cmd->add_option("--learning-rate", adapt_plan.learning_rate)
      ->capture_default_str();
  adapt_cmd->add_option("--max-len", adapt_plan.max_len)->capture_default_str();

  // --- finetune -----------------------------------------------------------
  auto* ft_cmd = app.add_subcommand(
      "finetune", "Supervised classification fine-tuning");
  std::string ft_task, ft_from, ft_train, ft_dev, ft_out;
  TrainPlan ft_plan = TrainPlan::finetune_defaults(0);
  ft_cmd->add_option("--task", ft_task, "Task schema: coarse or fine")
      ->required()
      ->check(CLI::IsMember({"coarse", "fine"}));
  ft_cmd->add_option("--from", ft_from,
                     "Checkpoint to start from (baseline or adapted)")
      ->required();
  ft_cmd->add_option("--train", ft_train, "Labeled training TSV")->required();
  ft_cmd->add_option("--dev", ft_dev, "Labeled development TSV")->required();
  ft_cmd->add_option("--out", ft_out, "Output checkpoint directory")->required();
  ft_cmd->add_option("--epochs", ft_plan.epochs)->capture_default_str();
  ft_cmd->add_option("--batch-size", ft_plan.batch_size)->capture_default_str();
  ft_cmd->add_option("--learning-rate", ft_plan.learning_rate)
      ->capture_default_str();
  ft_cmd->add_option("--max-len", ft_plan.max_len)->capture_default_str();

  // --- evaluate -----------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("evaluate",
                                      "Score a checkpoint on a labeled TSV");
  std::string eval_ckpt, eval_data, eval_out = "report.json";
  int eval_decimals = 4;
  eval_cmd->add_option("--ckpt", eval_ckpt, "Fine-tuned checkpoint directory")
      ->required();
  eval_cmd->add_option("--data", eval_data, "Labeled TSV")->required();
  eval_cmd->add_option("--out", eval_out, "Report JSON output")
      ->capture_default_str();
  eval_cmd->add_option("--decimals", eval_decimals, "Table precision (4 or 2)")
      ->capture_default_str();

  // --- predict -----------------------------------------------------------
  auto* pred_cmd = app.add_subcommand("predict",
                                      "Label an unlabeled id/text TSV");
  std::string pred_ckpt, pred_in, pred_out = "predictions.tsv";
  pred_cmd->add_option("--ckpt", pred_ckpt, "Fine-tuned checkpoint directory")
      ->required();
  pred_cmd->add_option("--input", pred_in, "Input TSV: id<TAB>text with header")
      ->required();
  pred_cmd->add_option("--out", pred_out, "Predictions TSV")
      ->capture_default_str();

  // --- compare -----------------------------------------------------------
  auto* cmp_cmd = app.add_subcommand("compare",
                                     "Compare evaluation reports by macro F1");
  std::vector<std::string> cmp_named;
  std::string cmp_out;
  int cmp_decimals = 4;
  cmp_cmd->add_option("reports", cmp_named,
                      "Report files, each as name=path or a bare path")
      ->required()
      ->expected(-2);
  cmp_cmd->add_option("--out", cmp_out, "Also write the table as TSV");
  cmp_cmd->add_option("--decimals", cmp_decimals, "Table precision (4 or 2)")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    const std::string resolved = app.config_to_str(true, true);

    if (*tok_cmd) {
      require_file(tok_corpus, "--corpus");
      OutputLock lock(tok_out);
      log_event({{"event", "start"}, {"command", "tokenizer-train"}});
      Corpus corpus = load_corpus(tok_corpus);
      TokenizerModel tok = train_tokenizer(corpus, tok_vocab);
      write_file_atomic(tok_out, tokenizer_to_json(tok).dump(2) + "\n");
      log_event({{"event", "done"},
                 {"command", "tokenizer-train"},
                 {"vocab_size", tok.vocab_size()},
                 {"merges", tok.merges.size()}});
    } else if (*lid_train) {
      require_file(lid_data, "--data");
      OutputLock lock(lid_out);
      log_event({{"event", "start"}, {"command", "langid-train"}});
      std::vector<std::pair<std::string, std::string>> docs;  // (text, lang)
      {
        std::string content = detail::read_file_checked(lid_data);
        std::istringstream in(content);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
          ++line_no;
          line = detail::strip_cr(line);
          if (line.empty()) continue;
          auto fields = detail::split_tabs(line);
          if (fields.size() != 2) {
            throw DataError(lid_data + ":" + std::to_string(line_no) +
                            ": expected lang<TAB>text");
          }
          docs.emplace_back(fields[1], fields[0]);
        }
      }
      LangIdModel model = train_langid(docs, lid_nmax, lid_alpha);
      write_file_atomic(lid_out, langid_to_json(model).dump() + "\n");
      log_event({{"event", "done"},
                 {"command", "langid-train"},
                 {"languages", model.languages}});
    } else if (*lid_filter) {
      require_file(flt_model, "--model");
      require_file(flt_corpus, "--corpus");
      OutputLock lock(flt_out);
      log_event({{"event", "start"}, {"command", "langid-filter"}});
      LangIdModel model = load_langid(flt_model);
      Corpus corpus = load_corpus(flt_corpus);
      auto [kept, report] = filter_corpus(model, corpus, flt_target,
                                          flt_threshold);
      std::ostringstream body;
      for (const auto& [id, text] : kept.docs) body << text << '\n';
      write_file_atomic(flt_out, body.str());
      nlohmann::json rj = {{"kept", report.kept},
                           {"dropped", report.dropped},
                           {"dropped_by_language", report.dropped_by_language}};
      write_file_atomic(flt_report, rj.dump(2) + "\n");
      log_event({{"event", "done"},
                 {"command", "langid-filter"},
                 {"kept", report.kept},
                 {"dropped", report.dropped}});
    } else if (*init_cmd) {
      require_file(init_tok, "--tokenizer");
      OutputLock lock(init_out);
      log_event({{"event", "start"}, {"command", "init"}});
      Checkpoint ckpt;
      ckpt.tokenizer = load_tokenizer(init_tok);
      ckpt.config = init_cfg;
      ckpt.config.vocab_size = ckpt.tokenizer.vocab_size();
      ckpt.config.validate();
      ckpt.encoder = init_weights<float>(ckpt.config, seed);
      ckpt.manifest = {{"stage", "init"}, {"seed", std::to_string(seed)}};
      save_checkpoint_atomic(ckpt, init_out, resolved);
      log_event({{"event", "done"}, {"command", "init"}, {"dir", init_out}});
    } else if (*adapt_cmd) {
      require_dir(adapt_from, "--from");
      require_file(adapt_corpus, "--corpus");
      OutputLock lock(adapt_out);
      log_event({{"event", "start"}, {"command", "adapt"}});
      Checkpoint ckpt = load_checkpoint(adapt_from);
      Corpus corpus = load_corpus(adapt_corpus);
      adapt_plan.stage = "adapt";
      adapt_plan.seed = seed;
      auto [adapted, losses] = adapt_mlm(ckpt, corpus, adapt_plan, &std::cerr);
      save_checkpoint_atomic(adapted, adapt_out, resolved);
      log_event({{"event", "done"}, {"command", "adapt"}, {"dir", adapt_out}});
    } else if (*ft_cmd) {
      require_dir(ft_from, "--from");
      require_file(ft_train, "--train");
      require_file(ft_dev, "--dev");
      OutputLock lock(ft_out);
      log_event({{"event", "start"}, {"command", "finetune"}, {"task", ft_task}});
      TaskSchema schema = schema_by_name(ft_task);
      Checkpoint ckpt = load_checkpoint(ft_from);
      LabeledDataset train_set = load_labeled_dataset(ft_train, schema, "train");
      LabeledDataset dev_set = load_labeled_dataset(ft_dev, schema, "dev");
      ft_plan.stage = "finetune";
      ft_plan.seed = seed;
      auto [tuned, reports] = finetune(ckpt, train_set, dev_set, ft_plan,
                                       &std::cerr);
      save_checkpoint_atomic(tuned, ft_out, resolved);
      log_event({{"event", "done"},
                 {"command", "finetune"},
                 {"dir", ft_out},
                 {"best_epoch", tuned.manifest.at("best_epoch")}});
    } else if (*eval_cmd) {
      require_dir(eval_ckpt, "--ckpt");
      require_file(eval_data, "--data");
      OutputLock lock(eval_out);
      log_event({{"event", "start"}, {"command", "evaluate"}});
      Checkpoint ckpt = load_checkpoint(eval_ckpt);
      if (!ckpt.head_schema) {
        throw ValidationFailure("--ckpt: checkpoint has no classification head");
      }
      LabeledDataset data =
          load_labeled_dataset(eval_data, *ckpt.head_schema, "eval");
      std::vector<std::string> texts, golds;
      for (const auto& ex : data.examples) {
        texts.push_back(ex.text);
        golds.push_back(ex.label);
      }
      auto preds = predict_labels(ckpt, texts);
      auto report = evaluate(confusion(preds, golds, data.schema),
                             data.schema.name);
      write_file_atomic(eval_out, report_to_json(report).dump(2) + "\n");
      std::ostringstream table;
      table << std::fixed << std::setprecision(eval_decimals);
      table << "accuracy " << report.accuracy << "  macro_f1 "
            << report.macro_f1 << "  weighted_f1 " << report.weighted_f1
            << "\n";
      for (std::size_t c = 0; c < data.schema.labels.size(); ++c) {
        table << "  " << data.schema.labels[c] << " P " << report.precision[c]
              << " R " << report.recall[c] << " F1 " << report.f1[c]
              << " support " << report.support[c] << "\n";
      }
      std::cout << table.str();
      log_event({{"event", "done"},
                 {"command", "evaluate"},
                 {"macro_f1", report.macro_f1}});
    } else if (*pred_cmd) {
      require_dir(pred_ckpt, "--ckpt");
      require_file(pred_in, "--input");
      OutputLock lock(pred_out);
      log_event({{"event", "start"}, {"command", "predict"}});
      Checkpoint ckpt = load_checkpoint(pred_ckpt);
      auto rows = load_unlabeled_tsv(pred_in);
      std::vector<std::string> texts;
      for (const auto& [id, text] : rows) texts.push_back(text);
      auto labels = predict_labels(ckpt, texts);
      std::ostringstream body;
      body << "id\tlabel\n";
      for (std::size_t i = 0; i < rows.size(); ++i) {
        body << rows[i].first << '\t' << labels[i] << '\n';
      }
      write_file_atomic(pred_out, body.str());
      log_event({{"event", "done"},
                 {"command", "predict"},
                 {"rows", rows.size()}});
    } else if (*cmp_cmd) {
      std::vector<std::pair<std::string, EvaluationReport>> systems;
      for (const auto& arg : cmp_named) {
        std::string name = arg, path = arg;
        const auto eq = arg.find('=');
        if (eq != std::string::npos) {
          name = arg.substr(0, eq);
          path = arg.substr(eq + 1);
        }
        require_file(path, "reports");
        nlohmann::json j = nlohmann::json::parse(read_text_file(path));
        systems.emplace_back(name, report_from_json(j));
      }
      auto rows = compare(systems);
      std::cout << render_comparison(rows, cmp_decimals);
      std::string winner;
      for (const auto& r : rows) {
        if (r.winner) winner = r.name;
      }
      std::cout << "winner: " << winner << "\n";
      if (!cmp_out.empty()) {
        write_file_atomic(cmp_out, render_comparison_tsv(rows, cmp_decimals));
      }
      log_event({{"event", "done"}, {"command", "compare"}, {"winner", winner}});
    }
  } catch (const ValidationFailure& e) {
    log_event({{"event", "error"}, {"kind", "validation"}, {"message", e.what()}});
    return 1;
  } catch (const std::exception& e) {
    log_event({{"event", "error"}, {"kind", "runtime"}, {"message", e.what()}});
    return 2;
  }
  return 0;
}
