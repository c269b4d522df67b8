#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hopespeech/checkpoint.hpp"
#include "hopespeech/corpus.hpp"
#include "hopespeech/encoder.hpp"
#include "hopespeech/evalx.hpp"
#include "hopespeech/rng.hpp"
#include "hopespeech/tokenizer.hpp"

namespace hopespeech {

struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Dynamic masking policy: each maskable position is selected
/// independently with probability mask_rate; selected positions are
/// replaced by the mask token, a random token, or kept, per the split
/// fractions. pad/cls/sep are never selected.
struct MaskingPolicy {
  double mask_rate;
  double mask_token_frac;
  double random_token_frac;
  double keep_frac;

  explicit MaskingPolicy(double rate = 0.15, double mask_frac = 0.8,
                         double random_frac = 0.1, double keep = 0.1)
      : mask_rate(rate),
        mask_token_frac(mask_frac),
        random_token_frac(random_frac),
        keep_frac(keep) {
    if (rate <= 0.0 || rate >= 1.0) {
      throw TrainError("mask_rate must be in (0, 1), got " +
                       std::to_string(rate));
    }
    if (mask_frac < 0 || random_frac < 0 || keep < 0 ||
        std::abs(mask_frac + random_frac + keep - 1.0) > 1e-12) {
      throw TrainError("mask/random/keep fractions must sum to 1");
    }
  }
};

/// Applies MLM masking in place: rewrites batch.ids and fills
/// batch.mlm_labels (original ids at selected positions, ignore elsewhere).
/// A batch where no position gets selected is re-rolled once, then one
/// random maskable position is forced.
inline void mask_batch(Batch& batch, const MaskingPolicy& policy,
                       const SpecialIds& specials, int vocab_size, Rng& rng) {
  const std::size_t n = batch.ids.size();
  batch.mlm_labels.assign(n, kIgnoreLabel);

  std::vector<std::size_t> maskable;
  for (std::size_t i = 0; i < n; ++i) {
    const int id = batch.ids[i];
    if (batch.attn[i] == 1 && id != specials.pad && id != specials.cls &&
        id != specials.sep) {
      maskable.push_back(i);
    }
  }
  if (maskable.empty()) {
    throw TrainError("batch has no maskable positions");
  }

  auto apply_action = [&](std::size_t i) {
    batch.mlm_labels[i] = batch.ids[i];
    const double r = rng.uniform();
    if (r < policy.mask_token_frac) {
      batch.ids[i] = specials.mask;
    } else if (r < policy.mask_token_frac + policy.random_token_frac) {
      batch.ids[i] = kNumSpecials +
                     static_cast<int>(rng.uniform_int(
                         static_cast<std::uint64_t>(vocab_size - kNumSpecials)));
    }
    // else keep the original id; the label still marks it as scored.
  };

  for (int attempt = 0; attempt < 2; ++attempt) {
    std::vector<std::size_t> selected;
    for (std::size_t i : maskable) {
      if (rng.uniform() < policy.mask_rate) selected.push_back(i);
    }
    if (!selected.empty()) {
      for (std::size_t i : selected) apply_action(i);
      return;
    }
  }
  apply_action(maskable[rng.uniform_int(maskable.size())]);
}

struct OptimizerHyper {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled-weight-decay adaptive-moment update on one flat tensor.
/// `t_new` is the post-increment step count. Decay is applied directly to
/// the parameters, never through the gradient, and only when
/// `apply_decay` is set (layer norms and biases are excluded).
template <typename T>
void adamw_update(T* theta, const T* grad, T* m, T* v, std::size_t n,
                  long t_new, const OptimizerHyper& hyper, bool apply_decay,
                  const std::string& tensor_name) {
  const T b1 = static_cast<T>(hyper.beta1);
  const T b2 = static_cast<T>(hyper.beta2);
  const T lr = static_cast<T>(hyper.learning_rate);
  const T eps = static_cast<T>(hyper.epsilon);
  const T decay = apply_decay ? static_cast<T>(hyper.weight_decay) : T(0);
  const T bc1 = T(1) - static_cast<T>(std::pow(hyper.beta1, t_new));
  const T bc2 = T(1) - static_cast<T>(std::pow(hyper.beta2, t_new));
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(static_cast<double>(grad[i]))) {
      throw TrainError("non-finite gradient in tensor '" + tensor_name + "'");
    }
    m[i] = b1 * m[i] + (T(1) - b1) * grad[i];
    v[i] = b2 * v[i] + (T(1) - b2) * grad[i] * grad[i];
    const T m_hat = m[i] / bc1;
    const T v_hat = v[i] / bc2;
    theta[i] -= lr * (m_hat / (std::sqrt(v_hat) + eps) + decay * theta[i]);
  }
}

struct OptimizerState {
  long t = 0;
  EncoderWeights<float> m, v;
  std::optional<ClassifierHead<float>> head_m, head_v;

  static OptimizerState shaped(const ModelConfig& cfg, int head_labels = 0) {
    OptimizerState s;
    s.m = EncoderWeights<float>::shaped(cfg);
    s.v = EncoderWeights<float>::shaped(cfg);
    if (head_labels > 0) {
      s.head_m = ClassifierHead<float>::shaped(cfg, head_labels);
      s.head_v = ClassifierHead<float>::shaped(cfg, head_labels);
    }
    return s;
  }
};

inline void adamw_step(EncoderWeights<float>& params,
                       const EncoderWeights<float>& grads,
                       OptimizerState& state, const OptimizerHyper& hyper,
                       ClassifierHead<float>* head = nullptr,
                       const ClassifierHead<float>* head_grads = nullptr) {
  state.t += 1;
  auto p_refs = tensor_refs(params);
  auto g_refs = read_tensor_refs(grads);
  auto m_refs = tensor_refs(state.m);
  auto v_refs = tensor_refs(state.v);
  for (std::size_t i = 0; i < p_refs.size(); ++i) {
    adamw_update(p_refs[i].tensor->data.data(), g_refs[i].tensor->data.data(),
                 m_refs[i].tensor->data.data(), v_refs[i].tensor->data.data(),
                 p_refs[i].tensor->data.size(), state.t, hyper,
                 p_refs[i].kind == ParamKind::Matrix, p_refs[i].name);
  }
  if (head != nullptr) {
    if (head_grads == nullptr || !state.head_m || !state.head_v) {
      throw TrainError("optimizer state missing head moments");
    }
    auto hp = tensor_refs(*head);
    auto hg = read_tensor_refs(*head_grads);
    auto hm = tensor_refs(*state.head_m);
    auto hv = tensor_refs(*state.head_v);
    for (std::size_t i = 0; i < hp.size(); ++i) {
      adamw_update(hp[i].tensor->data.data(), hg[i].tensor->data.data(),
                   hm[i].tensor->data.data(), hv[i].tensor->data.data(),
                   hp[i].tensor->data.size(), state.t, hyper,
                   hp[i].kind == ParamKind::Matrix, hp[i].name);
    }
  }
}

struct TrainPlan {
  std::string stage;  // "adapt" | "finetune"
  int epochs = 0;
  int batch_size = 16;
  double learning_rate = 0.0;
  std::uint64_t seed = 0;
  bool shuffle = true;
  int max_len = 128;

  static TrainPlan adapt_defaults(std::uint64_t seed) {
    return {"adapt", 2, 16, 5e-5, seed, true, 128};
  }
  static TrainPlan finetune_defaults(std::uint64_t seed) {
    return {"finetune", 4, 16, 2e-5, seed, true, 128};
  }

  void validate() const {
    if (stage != "adapt" && stage != "finetune") {
      throw TrainError("unknown training stage: " + stage);
    }
    if (epochs < 0) throw TrainError("epochs must be >= 0");
    if (batch_size < 1) throw TrainError("batch_size must be >= 1");
    if (learning_rate <= 0.0) throw TrainError("learning_rate must be > 0");
  }
};

struct EpochLoss {
  int epoch = 0;  // 1-based
  double mean_loss = 0;
};

namespace detail {

inline std::string format_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", x);
  return buf;
}

inline std::vector<std::size_t> epoch_order(std::size_t n, bool shuffle,
                                            Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle) {
    for (std::size_t i = n; i > 1; --i) {
      std::swap(order[i - 1], order[rng.uniform_int(i)]);
    }
  }
  return order;
}

inline Batch gather_batch(const std::vector<TokenSequence>& seqs,
                          const std::vector<std::size_t>& order,
                          std::size_t begin, std::size_t end, int seq_len) {
  Batch batch;
  batch.batch = static_cast<int>(end - begin);
  batch.seq_len = seq_len;
  batch.ids.reserve(batch.batch * seq_len);
  batch.attn.reserve(batch.batch * seq_len);
  for (std::size_t i = begin; i < end; ++i) {
    const auto& seq = seqs[order[i]];
    batch.ids.insert(batch.ids.end(), seq.ids.begin(), seq.ids.end());
    batch.attn.insert(batch.attn.end(), seq.attention_mask.begin(),
                      seq.attention_mask.end());
  }
  return batch;
}

inline void log_record(std::ostream* log, const nlohmann::json& j) {
  if (log) *log << j.dump() << '\n';
}

}  // namespace detail

/// Continues masked-language-model training on an unlabeled corpus.
/// Returns a new checkpoint with stage "adapted"; the input checkpoint is
/// not modified.
inline std::pair<Checkpoint, std::vector<EpochLoss>> adapt_mlm(
    const Checkpoint& ckpt, const Corpus& corpus, const TrainPlan& plan,
    std::ostream* log = nullptr) {
  plan.validate();
  if (plan.stage != "adapt") {
    throw TrainError("adapt_mlm requires an 'adapt' plan, got '" + plan.stage +
                     "'");
  }
  if (corpus.docs.empty()) {
    throw TrainError("cannot adapt on an empty corpus");
  }

  const int max_len = std::min(plan.max_len, ckpt.config.max_positions);
  std::vector<TokenSequence> seqs;
  seqs.reserve(corpus.docs.size());
  for (const auto& [id, text] : corpus.docs) {
    seqs.push_back(encode(ckpt.tokenizer, text, max_len));
  }

  Checkpoint out = ckpt;
  OptimizerState opt = OptimizerState::shaped(out.config);
  OptimizerHyper hyper;
  hyper.learning_rate = plan.learning_rate;
  Rng shuffle_rng = stream_rng(plan.seed, "shuffle");
  Rng mask_rng = stream_rng(plan.seed, "mask");
  Rng dropout_rng = stream_rng(plan.seed, "dropout");
  MaskingPolicy policy;
  const bool training = out.config.dropout_rate > 0.0;

  std::vector<EpochLoss> losses;
  for (int epoch = 1; epoch <= plan.epochs; ++epoch) {
    auto order = detail::epoch_order(seqs.size(), plan.shuffle, shuffle_rng);
    double loss_sum = 0;
    std::size_t n_batches = 0;
    for (std::size_t begin = 0; begin < order.size();
         begin += plan.batch_size) {
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(plan.batch_size));
      Batch batch = detail::gather_batch(seqs, order, begin, end, max_len);
      mask_batch(batch, policy, out.tokenizer.specials,
                 out.config.vocab_size, mask_rng);
      auto [loss, grads] = backward_mlm(out.config, out.encoder, batch,
                                        training, &dropout_rng);
      adamw_step(out.encoder, grads, opt, hyper);
      loss_sum += static_cast<double>(loss);
      ++n_batches;
    }
    EpochLoss el{epoch, loss_sum / static_cast<double>(n_batches)};
    losses.push_back(el);
    detail::log_record(log, {{"stage", "adapt"},
                             {"epoch", el.epoch},
                             {"loss", el.mean_loss}});
  }

  out.manifest["stage"] = "adapted";
  out.manifest["seed"] = std::to_string(plan.seed);
  out.manifest["epochs"] = std::to_string(plan.epochs);
  out.manifest["batch_size"] = std::to_string(plan.batch_size);
  out.manifest["learning_rate"] = detail::format_double(plan.learning_rate);
  return {std::move(out), std::move(losses)};
}

/// Batched argmax prediction with a trained head, in input order.
inline std::vector<std::string> predict_labels(
    const Checkpoint& ckpt, const std::vector<std::string>& texts,
    int max_len = 128, int batch_size = 16) {
  if (!ckpt.head || !ckpt.head_schema) {
    throw TrainError("checkpoint has no classification head");
  }
  const int L = std::min(max_len, ckpt.config.max_positions);
  std::vector<TokenSequence> seqs;
  seqs.reserve(texts.size());
  for (const auto& t : texts) seqs.push_back(encode(ckpt.tokenizer, t, L));
  std::vector<std::size_t> order(seqs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<std::string> labels;
  labels.reserve(texts.size());
  for (std::size_t begin = 0; begin < seqs.size();
       begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end =
        std::min(seqs.size(), begin + static_cast<std::size_t>(batch_size));
    Batch batch = detail::gather_batch(seqs, order, begin, end, L);
    Tensor<float> probs =
        classify_probs(ckpt.config, ckpt.encoder, *ckpt.head, batch);
    const int C = ckpt.head->n_labels();
    for (int b = 0; b < batch.batch; ++b) {
      int best = 0;
      for (int c = 1; c < C; ++c) {
        if (probs.data[static_cast<std::size_t>(b) * C + c] >
            probs.data[static_cast<std::size_t>(b) * C + best]) {
          best = c;
        }
      }
      labels.push_back(ckpt.head_schema->labels[best]);
    }
  }
  return labels;
}

/// Supervised fine-tuning with a fresh classification head. Trains for
/// plan.epochs epochs, evaluates on dev after each, and returns the
/// snapshot from the epoch with the highest dev macro F1 (earliest on
/// ties), stage "finetuned".
inline std::pair<Checkpoint, std::vector<EvaluationReport>> finetune(
    const Checkpoint& ckpt, const LabeledDataset& train_set,
    const LabeledDataset& dev_set, const TrainPlan& plan,
    std::ostream* log = nullptr) {
  plan.validate();
  if (plan.stage != "finetune") {
    throw TrainError("finetune requires a 'finetune' plan, got '" +
                     plan.stage + "'");
  }
  if (train_set.schema.name != dev_set.schema.name ||
      train_set.schema.labels != dev_set.schema.labels) {
    throw TrainError("train/dev schema mismatch: '" + train_set.schema.name +
                     "' vs '" + dev_set.schema.name + "'");
  }
  if (train_set.examples.empty()) {
    throw TrainError("cannot finetune on an empty training set");
  }
  if (plan.epochs < 1) {
    throw TrainError("finetune needs epochs >= 1 (no trained head would "
                     "exist to return)");
  }
  const TaskSchema& schema = train_set.schema;
  const int n_labels = static_cast<int>(schema.labels.size());
  if (ckpt.head && ckpt.head->n_labels() != n_labels) {
    throw TrainError("checkpoint head has " +
                     std::to_string(ckpt.head->n_labels()) +
                     " labels, task schema has " + std::to_string(n_labels));
  }

  const int max_len = std::min(plan.max_len, ckpt.config.max_positions);
  std::vector<TokenSequence> seqs;
  std::vector<int> labels;
  seqs.reserve(train_set.examples.size());
  for (const auto& ex : train_set.examples) {
    seqs.push_back(encode(ckpt.tokenizer, ex.text, max_len));
    labels.push_back(schema.label_index(ex.label));
  }
  std::vector<std::string> dev_texts, dev_golds;
  for (const auto& ex : dev_set.examples) {
    dev_texts.push_back(ex.text);
    dev_golds.push_back(ex.label);
  }

  Checkpoint work = ckpt;
  work.head = init_head<float>(work.config, n_labels, plan.seed);
  work.head_schema = schema;
  OptimizerState opt = OptimizerState::shaped(work.config, n_labels);
  OptimizerHyper hyper;
  hyper.learning_rate = plan.learning_rate;
  Rng shuffle_rng = stream_rng(plan.seed, "shuffle");
  Rng dropout_rng = stream_rng(plan.seed, "dropout");
  const bool training = work.config.dropout_rate > 0.0;

  std::vector<EvaluationReport> reports;
  Checkpoint best = work;
  double best_macro = -1.0;
  int best_epoch = 0;
  for (int epoch = 1; epoch <= plan.epochs; ++epoch) {
    auto order = detail::epoch_order(seqs.size(), plan.shuffle, shuffle_rng);
    double loss_sum = 0;
    std::size_t n_batches = 0;
    for (std::size_t begin = 0; begin < order.size();
         begin += plan.batch_size) {
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(plan.batch_size));
      Batch batch = detail::gather_batch(seqs, order, begin, end, max_len);
      batch.class_labels.clear();
      for (std::size_t i = begin; i < end; ++i) {
        batch.class_labels.push_back(labels[order[i]]);
      }
      auto grads = backward_classify(work.config, work.encoder, *work.head,
                                     batch, training, &dropout_rng);
      adamw_step(work.encoder, grads.encoder, opt, hyper, &*work.head,
                 &grads.head);
      loss_sum += static_cast<double>(grads.loss);
      ++n_batches;
    }

    auto dev_preds = predict_labels(work, dev_texts, max_len, plan.batch_size);
    auto report = evaluate(confusion(dev_preds, dev_golds, schema), schema.name);
    reports.push_back(report);
    detail::log_record(log, {{"stage", "finetune"},
                             {"epoch", epoch},
                             {"loss", loss_sum / double(n_batches)},
                             {"macro_f1", report.macro_f1}});
    if (report.macro_f1 > best_macro) {
      best_macro = report.macro_f1;
      best = work;
      best_epoch = epoch;
    }
  }

  best.manifest["stage"] = "finetuned";
  best.manifest["task"] = schema.name;
  best.manifest["seed"] = std::to_string(plan.seed);
  best.manifest["epochs"] = std::to_string(plan.epochs);
  best.manifest["batch_size"] = std::to_string(plan.batch_size);
  best.manifest["learning_rate"] = detail::format_double(plan.learning_rate);
  best.manifest["best_epoch"] = std::to_string(best_epoch);
  return {std::move(best), std::move(reports)};
}

/// Picks the system with the highest macro F1; ties break to the earliest.
inline std::string select_model(
    const std::vector<std::pair<std::string, EvaluationReport>>& reports) {
  if (reports.empty()) throw TrainError("select_model needs >= 1 report");
  std::size_t best = 0;
  for (std::size_t i = 1; i < reports.size(); ++i) {
    if (reports[i].second.macro_f1 > reports[best].second.macro_f1) best = i;
  }
  return reports[best].first;
}

}  // namespace hopespeech
