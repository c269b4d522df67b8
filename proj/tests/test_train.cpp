#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "fixtures.hpp"
#include "hopespeech/train.hpp"

using namespace hopespeech;

namespace {

Checkpoint tiny_checkpoint(std::uint64_t seed = 3) {
  Checkpoint ckpt;
  ckpt.tokenizer = TokenizerModel::base();
  ckpt.config.vocab_size = ckpt.tokenizer.vocab_size();
  ckpt.config.d_model = 16;
  ckpt.config.n_layers = 1;
  ckpt.config.n_heads = 2;
  ckpt.config.d_ff = 32;
  ckpt.config.max_positions = 32;
  ckpt.config.dropout_rate = 0.0;
  ckpt.encoder = init_weights<float>(ckpt.config, seed);
  ckpt.manifest["stage"] = "init";
  return ckpt;
}

Corpus tiny_corpus(int docs, Rng& rng) {
  Corpus c;
  for (int i = 0; i < docs; ++i) {
    c.docs.emplace_back(std::to_string(i), fixtures::latin_doc(rng, 4));
  }
  return c;
}

bool same_weights(const EncoderWeights<float>& a,
                  const EncoderWeights<float>& b) {
  auto ra = read_tensor_refs(a), rb = read_tensor_refs(b);
  for (std::size_t i = 0; i < ra.size(); ++i) {
    if (ra[i].tensor->data != rb[i].tensor->data) return false;
  }
  return true;
}

EvaluationReport report_with(double macro, const std::string& schema) {
  EvaluationReport r;
  r.schema_name = schema;
  r.macro_f1 = macro;
  return r;
}

}  // namespace

TEST_CASE("masking policy validates its parameters") {
  CHECK_NOTHROW(MaskingPolicy());
  CHECK_NOTHROW(MaskingPolicy(0.15, 0.8, 0.1, 0.1));
  CHECK_THROWS(MaskingPolicy(0.0));
  CHECK_THROWS(MaskingPolicy(1.0));
  CHECK_THROWS(MaskingPolicy(-0.1));
  CHECK_THROWS(MaskingPolicy(0.15, 0.7, 0.1, 0.1));  // sums to 0.9
  CHECK_THROWS(MaskingPolicy(0.15, 1.1, -0.1, 0.0));
}

TEST_CASE("mask_batch selection and action statistics") {
  // One long synthetic batch: ~1e5 maskable positions plus framing tokens.
  const int vocab = 1000, L = 10;
  const int B = 12000;
  SpecialIds sp;
  Rng data_rng(1);
  Batch batch;
  batch.batch = B;
  batch.seq_len = L;
  for (int b = 0; b < B; ++b) {
    batch.ids.push_back(sp.cls);
    batch.attn.push_back(1);
    for (int l = 1; l < L - 2; ++l) {
      batch.ids.push_back(kNumSpecials + static_cast<int>(data_rng.uniform_int(
                                             vocab - kNumSpecials)));
      batch.attn.push_back(1);
    }
    batch.ids.push_back(sp.sep);
    batch.attn.push_back(1);
    batch.ids.push_back(sp.pad);
    batch.attn.push_back(0);
  }
  Batch original = batch;

  Rng rng = stream_rng(9, "mask");
  mask_batch(batch, MaskingPolicy(), sp, vocab, rng);

  std::size_t maskable = 0, selected = 0, to_mask = 0, to_random = 0, kept = 0;
  for (std::size_t i = 0; i < batch.ids.size(); ++i) {
    const int orig = original.ids[i];
    const bool is_special =
        orig == sp.pad || orig == sp.cls || orig == sp.sep;
    if (original.attn[i] == 1 && !is_special) ++maskable;
    if (batch.mlm_labels[i] == kIgnoreLabel) {
      CHECK(batch.ids[i] == orig);  // untouched
      continue;
    }
    ++selected;
    CHECK_FALSE(is_special);  // never-mask tokens never selected
    CHECK(batch.mlm_labels[i] == orig);
    if (batch.ids[i] == sp.mask) {
      ++to_mask;
    } else if (batch.ids[i] == orig) {
      ++kept;
    } else {
      ++to_random;
      CHECK(batch.ids[i] >= kNumSpecials);
      CHECK(batch.ids[i] < vocab);
    }
  }
  REQUIRE(maskable >= 80000);
  const double sel_rate = double(selected) / double(maskable);
  CHECK(sel_rate == Catch::Approx(0.15).margin(0.01));
  CHECK(double(to_mask) / double(selected) == Catch::Approx(0.8).margin(0.02));
  CHECK(double(to_random) / double(selected) == Catch::Approx(0.1).margin(0.02));
  CHECK(double(kept) / double(selected) == Catch::Approx(0.1).margin(0.02));
}

TEST_CASE("mask_batch always scores at least one position") {
  SpecialIds sp;
  // Single maskable token and a near-zero rate: the forced fallback must
  // still fire every time.
  for (int trial = 0; trial < 200; ++trial) {
    Batch batch;
    batch.batch = 1;
    batch.seq_len = 3;
    batch.ids = {sp.cls, 42, sp.sep};
    batch.attn = {1, 1, 1};
    Rng rng(trial);
    mask_batch(batch, MaskingPolicy(0.001), sp, 1000, rng);
    CHECK(batch.mlm_labels[1] == 42);
    CHECK(batch.mlm_labels[0] == kIgnoreLabel);
    CHECK(batch.mlm_labels[2] == kIgnoreLabel);
  }

  Batch empty;
  empty.batch = 1;
  empty.seq_len = 2;
  empty.ids = {sp.cls, sp.sep};
  empty.attn = {1, 1};
  Rng rng(0);
  CHECK_THROWS(mask_batch(empty, MaskingPolicy(), sp, 1000, rng));
}

TEST_CASE("adamw single-step scalar oracle") {
  OptimizerHyper hyper;
  hyper.learning_rate = 0.1;
  hyper.weight_decay = 0.0;

  double theta = 1.0, g = 1.0, m = 0.0, v = 0.0;
  adamw_update(&theta, &g, &m, &v, 1, 1, hyper, false, "x");
  // m_hat = v_hat = 1 after bias correction, so the step is
  // lr * 1 / (1 + eps) = 0.1 to within eps.
  CHECK(theta == Catch::Approx(0.9).margin(1e-8));
  CHECK(m == Catch::Approx(0.1).margin(1e-15));
  CHECK(v == Catch::Approx(0.001).margin(1e-15));

  SECTION("zero gradient with zero moments is a no-op") {
    double t2 = 5.0, g2 = 0.0, m2 = 0.0, v2 = 0.0;
    adamw_update(&t2, &g2, &m2, &v2, 1, 1, hyper, false, "x");
    CHECK(t2 == 5.0);
  }
  SECTION("decay is decoupled: applied even with zero gradient") {
    OptimizerHyper wd = hyper;
    wd.weight_decay = 0.01;
    double t2 = 5.0, g2 = 0.0, m2 = 0.0, v2 = 0.0;
    adamw_update(&t2, &g2, &m2, &v2, 1, 1, wd, true, "x");
    CHECK(t2 == Catch::Approx(5.0 * (1.0 - 0.1 * 0.01)).margin(1e-12));
  }
  SECTION("non-finite gradient names the tensor") {
    double t2 = 1.0, g2 = std::nan(""), m2 = 0.0, v2 = 0.0;
    CHECK_THROWS_WITH(
        adamw_update(&t2, &g2, &m2, &v2, 1, 1, hyper, false, "layer0.wq"),
        Catch::Matchers::ContainsSubstring("layer0.wq"));
  }
}

TEST_CASE("adamw with zero decay matches an independent adam") {
  OptimizerHyper hyper;
  hyper.learning_rate = 1e-3;
  hyper.weight_decay = 0.0;
  const std::size_t n = 64;
  Rng rng(17);
  std::vector<double> theta(n), m(n, 0.0), v(n, 0.0);
  std::vector<double> ref = theta;
  std::vector<double> rm(n, 0.0), rv(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    theta[i] = rng.normal(0, 1);
    ref[i] = theta[i];
  }
  for (int t = 1; t <= 20; ++t) {
    std::vector<double> g(n);
    for (auto& x : g) x = rng.normal(0, 1);
    adamw_update(theta.data(), g.data(), m.data(), v.data(), n, t, hyper,
                 false, "x");
    // Textbook adaptive-moment update, written out longhand.
    for (std::size_t i = 0; i < n; ++i) {
      rm[i] = 0.9 * rm[i] + 0.1 * g[i];
      rv[i] = 0.999 * rv[i] + 0.001 * g[i] * g[i];
      const double mh = rm[i] / (1.0 - std::pow(0.9, t));
      const double vh = rv[i] / (1.0 - std::pow(0.999, t));
      ref[i] -= 1e-3 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(theta[i] == Catch::Approx(ref[i]).margin(1e-12));
  }
}

TEST_CASE("adamw_step decays matrices but not biases or layer norms") {
  auto ckpt = tiny_checkpoint();
  auto before = ckpt.encoder;
  auto zero_grads = EncoderWeights<float>::shaped(ckpt.config);
  OptimizerState opt = OptimizerState::shaped(ckpt.config);
  OptimizerHyper hyper;
  hyper.learning_rate = 0.1;
  adamw_step(ckpt.encoder, zero_grads, opt, hyper);
  CHECK(opt.t == 1);

  auto rb = read_tensor_refs(before);
  auto ra = read_tensor_refs(ckpt.encoder);
  const float shrink = 1.0f - 0.1f * 0.01f;
  for (std::size_t t = 0; t < ra.size(); ++t) {
    for (std::size_t i = 0; i < ra[t].tensor->numel(); ++i) {
      const float b = rb[t].tensor->data[i], a = ra[t].tensor->data[i];
      if (ra[t].kind == ParamKind::Matrix) {
        CHECK(a == Catch::Approx(b * shrink).margin(1e-9));
      } else {
        CHECK(a == b);
      }
    }
  }
}

TEST_CASE("epoch_order is a permutation") {
  Rng rng = stream_rng(5, "shuffle");
  auto order = detail::epoch_order(100, true, rng);
  auto sorted = order;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 100; ++i) CHECK(sorted[i] == i);
  CHECK(order != sorted);  // astronomically unlikely to be identity

  Rng rng2(0);
  auto fixed = detail::epoch_order(10, false, rng2);
  for (std::size_t i = 0; i < 10; ++i) CHECK(fixed[i] == i);

  Rng a = stream_rng(5, "shuffle"), b = stream_rng(5, "shuffle");
  CHECK(detail::epoch_order(50, true, a) == detail::epoch_order(50, true, b));
}

TEST_CASE("adapt_mlm contract") {
  Rng rng(23);
  auto ckpt = tiny_checkpoint();
  auto corpus = tiny_corpus(24, rng);

  SECTION("zero epochs leaves weights identical, manifest updated") {
    auto plan = TrainPlan::adapt_defaults(7);
    plan.epochs = 0;
    auto [out, losses] = adapt_mlm(ckpt, corpus, plan);
    CHECK(losses.empty());
    CHECK(same_weights(out.encoder, ckpt.encoder));
    CHECK(out.manifest.at("stage") == "adapted");
    CHECK(out.manifest.at("epochs") == "0");
    CHECK(ckpt.manifest.at("stage") == "init");  // input untouched
  }
  SECTION("training changes weights deterministically and logs epochs") {
    auto plan = TrainPlan::adapt_defaults(7);
    plan.epochs = 2;
    plan.max_len = 16;
    std::ostringstream log;
    auto [out, losses] = adapt_mlm(ckpt, corpus, plan, &log);
    REQUIRE(losses.size() == 2);
    CHECK(losses[0].epoch == 1);
    CHECK(losses[1].epoch == 2);
    CHECK_FALSE(same_weights(out.encoder, ckpt.encoder));
    CHECK(out.manifest.at("epochs") == "2");
    CHECK(out.manifest.at("batch_size") == "16");
    CHECK(out.manifest.at("learning_rate") == "5e-05");
    CHECK(out.manifest.at("seed") == "7");

    // One LDJSON record per epoch.
    int lines = 0;
    std::istringstream in(log.str());
    std::string line;
    while (std::getline(in, line)) {
      auto j = nlohmann::json::parse(line);
      CHECK(j.at("stage") == "adapt");
      ++lines;
    }
    CHECK(lines == 2);

    auto [out2, losses2] = adapt_mlm(ckpt, corpus, plan);
    CHECK(same_weights(out.encoder, out2.encoder));
    CHECK(losses2[0].mean_loss == losses[0].mean_loss);
  }
  SECTION("input validation") {
    CHECK_THROWS(adapt_mlm(ckpt, Corpus{}, TrainPlan::adapt_defaults(1)));
    CHECK_THROWS(adapt_mlm(ckpt, corpus, TrainPlan::finetune_defaults(1)));
    auto bad = TrainPlan::adapt_defaults(1);
    bad.learning_rate = 0.0;
    CHECK_THROWS(adapt_mlm(ckpt, corpus, bad));
  }
}

TEST_CASE("finetune contract") {
  auto ckpt = tiny_checkpoint();
  auto train_set = fixtures::separable_coarse_dataset(3);
  auto dev_set = fixtures::separable_coarse_dataset(2);
  for (auto& ex : dev_set.examples) ex.id = "d" + ex.id;

  SECTION("produces a coarse 4-way head and per-epoch reports") {
    auto plan = TrainPlan::finetune_defaults(5);
    plan.epochs = 2;
    plan.max_len = 16;
    plan.batch_size = 4;
    auto [out, reports] = finetune(ckpt, train_set, dev_set, plan);
    REQUIRE(out.head.has_value());
    CHECK(out.head->n_labels() == 4);
    CHECK(out.head_schema->name == "coarse");
    REQUIRE(reports.size() == 2);
    CHECK(out.manifest.at("stage") == "finetuned");
    CHECK(out.manifest.at("task") == "coarse");
    CHECK(out.manifest.at("learning_rate") == "2e-05");
    const int best = std::stoi(out.manifest.at("best_epoch"));
    CHECK(best >= 1);
    CHECK(best <= 2);
    // The returned snapshot carries the best epoch's dev score.
    double best_macro = -1;
    for (const auto& r : reports) best_macro = std::max(best_macro, r.macro_f1);
    CHECK(reports[best - 1].macro_f1 == best_macro);
    CHECK_FALSE(ckpt.head.has_value());  // input untouched
  }
  SECTION("fine schema gets a 5-way head") {
    LabeledDataset ft{fine_schema(), {}, "train"};
    LabeledDataset fd{fine_schema(), {}, "dev"};
    int next = 0;
    for (const auto& label : ft.schema.labels) {
      for (int i = 0; i < 2; ++i) {
        ft.examples.push_back({"t" + std::to_string(next),
                               label + " text " + std::to_string(i), label});
        fd.examples.push_back({"d" + std::to_string(next),
                               label + " text x" + std::to_string(i), label});
        ++next;
      }
    }
    auto plan = TrainPlan::finetune_defaults(5);
    plan.epochs = 1;
    plan.max_len = 16;
    auto [out, reports] = finetune(ckpt, ft, fd, plan);
    CHECK(out.head->n_labels() == 5);
    CHECK(out.manifest.at("task") == "fine");
  }
  SECTION("validation") {
    auto plan = TrainPlan::finetune_defaults(5);
    plan.epochs = 0;
    CHECK_THROWS(finetune(ckpt, train_set, dev_set, plan));

    auto fine_dev = LabeledDataset{fine_schema(), {{"a", "x", "hopelessness"}},
                                   "dev"};
    auto ok = TrainPlan::finetune_defaults(5);
    ok.epochs = 1;
    CHECK_THROWS(finetune(ckpt, train_set, fine_dev, ok));
    CHECK_THROWS(finetune(ckpt, LabeledDataset{coarse_schema(), {}, "train"},
                          dev_set, ok));
    CHECK_THROWS(finetune(ckpt, train_set, dev_set,
                          TrainPlan::adapt_defaults(5)));
  }
}

TEST_CASE("predict_labels") {
  auto ckpt = tiny_checkpoint();
  SECTION("requires a head") {
    CHECK_THROWS(predict_labels(ckpt, {"hello"}));
  }
  SECTION("returns one schema label per input, in order") {
    ckpt.head = init_head<float>(ckpt.config, 4, 1);
    ckpt.head_schema = coarse_schema();
    std::vector<std::string> texts = {"one", "two", "three", "four", "five"};
    auto labels = predict_labels(ckpt, texts, 16, 2);
    REQUIRE(labels.size() == 5);
    for (const auto& l : labels) {
      CHECK(std::count(ckpt.head_schema->labels.begin(),
                       ckpt.head_schema->labels.end(), l) == 1);
    }
    // Batch size must not affect results.
    CHECK(predict_labels(ckpt, texts, 16, 5) == labels);
    CHECK(predict_labels(ckpt, texts, 16, 1) == labels);
  }
}

TEST_CASE("select_model picks the best macro F1, earliest on ties") {
  SECTION("published coarse validation comparison") {
    CHECK(select_model({{"baseline", report_with(0.5227, "coarse")},
                        {"organic", report_with(0.5238, "coarse")}}) ==
          "organic");
  }
  SECTION("published fine validation comparison") {
    CHECK(select_model({{"baseline", report_with(0.3171, "fine")},
                        {"organic", report_with(0.3416, "fine")}}) ==
          "organic");
  }
  SECTION("tie goes to the earliest") {
    CHECK(select_model({{"a", report_with(0.4, "coarse")},
                        {"b", report_with(0.4, "coarse")}}) == "a");
  }
  SECTION("empty input rejected") { CHECK_THROWS(select_model({})); }
}
