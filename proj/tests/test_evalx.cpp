#include <algorithm>
#include <map>

#include <catch2/catch_amalgamated.hpp>

#include "fixtures.hpp"
#include "hopespeech/evalx.hpp"
#include "hopespeech/rng.hpp"

using namespace hopespeech;

namespace {

// Independent scorer: recomputes per-class P/R/F1 straight from the
// prediction lists, never touching ConfusionMatrix.
struct BruteForceScores {
  double accuracy, macro_f1, weighted_f1;
};

BruteForceScores brute_force(const std::vector<std::string>& preds,
                             const std::vector<std::string>& golds,
                             const TaskSchema& schema) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == golds[i]) ++correct;
  }
  double macro = 0, weighted = 0;
  for (const auto& label : schema.labels) {
    std::size_t tp = 0, fp = 0, fn = 0, support = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (golds[i] == label) {
        ++support;
        if (preds[i] == label) ++tp;
        else ++fn;
      } else if (preds[i] == label) {
        ++fp;
      }
    }
    const double p = tp + fp == 0 ? 0.0 : double(tp) / double(tp + fp);
    const double r = tp + fn == 0 ? 0.0 : double(tp) / double(tp + fn);
    const double f1 = p + r == 0.0 ? 0.0 : 2 * p * r / (p + r);
    macro += f1;
    weighted += double(support) * f1;
  }
  return {double(correct) / double(preds.size()),
          macro / double(schema.labels.size()),
          weighted / double(preds.size())};
}

TaskSchema ab_schema() { return {"ab", {"A", "B"}}; }

EvaluationReport report_with(double macro, const std::string& schema,
                             double acc = 0, double wf1 = 0) {
  EvaluationReport r;
  r.schema_name = schema;
  r.macro_f1 = macro;
  r.accuracy = acc;
  r.weighted_f1 = wf1;
  return r;
}

}  // namespace

TEST_CASE("confusion counts gold rows against predicted columns") {
  auto schema = ab_schema();

  SECTION("perfect prediction is diagonal") {
    auto cm = confusion({"A", "B", "A"}, {"A", "B", "A"}, schema);
    CHECK(cm.cells[0][0] == 2);
    CHECK(cm.cells[1][1] == 1);
    CHECK(cm.cells[0][1] == 0);
    CHECK(cm.cells[1][0] == 0);
    CHECK(cm.total == 3);
  }
  SECTION("direct count") {
    auto cm = confusion({"A", "B", "B", "B"}, {"A", "A", "B", "B"}, schema);
    CHECK(cm.cells == std::vector<std::vector<std::size_t>>{{1, 1}, {0, 2}});
  }
  SECTION("errors") {
    CHECK_THROWS(confusion({"A"}, {"A", "B"}, schema));
    CHECK_THROWS(confusion({"X"}, {"A"}, schema));
    CHECK_THROWS(confusion({"A"}, {"X"}, schema));
    CHECK_THROWS(confusion({}, {}, schema));
  }
}

TEST_CASE("evaluate on the hand-derived 2x2 example") {
  auto cm = confusion({"A", "B", "B", "B"}, {"A", "A", "B", "B"}, ab_schema());
  auto rep = evaluate(cm, "ab");
  CHECK(rep.precision[0] == Catch::Approx(1.0));
  CHECK(rep.precision[1] == Catch::Approx(2.0 / 3.0));
  CHECK(rep.recall[0] == Catch::Approx(0.5));
  CHECK(rep.recall[1] == Catch::Approx(1.0));
  CHECK(rep.f1[0] == Catch::Approx(2.0 / 3.0));
  CHECK(rep.f1[1] == Catch::Approx(0.8));
  CHECK(rep.accuracy == Catch::Approx(0.75));
  CHECK(rep.macro_f1 == Catch::Approx((2.0 / 3.0 + 0.8) / 2).margin(1e-12));
  CHECK(rep.weighted_f1 ==
        Catch::Approx((2 * (2.0 / 3.0) + 2 * 0.8) / 4).margin(1e-12));
}

TEST_CASE("perfect diagonal gives all metrics 1") {
  auto cm = confusion({"A", "B"}, {"A", "B"}, ab_schema());
  auto rep = evaluate(cm);
  CHECK(rep.accuracy == 1.0);
  CHECK(rep.macro_f1 == 1.0);
  CHECK(rep.weighted_f1 == 1.0);
}

TEST_CASE("zero-support class contributes F1 = 0 to the macro mean") {
  auto schema = coarse_schema();
  // Only two of four classes ever appear.
  auto cm = confusion({"encouraging", "uninvolved"},
                      {"encouraging", "uninvolved"}, schema);
  auto rep = evaluate(cm);
  CHECK(rep.macro_f1 == Catch::Approx(0.5));  // (1 + 1 + 0 + 0) / 4
  CHECK(rep.weighted_f1 == Catch::Approx(1.0));
}

TEST_CASE("evaluate matches the brute-force scorer on random data") {
  Rng rng(42);
  for (const auto& schema : {coarse_schema(), fine_schema()}) {
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t n = 1 + rng.uniform_int(60);
      std::vector<std::string> preds, golds;
      for (std::size_t i = 0; i < n; ++i) {
        preds.push_back(schema.labels[rng.uniform_int(schema.labels.size())]);
        golds.push_back(schema.labels[rng.uniform_int(schema.labels.size())]);
      }
      auto rep = evaluate(confusion(preds, golds, schema), schema.name);
      auto bf = brute_force(preds, golds, schema);
      CHECK(rep.accuracy == Catch::Approx(bf.accuracy).margin(1e-12));
      CHECK(rep.macro_f1 == Catch::Approx(bf.macro_f1).margin(1e-12));
      CHECK(rep.weighted_f1 == Catch::Approx(bf.weighted_f1).margin(1e-12));
    }
  }
}

TEST_CASE("equal support makes macro and weighted F1 agree") {
  Rng rng(7);
  auto schema = ab_schema();
  std::vector<std::string> golds, preds;
  for (int i = 0; i < 30; ++i) {
    golds.push_back("A");
    golds.push_back("B");
    preds.push_back(schema.labels[rng.uniform_int(2)]);
    preds.push_back(schema.labels[rng.uniform_int(2)]);
  }
  auto rep = evaluate(confusion(preds, golds, schema));
  CHECK(rep.macro_f1 == Catch::Approx(rep.weighted_f1).margin(1e-12));
}

TEST_CASE("metrics are invariant under label permutation") {
  Rng rng(11);
  auto schema = fine_schema();
  std::vector<std::string> preds, golds;
  for (int i = 0; i < 100; ++i) {
    preds.push_back(schema.labels[rng.uniform_int(5)]);
    golds.push_back(schema.labels[rng.uniform_int(5)]);
  }
  auto rep = evaluate(confusion(preds, golds, schema), schema.name);

  TaskSchema permuted = schema;
  std::reverse(permuted.labels.begin(), permuted.labels.end());
  auto rep_p = evaluate(confusion(preds, golds, permuted), permuted.name);
  CHECK(rep.accuracy == Catch::Approx(rep_p.accuracy).margin(1e-15));
  CHECK(rep.macro_f1 == Catch::Approx(rep_p.macro_f1).margin(1e-15));
  CHECK(rep.weighted_f1 == Catch::Approx(rep_p.weighted_f1).margin(1e-15));
}

TEST_CASE("compare flags the macro-F1 winner") {
  SECTION("published coarse validation numbers") {
    auto rows = compare({{"baseline", report_with(0.5227, "coarse", 0.6269, 0.6364)},
                         {"organic", report_with(0.5238, "coarse", 0.6869, 0.6545)}});
    CHECK_FALSE(rows[0].winner);
    CHECK(rows[1].winner);
  }
  SECTION("published fine validation numbers") {
    auto rows = compare({{"baseline", report_with(0.3171, "fine", 0.4135, 0.3753)},
                         {"organic", report_with(0.3416, "fine", 0.5337, 0.4732)}});
    CHECK(rows[1].winner);
  }
  SECTION("ties go to the first system") {
    auto rows = compare({{"first", report_with(0.5, "coarse")},
                         {"second", report_with(0.5, "coarse")}});
    CHECK(rows[0].winner);
    CHECK_FALSE(rows[1].winner);
  }
  SECTION("schema mismatch rejected") {
    CHECK_THROWS(compare({{"a", report_with(0.5, "coarse")},
                          {"b", report_with(0.5, "fine")}}));
  }
  SECTION("needs two systems") {
    CHECK_THROWS(compare({{"only", report_with(0.5, "coarse")}}));
  }
}

TEST_CASE("comparison rendering") {
  auto rows = compare({{"baseline", report_with(0.5227, "coarse", 0.6269, 0.6364)},
                       {"organic", report_with(0.5238, "coarse", 0.6869, 0.6545)}});
  auto text = render_comparison(rows, 4);
  CHECK(text.find("organic *") != std::string::npos);
  CHECK(text.find("0.5238") != std::string::npos);
  auto text2 = render_comparison(rows, 2);
  CHECK(text2.find("0.52") != std::string::npos);
  auto tsv = render_comparison_tsv(rows, 4);
  CHECK(tsv.find("organic\t") != std::string::npos);
}

TEST_CASE("report JSON round trip") {
  auto cm = confusion({"A", "B", "B", "B"}, {"A", "A", "B", "B"}, ab_schema());
  auto rep = evaluate(cm, "ab");
  auto back = report_from_json(report_to_json(rep));
  CHECK(back.schema_name == rep.schema_name);
  CHECK(back.macro_f1 == rep.macro_f1);
  CHECK(back.weighted_f1 == rep.weighted_f1);
  CHECK(back.confusion.cells == rep.confusion.cells);
  CHECK(back.support == rep.support);
}

TEST_CASE("evaluate rejects an empty matrix") {
  ConfusionMatrix cm;
  cm.labels = {"A", "B"};
  cm.cells = {{0, 0}, {0, 0}};
  cm.total = 0;
  CHECK_THROWS(evaluate(cm));
}
