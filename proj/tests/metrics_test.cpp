#include <cmath>

#include "doctest.h"
#include "json.hpp"
#include "model_cases.hpp"
#include "sepvqa/eval/ablation.hpp"

using namespace sepvqa;
using namespace sepvqa::eval;
using num::Tensor;

namespace {

// "is there a dog" over `regions` random regions with one dog at `gold`.
data::Example dog_example(num::Rng& rng, std::size_t regions, std::size_t gold, std::uint64_t id) {
  const auto dog = *data::category_id("dog");
  const auto cat = *data::category_id("cat");
  data::Example e;
  e.id = id;
  for (std::size_t m = 0; m < regions; ++m) e.scene.objects.push_back({m == gold ? dog : cat});
  e.scene.regions = testing::random_tensor(rng, {regions, 32});
  e.question.tokens = data::tokenize({"is", "there", "a", "dog"});
  e.question.skill = data::Skill::Existence;
  e.question.mentions = {{3, dog}};
  e.question.answer = data::AnswerVocab::get().find("yes");
  return e;
}

}  // namespace

TEST_CASE("exact-match accuracy") {
  const std::vector<int> gold{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  CHECK(vqa_accuracy(gold, gold) == 100.0);
  CHECK(vqa_accuracy(std::vector<int>(10, 0), gold) == 0.0);
  CHECK(vqa_accuracy({1, 2, 3, 4, 5, 0, 0, 0, 0, 0}, gold) == 50.0);
  CHECK_THROWS_AS(vqa_accuracy({1}, gold), MetricsError);
  CHECK_THROWS_AS(vqa_accuracy({}, {}), MetricsError);
}

TEST_CASE("a token equal to its gold region ranks it first among orthogonal regions") {
  num::Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 2 + rng.below(10), g = rng.below(m);
    Tensor z({m, 16});
    for (std::size_t r = 0; r < m; ++r) z.at(r, r) = 1.0 + rng.uniform();
    Tensor h({1, 16});
    h[g] = z.at(g, g);
    const auto s = region_scores(h, z);
    CHECK(hit_at_k(s, {g}, 1));
  }
}

TEST_CASE("hit at k counts strictly higher scores") {
  const std::vector<double> s{0.9, 0.5, 0.5, 0.1, 0.7, 0.3};
  CHECK(hit_at_k(s, {0}, 1));
  CHECK_FALSE(hit_at_k(s, {4}, 1));
  CHECK(hit_at_k(s, {4}, 2));
  CHECK(hit_at_k(s, {1}, 3));
  CHECK(hit_at_k(s, {2}, 3));
  CHECK_FALSE(hit_at_k(s, {3}, 5));
  CHECK(hit_at_k(s, {3, 0}, 1));
  CHECK_THROWS_AS(hit_at_k(s, {}, 1), MetricsError);
  CHECK_THROWS_AS(hit_at_k(s, {6}, 1), MetricsError);
}

TEST_CASE("a random model ranks the gold region in the top five of eight about 5/8 of the time") {
  num::Rng rng(3);
  std::vector<data::Example> examples;
  for (std::size_t i = 0; i < 1000; ++i) examples.push_back(dog_example(rng, 8, rng.below(8), i));
  std::vector<std::size_t> positions(examples.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  const model::Encoder enc(model::EncoderConfig::desk());
  const auto tuples = grounding_tuples(examples, positions);
  REQUIRE(tuples.size() == 1000);
  const auto r = grounding_recall_at_k(enc, enc.init_params(9), examples, tuples, 5);
  CHECK(r.counted == 1000);
  CHECK(r.degenerate == 0);
  const double sd = 100.0 * std::sqrt(0.625 * 0.375 / 1000.0);
  CAPTURE(r.recall);
  CHECK(std::abs(r.recall - 62.5) < 4.0 * sd);
}

TEST_CASE("scenes with at most k regions are degenerate and excluded") {
  num::Rng rng(5);
  std::vector<data::Example> examples{dog_example(rng, 1, 0, 0), dog_example(rng, 5, 2, 1), dog_example(rng, 6, 4, 2)};
  const model::Encoder enc(testing::tiny_config());
  const auto r = grounding_recall_at_k(enc, enc.init_params(0), examples, grounding_tuples(examples, {0, 1, 2}), 5);
  CHECK(r.degenerate == 2);
  CHECK(r.degenerate_hits == 2);
  CHECK(r.counted == 1);
  CHECK((r.recall == 0.0 || r.recall == 100.0));
  const auto raw = grounding_recall_at_k(enc, enc.init_params(0), examples, grounding_tuples(examples, {0, 1, 2}), 5, false);
  CHECK(raw.degenerate == 2);
}

TEST_CASE("grounding tuples need a visible concept mention") {
  num::Rng rng(7);
  auto e = dog_example(rng, 3, 1, 0);
  auto hidden = e;
  for (auto& o : hidden.scene.objects) o.category = *data::category_id("cat");
  const std::vector<data::Example> examples{e, hidden};
  const auto tuples = grounding_tuples(examples, {0, 1});
  REQUIRE(tuples.size() == 1);
  CHECK(tuples[0].token == 3);
  CHECK(tuples[0].gold_regions == std::vector<std::size_t>{1});
  auto bad = tuples;
  bad[0].token = 0;
  const model::Encoder enc(testing::tiny_config());
  CHECK_THROWS_WITH_AS(grounding_recall_at_k(enc, enc.init_params(0), examples, bad), doctest::Contains("not a concept mention"), MetricsError);
}

TEST_CASE("model evaluation scores every slice and round-trips through JSON") {
  data::DatasetConfig dc = data::DatasetConfig::benchmark();
  dc.scene_count = 3000;
  const auto dataset = data::build_dataset(dc);
  SplitSpec spec;
  spec.slices = {{"existence-dog", SliceMode::Composition, data::Skill::Existence, {*data::category_id("dog")}},
                 {"concept-cat", SliceMode::Concept, std::nullopt, {*data::category_id("cat")}}};
  spec.min_unlabeled = 5;
  spec.min_test = 5;
  const auto split = build_novel_splits(dataset, spec);
  const model::Encoder enc(testing::tiny_config());
  const auto params = enc.init_params(1);
  const auto report = evaluate_model(enc, params, dataset, split);
  CHECK(report.novel_slices == std::vector<std::string>{"existence-dog", "concept-cat"});
  REQUIRE(report.slices.count(kIidSlice) == 1);
  for (const auto& [name, s] : report.slices) {
    CHECK(s.accuracy >= 0.0);
    CHECK(s.accuracy <= 100.0);
    CHECK(s.size == split.test_indices(name).size());
  }
  CHECK(report.novel_mean == doctest::Approx((report.slices.at("existence-dog").accuracy + report.slices.at("concept-cat").accuracy) / 2));
  CHECK(report.metadata.at("split_hash") == split.hash());
  CHECK(report.recall.counted + report.recall.degenerate > 0);
  const auto back = MetricsReport::from_json(report.to_json());
  CHECK(back.to_json() == report.to_json());
  CHECK(evaluate_model(enc, params, dataset, split).to_json() == report.to_json());
  CHECK_THROWS_AS(MetricsReport::from_json("{\"metric\": 1}"), MetricsError);
}

TEST_CASE("ablation tables aggregate mean and sample deviation per arm") {
  auto cell = [](std::string arm, std::uint64_t seed, double novel, double recall) {
    AblationCell c;
    c.arm = std::move(arm);
    c.seed = seed;
    MetricsReport r;
    r.slices["a"] = {novel, 10};
    r.slices[kIidSlice] = {50.0, 10};
    r.novel_slices = {"a"};
    r.novel_mean = novel;
    r.recall.recall = recall;
    c.report = r;
    return c;
  };
  std::vector<AblationCell> cells{cell("Base", 0, 40, 70), cell("Base", 1, 44, 72), cell("Ours", 0, 50, 80)};
  AblationCell failed;
  failed.arm = "Ours";
  failed.seed = 1;
  failed.error = "loss diverged";
  cells.push_back(failed);
  const auto rows = aggregate(cells, {"Base", "Ours"});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].columns.at("novel").first == 42.0);
  CHECK(rows[0].columns.at("novel").second == doctest::Approx(std::sqrt(8.0)));
  CHECK(rows[0].columns.at("recall@5").first == 71.0);
  CHECK(rows[1].runs == 2);
  CHECK(rows[1].failures == 1);
  CHECK(rows[1].columns.at("novel").second == 0.0);
  const auto cols = table_columns({"a"});
  CHECK(cols == std::vector<std::string>{"a", "novel", "iid", "recall@5"});
  const auto text = render_table(rows, cols);
  CHECK(text.find("Base") != std::string::npos);
  CHECK(text.find("42.00 ±  2.83") != std::string::npos);
  CHECK(text.find("1 of 2 runs failed") != std::string::npos);
  const auto j = nlohmann::json::parse(table_json(rows, cells));
  CHECK(j.at("metric") == "exact-match accuracy");
  CHECK(j.at("rows").size() == 2);
  CHECK(j.at("cells").size() == 4);
  CHECK(j.at("cells")[3].at("error") == "loss diverged");
}

TEST_CASE("standard arms cover the ablation rows") {
  const auto arms = standard_arms(train::TrainConfig::desk());
  REQUIRE(arms.size() == 6);
  CHECK(arms[0].config.objective == train::Objective::Base);
  CHECK(arms[4].config.objective == train::Objective::Full);
  CHECK(arms[5].scheme == refmine::ReferenceScheme::Random);
  CHECK(arm_named(train::TrainConfig::desk(), "Base+L_g")->config.objective == train::Objective::Grounding);
  CHECK_FALSE(arm_named(train::TrainConfig::desk(), "Nope"));
}
