#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "model_cases.hpp"
#include "sepvqa/num/checkpoint.hpp"
#include "sepvqa/train/trainer.hpp"
#include "sepvqa/util/hash.hpp"

using namespace sepvqa;
using namespace sepvqa::train;

namespace {

// 400 generated examples; the first 300 are labeled training data and all 400 form the target pool.
struct Fixture {
  std::vector<data::Example> examples;
  refmine::ReferenceCache refs;
  std::vector<std::size_t> labeled, pool;

  Fixture() {
    data::DatasetConfig dc;
    dc.scene_count = 400;
    dc.seed = 11;
    examples = data::build_dataset(dc);
    std::vector<data::QuestionRecord> qs;
    for (const auto& e : examples) qs.push_back(e.question);
    const auto lex = annotate::discover_concepts(qs, 1000);
    refmine::MiningConfig mc;
    mc.n_pos = 5;
    mc.n_neg = 10;
    mc.skill_pool = 20;
    mc.skill_negatives = 20;
    refs = refmine::mine_references(refmine::Corpus(examples, lex, refmine::ContextEmbedder(1)), mc, refmine::ReferenceScheme::Ccc);
    labeled.resize(300);
    std::iota(labeled.begin(), labeled.end(), 0);
    pool.resize(400);
    std::iota(pool.begin(), pool.end(), 0);
  }

  TrainingData data() const { return TrainingData(examples, labeled, pool, &refs); }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

TrainConfig tiny(Objective o = Objective::Full) {
  auto c = TrainConfig::desk();
  c.encoder = testing::tiny_config(1);
  c.objective = o;
  c.batch_size = 8;
  c.epochs = 1;
  c.decay_epochs = {};
  c.contrastive_targets = 2;
  return c;
}

std::string params_hash(const TrainState& s) { return util::hash_hex(num::encode_tensors(s.params)); }

std::string state_hash(const TrainState& s) { return util::hash_hex(num::encode_tensors(state_to_tensors(s))); }

std::filesystem::path temp_path(const std::string& name) { return std::filesystem::temp_directory_path() / ("sepvqa_trainer_" + name); }

}  // namespace

TEST_CASE("p_sep of zero reproduces the base run exactly") {
  const auto data = fixture().data();
  auto full = tiny(Objective::Full);
  full.p_sep = 0.0;
  auto base = tiny(Objective::Base);
  base.p_sep = 0.0;
  auto a = init_state(full), b = init_state(base);
  train::train(a, full, data);
  train::train(b, base, data);
  CHECK(a.counters.contrastive_updates == 0);
  CHECK(params_hash(a) == params_hash(b));
  CHECK(a.params == b.params);
}

TEST_CASE("p_sep of one fires the second update on every step") {
  const auto data = fixture().data();
  auto c = tiny(Objective::Grounding);
  c.p_sep = 1.0;
  c.batch_size = 1;
  c.contrastive_targets = 1;
  auto s = init_state(c);
  train::train(s, c, data, nullptr, 1000);
  REQUIRE(s.step == 300);
  c.epochs = 4;
  train::train(s, c, data, nullptr, 1000);
  CHECK(s.step == 1000);
  CHECK(s.counters.contrastive_updates + s.counters.skipped_targets == 1000);
  CHECK(s.counters.contrastive_updates >= 990);
}

TEST_CASE("the second update fires with frequency p_sep") {
  const auto data = fixture().data();
  auto c = tiny(Objective::Mlm);
  c.p_sep = 0.1;
  c.batch_size = 1;
  c.contrastive_targets = 1;
  auto s = init_state(c);
  const std::vector<std::size_t> batch{0};
  for (int i = 0; i < 10000; ++i) train_step(s, c, data, batch);
  const auto fired = s.counters.contrastive_updates + s.counters.skipped_targets;
  const double rate = static_cast<double>(fired) / 10000.0;
  CAPTURE(rate);
  CHECK(rate >= 0.08);
  CHECK(rate <= 0.12);
}

TEST_CASE("a small labeled set can be memorised") {
  const auto& f = fixture();
  std::vector<std::size_t> fifty(f.labeled.begin(), f.labeled.begin() + 50);
  const TrainingData data(f.examples, fifty, f.pool, &f.refs);
  auto c = TrainConfig::desk();
  c.objective = Objective::Base;
  c.encoder.hidden = 32;
  c.encoder.layers = 1;
  c.batch_size = 50;
  c.learning_rate = 3e-3;
  auto s = init_state(c);
  double loss = 1e9;
  std::size_t steps = 0;
  while (steps < 200 && loss >= 0.05) {
    loss = train_step(s, c, data, fifty).vqa_loss;
    ++steps;
  }
  CAPTURE(steps);
  CHECK(loss < 0.05);
}

TEST_CASE("same seed gives the same parameters and a different seed does not") {
  const auto data = fixture().data();
  auto c = tiny();
  c.p_sep = 0.5;
  auto a = init_state(c), b = init_state(c);
  train::train(a, c, data, nullptr, 15);
  train::train(b, c, data, nullptr, 15);
  CHECK(state_hash(a) == state_hash(b));
  c.seed = 1;
  auto d = init_state(c);
  train::train(d, c, data, nullptr, 15);
  CHECK(params_hash(a) != params_hash(d));
}

TEST_CASE("checkpoints round-trip the whole training state") {
  const auto data = fixture().data();
  auto c = tiny();
  c.p_sep = 0.5;
  auto s = init_state(c);
  train::train(s, c, data, nullptr, 7);
  const auto path = temp_path("roundtrip.ckpt");
  save_checkpoint(s, path);
  const auto r = load_checkpoint(path);
  CHECK(r.params == s.params);
  CHECK(r.adam.first_moment == s.adam.first_moment);
  CHECK(r.adam.second_moment == s.adam.second_moment);
  CHECK(r.adam.step == s.adam.step);
  CHECK(r.adam.config.learning_rate == s.adam.config.learning_rate);
  CHECK(r.step == s.step);
  CHECK(r.epoch == s.epoch);
  CHECK(r.batch_in_epoch == s.batch_in_epoch);
  CHECK(r.counters == s.counters);
  CHECK(r.sep_rng.state_words() == s.sep_rng.state_words());
  std::filesystem::remove(path);
}

TEST_CASE("resuming from a checkpoint matches an uninterrupted run") {
  const auto data = fixture().data();
  auto c = tiny();
  c.p_sep = 0.4;
  c.epochs = 2;
  c.decay_epochs = {1};
  auto straight = init_state(c);
  std::ostringstream log_straight;
  train::train(straight, c, data, &log_straight);
  for (std::uint64_t cut : {1u, 20u, 38u, 60u}) {
    auto first = init_state(c);
    std::ostringstream log;
    train::train(first, c, data, &log, cut);
    const auto path = temp_path("resume.ckpt");
    save_checkpoint(first, path);
    auto resumed = load_checkpoint(path);
    train::train(resumed, c, data, &log);
    std::filesystem::remove(path);
    CAPTURE(cut);
    CHECK(state_hash(resumed) == state_hash(straight));
    CHECK(log.str() == log_straight.str());
  }
}

TEST_CASE("corrupt or incomplete checkpoints are rejected") {
  const auto path = temp_path("corrupt.ckpt");
  {
    std::ofstream out(path, std::ios::binary);
    out << "not a checkpoint";
  }
  CHECK_THROWS(load_checkpoint(path));
  auto s = init_state(tiny());
  auto t = state_to_tensors(s);
  t.erase("state/rng");
  CHECK_THROWS_AS(state_from_tensors(t), TrainError);
  t = state_to_tensors(s);
  t.at("state/scalars") = num::Tensor({3});
  CHECK_THROWS_AS(state_from_tensors(t), TrainError);
  t = state_to_tensors(s);
  t.emplace("stray", num::Tensor({1}));
  CHECK_THROWS_AS(state_from_tensors(t), TrainError);
  std::filesystem::remove(path);
  CHECK_THROWS(load_checkpoint(path));
}

TEST_CASE("unlabeled examples never reach the VQA loss") {
  const auto& f = fixture();
  auto examples = f.examples;
  examples[3].question.labeled = false;
  examples[3].question.answer.reset();
  const TrainingData data(examples, f.labeled, f.pool, &f.refs);
  auto c = tiny();
  auto s = init_state(c);
  CHECK_THROWS_WITH_AS(train_step(s, c, data, {1, 3}), doctest::Contains("has no label"), TrainError);
  CHECK(s.counters.unlabeled_vqa == 1);
}

TEST_CASE("contrastive targets come from the pool and missing references are counted") {
  const auto& f = fixture();
  {
    const auto data = f.data();
    auto c = tiny();
    c.p_sep = 1.0;
    auto s = init_state(c);
    std::ostringstream log;
    train::train(s, c, data, &log, 20);
    CHECK(s.counters.targets_outside_pool == 0);
    CHECK(s.counters.contrastive_targets + s.counters.skipped_targets == 40);
    CHECK(s.counters.vqa_examples == 160);
    std::istringstream in(log.str());
    std::string line;
    std::size_t vqa = 0, full = 0;
    while (std::getline(in, line)) {
      const auto j = nlohmann::json::parse(line);
      vqa += j.at("kind") == "vqa";
      full += j.at("kind") == "full";
      if (j.at("kind") == "full") CHECK(std::isfinite(j.at("value").get<double>()));
    }
    CHECK(vqa == 20);
    CHECK(full == s.counters.contrastive_updates);
  }
  {
    const refmine::ReferenceCache empty;
    const TrainingData data(f.examples, f.labeled, f.pool, &empty);
    auto c = tiny();
    c.p_sep = 1.0;
    auto s = init_state(c);
    std::ostringstream log;
    train::train(s, c, data, &log, 3);
    CHECK(s.counters.skipped_targets == 6);
    CHECK(s.counters.contrastive_updates == 0);
    CHECK(log.str().find("\"skip\"") != std::string::npos);
  }
}

TEST_CASE("learning rate decays at the configured epochs") {
  const auto p = TrainConfig::paper();
  CHECK(p.learning_rate_at(0) == 1e-4);
  CHECK(p.learning_rate_at(9) == 1e-4);
  CHECK(p.learning_rate_at(10) == doctest::Approx(2e-5));
  CHECK(p.learning_rate_at(12) == doctest::Approx(4e-6));
  CHECK(p.encoder.hidden == 512);
  CHECK(p.epochs == 13);
  CHECK(p.batch_size == 64);
}

TEST_CASE("flat configs parse and apply") {
  const auto pairs = parse_flat_config("# comment\n objective = skill  \n\np_sep=0.25 # inline\ndecay_epochs = 1, 2\nhidden = 32\nplural_attention = false\n");
  REQUIRE(pairs.size() == 5);
  auto c = TrainConfig::desk();
  for (const auto& [k, v] : pairs) c.set(k, v);
  CHECK(c.objective == Objective::Skill);
  CHECK(c.p_sep == 0.25);
  CHECK(c.decay_epochs == std::vector<std::size_t>{1, 2});
  CHECK(c.encoder.hidden == 32);
  CHECK_FALSE(c.encoder.plural_attention);
  const auto back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK_THROWS_WITH_AS(parse_flat_config("a = 1\nbroken line\n"), doctest::Contains("line 2"), TrainError);
  CHECK_THROWS_WITH_AS(c.set("learning_rte", "1"), doctest::Contains("unknown config key"), TrainError);
  CHECK_THROWS_AS(c.set("epochs", "-3"), TrainError);
  CHECK_THROWS_AS(c.set("p_sep", "often"), TrainError);
  CHECK_THROWS_AS(c.set("objective", "everything"), TrainError);
  c.set("p_sep", "1.5");
  CHECK_THROWS_AS(c.validate(), TrainError);
  CHECK_THROWS_AS(TrainConfig::from_json("{}"), TrainError);
  for (auto o : {Objective::Base, Objective::Full, Objective::Grounding, Objective::Skill, Objective::Mlm}) {
    CHECK(parse_objective(objective_name(o)) == o);
  }
}
