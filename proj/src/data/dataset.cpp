#include "sepvqa/data/dataset.hpp"

#include <fstream>

#include "json.hpp"

namespace sepvqa::data {

using nlohmann::json;

std::vector<std::pair<Skill, ConceptId>> unreachable_compositions(const DatasetConfig& config) {
  std::vector<std::pair<Skill, ConceptId>> out;
  for (Skill s : all_skills()) {
    for (std::size_t c = 0; c < category_words().size(); ++c) {
      const auto concept_id = static_cast<ConceptId>(c);
      if (config.composition_weight(s, concept_id) <= 0.0) continue;
      const bool needs_presence = s != Skill::Existence && !(s == Skill::Counting && config.counting_presence == 0.0);
      const bool absent = config.category_weight(concept_id) <= 0.0;
      const bool positional_impossible = s == Skill::Positional && config.max_objects < 2;
      if ((needs_presence && absent) || positional_impossible) out.emplace_back(s, concept_id);
    }
  }
  return out;
}

namespace {

std::string describe(const std::vector<std::pair<Skill, ConceptId>>& pairs) {
  std::string text;
  for (const auto& [s, c] : pairs) {
    if (!text.empty()) text += ", ";
    text += "(" + std::string(skill_name(s)) + ", " + category_words()[static_cast<std::size_t>(c)] + ")";
  }
  return text;
}

}  // namespace

std::vector<Example> build_dataset(const DatasetConfig& config) {
  config.validate();
  if (auto bad = unreachable_compositions(config); !bad.empty()) {
    throw DataError("infeasible dataset config, unreachable compositions: " + describe(bad));
  }
  std::vector<std::pair<Skill, ConceptId>> cells;
  std::vector<double> weights;
  for (Skill s : all_skills()) {
    for (std::size_t c = 0; c < category_words().size(); ++c) {
      cells.emplace_back(s, static_cast<ConceptId>(c));
      weights.push_back(config.composition_weight(s, static_cast<ConceptId>(c)));
    }
  }
  const FeatureRenderer renderer(config);
  const auto& answers = AnswerVocab::get();

  std::vector<Example> out;
  out.reserve(config.scene_count);
  for (std::size_t i = 0; i < config.scene_count; ++i) {
    num::Rng rng(num::derive_seed(config.seed, "example", i));
    const auto [skill, concept_id] = cells[rng.categorical(weights)];
    std::optional<AnswerId> wanted;
    bool want_present = false;
    if (skill == Skill::Counting) want_present = rng.bernoulli(config.counting_presence);
    if (skill == Skill::Existence) wanted = rng.bernoulli(config.existence_yes) ? answers.yes() : answers.no();

    bool done = false;
    for (std::size_t attempt = 0; attempt < config.max_attempts && !done; ++attempt) {
      auto objects = sample_objects(config, rng);
      auto q = generate_question(objects, skill, concept_id);
      if (!q) continue;
      if (wanted && q->answer != wanted) continue;
      if (skill == Skill::Counting && want_present != (*q->answer != answers.count(0))) continue;
      Example ex;
      ex.id = i;
      ex.scene.objects = std::move(objects);
      ex.scene.regions = renderer.render(ex.scene.objects, rng);
      ex.question = std::move(*q);
      out.push_back(std::move(ex));
      done = true;
    }
    if (!done) {
      throw DataError("example " + std::to_string(i) + ": no scene realised " + describe({{skill, concept_id}}) + " within " +
                      std::to_string(config.max_attempts) + " attempts");
    }
  }
  return out;
}

std::string example_to_json(const Example& ex) {
  const auto& vocab = TokenVocab::get();
  json j;
  j["id"] = ex.id;
  j["scene_id"] = ex.id;
  json regions = json::array();
  for (std::size_t r = 0; r < ex.scene.regions.rows(); ++r) {
    json row = json::array();
    for (std::size_t c = 0; c < ex.scene.regions.cols(); ++c) row.push_back(ex.scene.regions.at(r, c));
    regions.push_back(std::move(row));
  }
  j["regions"] = std::move(regions);
  json objects = json::array();
  for (const auto& o : ex.scene.objects) {
    objects.push_back({{"category", category_words()[static_cast<std::size_t>(o.category)]},
                       {"color", color_words()[static_cast<std::size_t>(o.color)]},
                       {"size", o.large ? "large" : "small"},
                       {"x", o.x},
                       {"y", o.y}});
  }
  j["objects"] = std::move(objects);
  json tokens = json::array();
  for (TokenId t : ex.question.tokens) tokens.push_back(vocab.word(t));
  j["tokens"] = std::move(tokens);
  j["skill"] = std::string(skill_name(ex.question.skill));
  json mentions = json::array();
  for (const auto& m : ex.question.mentions) {
    mentions.push_back({{"index", m.index}, {"concept", category_words()[static_cast<std::size_t>(m.concept_id)]}});
  }
  j["concept_mentions"] = std::move(mentions);
  j["answer"] = ex.question.answer ? json(AnswerVocab::get().word(*ex.question.answer)) : json(nullptr);
  j["labeled"] = ex.question.labeled;
  return j.dump();
}

namespace {

template <typename T>
T lookup(std::optional<T> value, const std::string& what, const std::string& word) {
  if (!value) throw DataError("unknown " + what + " '" + word + "'");
  return *value;
}

}  // namespace

Example example_from_json(const std::string& line) {
  Example ex;
  try {
    const json j = json::parse(line);
    ex.id = j.at("id").get<std::uint64_t>();
    const auto& regions = j.at("regions");
    const auto& objects = j.at("objects");
    if (regions.empty() || regions.size() != objects.size()) throw DataError("regions and objects must be nonempty and equal in number");
    const std::size_t dim = regions.at(0).size();
    ex.scene.regions = num::Tensor({regions.size(), dim});
    for (std::size_t r = 0; r < regions.size(); ++r) {
      if (regions[r].size() != dim) throw DataError("ragged region features");
      for (std::size_t c = 0; c < dim; ++c) ex.scene.regions.at(r, c) = regions[r][c].get<double>();
    }
    for (const auto& o : objects) {
      SceneObject so;
      const auto cat = o.at("category").get<std::string>();
      so.category = lookup(category_id(cat), "category", cat);
      const auto col = o.at("color").get<std::string>();
      so.color = lookup(color_id(col), "color", col);
      const auto size = o.at("size").get<std::string>();
      if (size != "large" && size != "small") throw DataError("unknown size '" + size + "'");
      so.large = size == "large";
      so.x = o.at("x").get<double>();
      so.y = o.at("y").get<double>();
      if (so.x < 0.0 || so.x > 1.0 || so.y < 0.0 || so.y > 1.0) throw DataError("object position outside the unit square");
      ex.scene.objects.push_back(so);
    }
    for (const auto& t : j.at("tokens")) ex.question.tokens.push_back(TokenVocab::get().id(t.get<std::string>()));
    const auto skill = j.at("skill").get<std::string>();
    ex.question.skill = lookup(parse_skill(skill), "skill", skill);
    for (const auto& m : j.at("concept_mentions")) {
      const auto word = m.at("concept").get<std::string>();
      ex.question.mentions.push_back({m.at("index").get<std::size_t>(), lookup(category_id(word), "concept", word)});
    }
    if (!j.at("answer").is_null()) {
      const auto word = j.at("answer").get<std::string>();
      ex.question.answer = lookup(AnswerVocab::get().find(word), "answer", word);
    }
    ex.question.labeled = j.at("labeled").get<bool>();
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed example: ") + e.what());
  } catch (const num::TensorError& e) {
    throw DataError(std::string("malformed example: ") + e.what());
  }
  ex.question.validate();
  return ex;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<Example>& examples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  for (const auto& ex : examples) out << example_to_json(ex) << '\n';
  if (!out) throw DataError("failed writing " + path.string());
}

std::vector<Example> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<Example> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(example_from_json(line));
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace sepvqa::data
