#include "sepvqa/data/question.hpp"

#include <cmath>
#include <limits>

namespace sepvqa::data {

void QuestionRecord::validate() const {
  const auto& vocab = TokenVocab::get();
  if (tokens.empty()) throw DataError("question has no tokens");
  for (TokenId t : tokens) vocab.word(t);
  for (const auto& m : mentions) {
    if (m.index >= tokens.size()) throw DataError("concept mention index " + std::to_string(m.index) + " out of range");
    if (tokens[m.index] != vocab.category_token(m.concept_id)) {
      throw DataError("token at mention index " + std::to_string(m.index) + " is not the word for its concept");
    }
  }
  if (labeled && !answer) throw DataError("labeled question without an answer");
  if (answer && (*answer < 0 || static_cast<std::size_t>(*answer) >= AnswerVocab::get().size())) {
    throw DataError("answer id out of range");
  }
}

std::string QuestionRecord::text() const {
  std::string out;
  for (TokenId t : tokens) {
    if (!out.empty()) out += ' ';
    out += TokenVocab::get().word(t);
  }
  return out;
}

std::vector<TokenId> tokenize(const std::vector<std::string>& words) {
  std::vector<TokenId> out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(TokenVocab::get().id(w));
  return out;
}

namespace {

std::optional<AnswerId> answer_for(const std::vector<SceneObject>& objects, Skill skill, ConceptId concept_id) {
  const auto& answers = AnswerVocab::get();
  std::vector<std::size_t> hits;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    if (objects[i].category == concept_id) hits.push_back(i);
  }
  switch (skill) {
    case Skill::Counting:
      return answers.count(static_cast<int>(hits.size()));
    case Skill::Existence:
      return hits.empty() ? answers.no() : answers.yes();
    default:
      break;
  }
  if (hits.size() != 1) return std::nullopt;
  const SceneObject& target = objects[hits.front()];
  switch (skill) {
    case Skill::Color:
      return answers.color(target.color);
    case Skill::Attribute:
      return target.large ? answers.yes() : answers.no();
    case Skill::Subcategory:
      return answers.supercategory(supercategory_of(concept_id));
    case Skill::Positional: {
      double best = std::numeric_limits<double>::infinity(), second = best;
      std::size_t nearest = 0;
      for (std::size_t i = 0; i < objects.size(); ++i) {
        if (i == hits.front()) continue;
        const double d = std::hypot(objects[i].x - target.x, objects[i].y - target.y);
        if (d < best) {
          second = best;
          best = d;
          nearest = i;
        } else if (d < second) {
          second = d;
        }
      }
      if (!std::isfinite(best) || second - best < kPositionalMargin) return std::nullopt;
      return answers.supercategory(supercategory_of(objects[nearest].category));
    }
    default:
      return std::nullopt;
  }
}

}  // namespace

std::optional<QuestionRecord> generate_question(const std::vector<SceneObject>& objects, Skill skill, ConceptId concept_id) {
  if (concept_id < 0 || static_cast<std::size_t>(concept_id) >= category_words().size()) {
    throw DataError("concept id " + std::to_string(concept_id) + " out of range");
  }
  const auto answer = answer_for(objects, skill, concept_id);
  if (!answer) return std::nullopt;
  const Template& t = template_for(skill);
  std::vector<std::string> words = t.words;
  words[t.slot()] = category_words()[static_cast<std::size_t>(concept_id)];
  QuestionRecord q;
  q.tokens = tokenize(words);
  q.skill = skill;
  q.mentions.push_back({t.slot(), concept_id});
  q.answer = answer;
  q.labeled = true;
  return q;
}

std::optional<QuestionRecord> generate_question(const Scene& scene, Skill skill, ConceptId concept_id) {
  return generate_question(scene.objects, skill, concept_id);
}

}  // namespace sepvqa::data
