#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sepvqa/data/scene.hpp"
#include "sepvqa/data/world.hpp"

namespace sepvqa::data {

struct ConceptMention {
  std::size_t index = 0;
  ConceptId concept_id = 0;

  friend bool operator==(const ConceptMention&, const ConceptMention&) = default;
};

struct QuestionRecord {
  std::vector<TokenId> tokens;
  Skill skill = Skill::Counting;
  std::vector<ConceptMention> mentions;
  std::optional<AnswerId> answer;
  bool labeled = true;

  /// Throws DataError unless mentions point at their concept words and labels carry answers.
  void validate() const;
  std::string text() const;

  friend bool operator==(const QuestionRecord&, const QuestionRecord&) = default;
};

/// Minimum gap between the nearest and second-nearest neighbour for a positional question.
inline constexpr double kPositionalMargin = 0.05;

/// Fills the skill's template with `concept_id` and answers it from the scene, or returns
/// nothing when the pair is not answerable unambiguously:
///   color, attribute, subcategory and positional need exactly one instance of the concept;
///   positional additionally needs a clear nearest neighbour.
std::optional<QuestionRecord> generate_question(const std::vector<SceneObject>& objects, Skill skill, ConceptId concept_id);
std::optional<QuestionRecord> generate_question(const Scene& scene, Skill skill, ConceptId concept_id);

std::vector<TokenId> tokenize(const std::vector<std::string>& words);

}  // namespace sepvqa::data
