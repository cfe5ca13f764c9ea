#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sepvqa::data {

/// Raised for malformed configs, records and files in the data layer.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Skill { Counting, Color, Subcategory, Attribute, Positional, Existence };
inline constexpr std::size_t kSkillCount = 6;

std::string_view skill_name(Skill skill);
std::optional<Skill> parse_skill(std::string_view name);
const std::vector<Skill>& all_skills();

using ConceptId = int;
using TokenId = int;
using AnswerId = int;

// The closed synthetic world: object categories grouped into supercategories, colors,
// and the answer vocabulary shared by every question template.
const std::vector<std::string>& category_words();
const std::vector<std::string>& supercategory_words();
const std::vector<std::string>& color_words();
int supercategory_of(ConceptId category);
std::vector<ConceptId> categories_in(int supercategory);
std::optional<ConceptId> category_id(std::string_view word);
std::optional<int> supercategory_id(std::string_view word);
std::optional<int> color_id(std::string_view word);

inline constexpr int kMaxCount = 8;

/// Answers: counts 0..8, colors, supercategories, yes, no.
class AnswerVocab {
 public:
  static const AnswerVocab& get();
  std::size_t size() const { return words_.size(); }
  const std::string& word(AnswerId id) const { return words_.at(static_cast<std::size_t>(id)); }
  std::optional<AnswerId> find(std::string_view word) const;
  AnswerId count(int n) const;
  AnswerId color(int color) const;
  AnswerId supercategory(int super) const;
  AnswerId yes() const;
  AnswerId no() const;

 private:
  AnswerVocab();
  std::vector<std::string> words_;
};

/// One surface form per skill; the slot is the word "{c}". `prefix` leading words identify the
/// skill, and `cues` are the words carrying the skill; every other non-slot word is filler.
struct Template {
  Skill skill;
  std::vector<std::string> words;
  std::size_t prefix;
  std::vector<std::string> cues;
  std::size_t slot() const;
  std::size_t filler_count() const;
};
const std::vector<Template>& templates();
const Template& template_for(Skill skill);

inline constexpr TokenId kMaskToken = 0;
inline constexpr std::string_view kMaskWord = "[MASK]";

/// Token vocabulary: the mask token, every template word in order of first use, then categories.
class TokenVocab {
 public:
  static const TokenVocab& get();
  std::size_t size() const { return words_.size(); }
  const std::string& word(TokenId id) const;
  std::optional<TokenId> find(std::string_view word) const;
  TokenId id(std::string_view word) const;
  TokenId category_token(ConceptId category) const;
  /// Category of a token, if it names one.
  std::optional<ConceptId> category_of(TokenId token) const;

 private:
  TokenVocab();
  std::vector<std::string> words_;
};

/// Nouns of the synthetic language: every category plus the non-visual nouns used by templates.
const std::vector<std::string>& noun_words();
/// Nouns that can never be grounded to a region.
const std::vector<std::string>& default_stoplist();

}  // namespace sepvqa::data
