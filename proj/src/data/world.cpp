#include "sepvqa/data/world.hpp"

#include <algorithm>

namespace sepvqa::data {

namespace {

struct CategoryDef {
  const char* word;
  int super;
};

const std::vector<CategoryDef>& category_defs() {
  static const std::vector<CategoryDef> defs = {
      {"dog", 0},    {"cat", 0},    {"horse", 0},   {"sheep", 0},  {"car", 1},   {"bus", 1},    {"truck", 1},
      {"bike", 1},   {"laptop", 2}, {"phone", 2},   {"monitor", 2}, {"camera", 2}, {"plate", 3}, {"bowl", 3},
      {"cup", 3},    {"fork", 3},   {"apple", 4},   {"banana", 4}, {"pizza", 4}, {"cake", 4},
  };
  return defs;
}

template <typename C>
std::optional<int> index_of(const C& words, std::string_view w) {
  auto it = std::find(words.begin(), words.end(), w);
  if (it == words.end()) return std::nullopt;
  return static_cast<int>(it - words.begin());
}

}  // namespace

std::string_view skill_name(Skill skill) {
  switch (skill) {
    case Skill::Counting: return "counting";
    case Skill::Color: return "color";
    case Skill::Subcategory: return "subcategory";
    case Skill::Attribute: return "attribute";
    case Skill::Positional: return "positional";
    case Skill::Existence: return "existence";
  }
  return "unknown";
}

std::optional<Skill> parse_skill(std::string_view name) {
  for (Skill s : all_skills()) {
    if (skill_name(s) == name) return s;
  }
  return std::nullopt;
}

const std::vector<Skill>& all_skills() {
  static const std::vector<Skill> skills = {Skill::Counting,  Skill::Color,      Skill::Subcategory,
                                            Skill::Attribute, Skill::Positional, Skill::Existence};
  return skills;
}

const std::vector<std::string>& category_words() {
  static const std::vector<std::string> words = [] {
    std::vector<std::string> w;
    for (const auto& d : category_defs()) w.emplace_back(d.word);
    return w;
  }();
  return words;
}

const std::vector<std::string>& supercategory_words() {
  static const std::vector<std::string> words = {"animal", "vehicle", "electronics", "dishware", "food"};
  return words;
}

const std::vector<std::string>& color_words() {
  static const std::vector<std::string> words = {"red", "blue", "green", "yellow", "white", "black", "brown", "gray"};
  return words;
}

int supercategory_of(ConceptId category) {
  if (category < 0 || static_cast<std::size_t>(category) >= category_defs().size()) {
    throw DataError("category id " + std::to_string(category) + " out of range");
  }
  return category_defs()[static_cast<std::size_t>(category)].super;
}

std::vector<ConceptId> categories_in(int supercategory) {
  std::vector<ConceptId> out;
  for (std::size_t c = 0; c < category_defs().size(); ++c) {
    if (category_defs()[c].super == supercategory) out.push_back(static_cast<ConceptId>(c));
  }
  return out;
}

std::optional<ConceptId> category_id(std::string_view word) { return index_of(category_words(), word); }
std::optional<int> supercategory_id(std::string_view word) { return index_of(supercategory_words(), word); }
std::optional<int> color_id(std::string_view word) { return index_of(color_words(), word); }

AnswerVocab::AnswerVocab() {
  for (int n = 0; n <= kMaxCount; ++n) words_.push_back(std::to_string(n));
  for (const auto& c : color_words()) words_.push_back(c);
  for (const auto& s : supercategory_words()) words_.push_back(s);
  words_.emplace_back("yes");
  words_.emplace_back("no");
}

const AnswerVocab& AnswerVocab::get() {
  static const AnswerVocab vocab;
  return vocab;
}

std::optional<AnswerId> AnswerVocab::find(std::string_view word) const { return index_of(words_, word); }

AnswerId AnswerVocab::count(int n) const {
  if (n < 0 || n > kMaxCount) throw DataError("count " + std::to_string(n) + " outside the answer vocabulary");
  return n;
}
AnswerId AnswerVocab::color(int color) const { return kMaxCount + 1 + color; }
AnswerId AnswerVocab::supercategory(int super) const {
  return kMaxCount + 1 + static_cast<int>(color_words().size()) + super;
}
AnswerId AnswerVocab::yes() const { return static_cast<AnswerId>(words_.size()) - 2; }
AnswerId AnswerVocab::no() const { return static_cast<AnswerId>(words_.size()) - 1; }

std::size_t Template::slot() const {
  return static_cast<std::size_t>(std::find(words.begin(), words.end(), "{c}") - words.begin());
}

std::size_t Template::filler_count() const {
  return static_cast<std::size_t>(std::count_if(words.begin(), words.end(), [&](const std::string& w) {
    return w != "{c}" && std::find(cues.begin(), cues.end(), w) == cues.end();
  }));
}

const std::vector<Template>& templates() {
  static const std::vector<Template> t = {
      {Skill::Counting, {"how", "many", "{c}", "are", "in", "the", "picture"}, 2, {"how", "many"}},
      {Skill::Color, {"what", "color", "is", "the", "{c}"}, 2, {"what", "color"}},
      {Skill::Subcategory, {"what", "kind", "of", "thing", "is", "the", "{c}"}, 2, {"what", "kind"}},
      {Skill::Attribute, {"is", "the", "{c}", "large"}, 2, {"large"}},
      {Skill::Positional, {"what", "is", "nearest", "to", "the", "{c}"}, 3, {"what", "nearest"}},
      {Skill::Existence, {"is", "there", "a", "{c}", "in", "the", "image"}, 2, {"is", "there"}},
  };
  return t;
}

const Template& template_for(Skill skill) {
  for (const auto& t : templates()) {
    if (t.skill == skill) return t;
  }
  throw DataError("no template for skill " + std::string(skill_name(skill)));
}

TokenVocab::TokenVocab() {
  words_.emplace_back(kMaskWord);
  for (const auto& t : templates()) {
    for (const auto& w : t.words) {
      if (w != "{c}" && std::find(words_.begin(), words_.end(), w) == words_.end()) words_.push_back(w);
    }
  }
  for (const auto& c : category_words()) words_.push_back(c);
}

const TokenVocab& TokenVocab::get() {
  static const TokenVocab vocab;
  return vocab;
}

const std::string& TokenVocab::word(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) throw DataError("token id " + std::to_string(id) + " out of vocabulary");
  return words_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> TokenVocab::find(std::string_view word) const { return index_of(words_, word); }

TokenId TokenVocab::id(std::string_view word) const {
  auto t = find(word);
  if (!t) throw DataError("unknown token '" + std::string(word) + "'");
  return *t;
}

TokenId TokenVocab::category_token(ConceptId category) const {
  return static_cast<TokenId>(words_.size() - category_words().size()) + category;
}

std::optional<ConceptId> TokenVocab::category_of(TokenId token) const {
  const auto first = static_cast<TokenId>(words_.size() - category_words().size());
  if (token >= first && static_cast<std::size_t>(token) < words_.size()) return token - first;
  return std::nullopt;
}

const std::vector<std::string>& noun_words() {
  static const std::vector<std::string> nouns = [] {
    std::vector<std::string> n = category_words();
    for (const char* w : {"picture", "image", "thing", "kind", "color"}) n.emplace_back(w);
    return n;
  }();
  return nouns;
}

const std::vector<std::string>& default_stoplist() {
  static const std::vector<std::string> stop = {"color", "image", "kind", "photo", "picture", "thing", "time"};
  return stop;
}

}  // namespace sepvqa::data
