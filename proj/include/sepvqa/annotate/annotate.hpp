#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sepvqa/data/question.hpp"

namespace sepvqa::annotate {

using data::ConceptId;
using data::ConceptMention;
using data::Skill;
using data::TokenId;

struct LexiconEntry {
  std::string word;
  std::size_t frequency = 0;
  bool groundable = false;
  std::optional<std::string> supercategory;

  friend bool operator==(const LexiconEntry&, const LexiconEntry&) = default;
};

/// Frequency-ranked concept nouns. Only groundable entries are usable as grounding targets.
class ConceptLexicon {
 public:
  ConceptLexicon() = default;
  ConceptLexicon(std::vector<LexiconEntry> entries, std::vector<std::string> stoplist);

  const std::vector<LexiconEntry>& entries() const { return entries_; }
  const std::vector<std::string>& stoplist() const { return stoplist_; }
  std::size_t size() const { return entries_.size(); }

  /// Concept named by a token if that token is a groundable lexicon word.
  std::optional<ConceptId> concept_of(TokenId token) const;
  bool contains(std::string_view word) const;

  std::string to_json() const;
  static ConceptLexicon from_json(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static ConceptLexicon load(const std::filesystem::path& path);

  friend bool operator==(const ConceptLexicon&, const ConceptLexicon&) = default;

 private:
  std::vector<LexiconEntry> entries_;
  std::vector<std::string> stoplist_;
  std::vector<std::optional<ConceptId>> token_concept_;
};

/// Counts noun tokens over the corpus, drops stoplisted words and keeps the `top_k` most
/// frequent, ties broken alphabetically.
ConceptLexicon discover_concepts(const std::vector<data::QuestionRecord>& questions, std::size_t top_k,
                                 const std::vector<std::string>& stoplist = data::default_stoplist());

/// Skill from the question's leading words; nothing when no template prefix matches.
std::optional<Skill> label_skill(const std::vector<TokenId>& tokens);
std::optional<Skill> label_skill(const data::QuestionRecord& question);

/// Every position holding a groundable lexicon word, in token order.
std::vector<ConceptMention> find_concept_mentions(const std::vector<TokenId>& tokens, const ConceptLexicon& lexicon);

struct MaskedQuestion {
  std::vector<TokenId> tokens;
  std::size_t position = 0;
  ConceptId concept_id = 0;
  TokenId original = 0;
};

/// Replaces the mention at `position` by the mask token. Throws if `position` is not a mention.
MaskedQuestion mask_concept(const std::vector<TokenId>& tokens, const std::vector<ConceptMention>& mentions,
                            std::size_t position);
std::vector<TokenId> unmask(const MaskedQuestion& masked);
/// Masks every mention, as used for concept-free question context.
std::vector<TokenId> mask_all_concepts(const std::vector<TokenId>& tokens, const std::vector<ConceptMention>& mentions);

}  // namespace sepvqa::annotate
