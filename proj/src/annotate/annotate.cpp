#include "sepvqa/annotate/annotate.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace sepvqa::annotate {

using nlohmann::json;

ConceptLexicon::ConceptLexicon(std::vector<LexiconEntry> entries, std::vector<std::string> stoplist)
    : entries_(std::move(entries)), stoplist_(std::move(stoplist)) {
  const auto& vocab = data::TokenVocab::get();
  token_concept_.assign(vocab.size(), std::nullopt);
  for (const auto& e : entries_) {
    if (!e.groundable) continue;
    const auto cat = data::category_id(e.word);
    const auto tok = vocab.find(e.word);
    if (cat && tok) token_concept_[static_cast<std::size_t>(*tok)] = *cat;
  }
}

std::optional<ConceptId> ConceptLexicon::concept_of(TokenId token) const {
  if (token < 0 || static_cast<std::size_t>(token) >= token_concept_.size()) return std::nullopt;
  return token_concept_[static_cast<std::size_t>(token)];
}

bool ConceptLexicon::contains(std::string_view word) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const LexiconEntry& e) { return e.word == word; });
}

std::string ConceptLexicon::to_json() const {
  json concepts = json::array();
  for (const auto& e : entries_) {
    concepts.push_back({{"word", e.word},
                        {"frequency", e.frequency},
                        {"groundable", e.groundable},
                        {"supercategory", e.supercategory ? json(*e.supercategory) : json(nullptr)}});
  }
  return json{{"concepts", concepts}, {"stoplist", stoplist_}}.dump(2);
}

ConceptLexicon ConceptLexicon::from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    std::vector<LexiconEntry> entries;
    for (const auto& c : j.at("concepts")) {
      LexiconEntry e;
      e.word = c.at("word").get<std::string>();
      e.frequency = c.at("frequency").get<std::size_t>();
      e.groundable = c.at("groundable").get<bool>();
      if (!c.at("supercategory").is_null()) e.supercategory = c.at("supercategory").get<std::string>();
      entries.push_back(std::move(e));
    }
    return ConceptLexicon(std::move(entries), j.at("stoplist").get<std::vector<std::string>>());
  } catch (const json::exception& e) {
    throw data::DataError(std::string("malformed lexicon: ") + e.what());
  }
}

void ConceptLexicon::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data::DataError("cannot open " + path.string() + " for writing");
  out << to_json() << '\n';
}

ConceptLexicon ConceptLexicon::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data::DataError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

ConceptLexicon discover_concepts(const std::vector<data::QuestionRecord>& questions, std::size_t top_k,
                                 const std::vector<std::string>& stoplist) {
  if (questions.empty()) throw data::DataError("cannot discover concepts in an empty corpus");
  const auto& vocab = data::TokenVocab::get();
  const auto& nouns = data::noun_words();
  std::map<std::string, std::size_t> freq;
  for (const auto& q : questions) {
    for (TokenId t : q.tokens) {
      const std::string& w = vocab.word(t);
      if (std::find(nouns.begin(), nouns.end(), w) == nouns.end()) continue;
      if (std::find(stoplist.begin(), stoplist.end(), w) != stoplist.end()) continue;
      ++freq[w];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > top_k) ranked.resize(top_k);
  std::vector<LexiconEntry> entries;
  for (const auto& [w, f] : ranked) {
    LexiconEntry e;
    e.word = w;
    e.frequency = f;
    const auto cat = data::category_id(w);
    e.groundable = cat.has_value();
    if (cat) e.supercategory = data::supercategory_words()[static_cast<std::size_t>(data::supercategory_of(*cat))];
    entries.push_back(std::move(e));
  }
  return ConceptLexicon(std::move(entries), stoplist);
}

std::optional<Skill> label_skill(const std::vector<TokenId>& tokens) {
  const auto& vocab = data::TokenVocab::get();
  // Longest prefix first so "what is nearest" is not shadowed by a shorter pattern.
  std::vector<const data::Template*> order;
  for (const auto& t : data::templates()) order.push_back(&t);
  std::stable_sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->prefix > b->prefix; });
  for (const auto* t : order) {
    if (tokens.size() < t->prefix) continue;
    bool match = true;
    for (std::size_t i = 0; i < t->prefix && match; ++i) match = vocab.word(tokens[i]) == t->words[i];
    if (match) return t->skill;
  }
  return std::nullopt;
}

std::optional<Skill> label_skill(const data::QuestionRecord& question) { return label_skill(question.tokens); }

std::vector<ConceptMention> find_concept_mentions(const std::vector<TokenId>& tokens, const ConceptLexicon& lexicon) {
  std::vector<ConceptMention> out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (auto c = lexicon.concept_of(tokens[i])) out.push_back({i, *c});
  }
  return out;
}

MaskedQuestion mask_concept(const std::vector<TokenId>& tokens, const std::vector<ConceptMention>& mentions,
                            std::size_t position) {
  auto it = std::find_if(mentions.begin(), mentions.end(), [&](const ConceptMention& m) { return m.index == position; });
  if (it == mentions.end() || position >= tokens.size()) {
    throw data::DataError("position " + std::to_string(position) + " is not a concept mention");
  }
  MaskedQuestion m;
  m.tokens = tokens;
  m.position = position;
  m.concept_id = it->concept_id;
  m.original = tokens[position];
  m.tokens[position] = data::kMaskToken;
  return m;
}

std::vector<TokenId> unmask(const MaskedQuestion& masked) {
  std::vector<TokenId> out = masked.tokens;
  out.at(masked.position) = masked.original;
  return out;
}

std::vector<TokenId> mask_all_concepts(const std::vector<TokenId>& tokens, const std::vector<ConceptMention>& mentions) {
  std::vector<TokenId> out = tokens;
  for (const auto& m : mentions) out.at(m.index) = data::kMaskToken;
  return out;
}

}  // namespace sepvqa::annotate
