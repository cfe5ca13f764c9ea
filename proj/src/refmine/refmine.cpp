#include "sepvqa/refmine/refmine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace sepvqa::refmine {

ContextEmbedder::ContextEmbedder(std::uint64_t seed, std::size_t dim) : dim_(dim), table_({data::TokenVocab::get().size(), dim}) {
  if (dim == 0) throw MiningError("embedding dimension must be positive");
  num::Rng rng(num::derive_seed(seed, "context-embedder"));
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  for (std::size_t t = 0; t < table_.rows(); ++t) {
    for (std::size_t j = 0; j < dim; ++j) {
      const double v = scale * rng.normal();
      table_.at(t, j) = t == static_cast<std::size_t>(data::kMaskToken) ? 0.0 : v;
    }
  }
}

std::vector<double> ContextEmbedder::question(const std::vector<TokenId>& tokens) const {
  if (tokens.empty()) throw MiningError("cannot embed an empty question");
  std::vector<double> q(dim_, 0.0);
  for (TokenId t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= table_.rows()) throw MiningError("token id out of vocabulary");
    for (std::size_t j = 0; j < dim_; ++j) q[j] += table_.at(static_cast<std::size_t>(t), j);
  }
  for (auto& v : q) v /= static_cast<double>(tokens.size());
  return q;
}

std::vector<double> ContextEmbedder::image(const num::Tensor& regions) const {
  if (regions.rank() != 2 || regions.rows() == 0) throw MiningError("scene has no regions");
  std::vector<double> v(regions.cols(), 0.0);
  for (std::size_t r = 0; r < regions.rows(); ++r) {
    for (std::size_t j = 0; j < regions.cols(); ++j) v[j] += regions.at(r, j);
  }
  for (auto& x : v) x /= static_cast<double>(regions.rows());
  return v;
}

ContextEmbedding ContextEmbedder::embed(const data::Scene& scene, const std::vector<TokenId>& tokens) const {
  return {question(tokens), image(scene.regions)};
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw MiningError("dot product of vectors with different lengths");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  const double na = std::sqrt(dot(a, a));
  const double nb = std::sqrt(dot(b, b));
  if (!(na > 0.0) || !(nb > 0.0)) throw MiningError("cosine of a zero vector is undefined");
  return dot(a, b) / (na * nb);
}

double xi(const ContextEmbedding& target, const ContextEmbedding& candidate, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw MiningError("beta must lie in [0, 1]");
  return beta * cosine(target.q, candidate.q) + (1.0 - beta) * cosine(target.v, candidate.v);
}

bool presence_filter(const data::Example& candidate, ConceptId) {
  const auto& answers = data::AnswerVocab::get();
  const auto& q = candidate.question;
  if (q.skill == data::Skill::Counting) return q.answer && *q.answer != answers.count(0);
  if (q.skill == data::Skill::Existence) return q.answer && *q.answer == answers.yes();
  return true;
}

namespace {

std::vector<double> normalized(std::vector<double> v) {
  const double n = std::sqrt(dot(v, v));
  if (!(n > 0.0)) throw MiningError("context vector is zero");
  for (auto& x : v) x /= n;
  return v;
}

}  // namespace

Corpus::Corpus(std::vector<data::Example> examples, const annotate::ConceptLexicon& lexicon, const ContextEmbedder& embedder)
    : examples_(std::move(examples)) {
  const std::size_t n = examples_.size();
  mentions_.resize(n);
  concept_mask_.assign(n, 0);
  unit_.resize(n);
  question_key_.resize(n);
  std::map<std::vector<TokenId>, std::size_t> keys;
  std::vector<std::vector<double>> unique_q;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& ex = examples_[i];
    if (!position_.emplace(ex.id, i).second) throw MiningError("duplicate example id " + std::to_string(ex.id));
    mentions_[i] = annotate::find_concept_mentions(ex.question.tokens, lexicon);
    for (const auto& m : mentions_[i]) concept_mask_[i] |= 1U << m.concept_id;
    const auto masked = annotate::mask_all_concepts(ex.question.tokens, mentions_[i]);
    auto [it, fresh] = keys.emplace(masked, unique_q.size());
    if (fresh) unique_q.push_back(normalized(embedder.question(masked)));
    question_key_[i] = it->second;
    unit_[i].q = unique_q[it->second];
    unit_[i].v = normalized(embedder.image(ex.scene.regions));
  }
  question_sim_.assign(unique_q.size(), std::vector<double>(unique_q.size()));
  for (std::size_t a = 0; a < unique_q.size(); ++a) {
    for (std::size_t b = 0; b < unique_q.size(); ++b) question_sim_[a][b] = dot(unique_q[a], unique_q[b]);
  }
}

std::optional<std::size_t> Corpus::position(ExampleId id) const {
  auto it = position_.find(id);
  if (it == position_.end()) return std::nullopt;
  return it->second;
}

double Corpus::question_similarity(std::size_t a, std::size_t b) const { return question_sim_[question_key_[a]][question_key_[b]]; }

double Corpus::image_similarity(std::size_t a, std::size_t b) const { return dot(unit_[a].v, unit_[b].v); }

double Corpus::xi(std::size_t target, std::size_t candidate, double beta) const {
  return beta * question_similarity(target, candidate) + (1.0 - beta) * image_similarity(target, candidate);
}

namespace {

struct Scored {
  double score;
  ExampleId id;
};

// Smallest scores first, ties to the smaller id.
bool ascending(const Scored& a, const Scored& b) { return a.score < b.score || (a.score == b.score && a.id < b.id); }
// Largest scores first, ties to the smaller id.
bool descending(const Scored& a, const Scored& b) { return a.score > b.score || (a.score == b.score && a.id < b.id); }

template <typename Less>
std::vector<ExampleId> top(std::vector<Scored>& pool, std::size_t k, Less less) {
  k = std::min(k, pool.size());
  std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k), pool.end(), less);
  std::vector<ExampleId> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(pool[i].id);
  return out;
}

void check_target(const Corpus& corpus, std::size_t target, ConceptId concept_id) {
  if (target >= corpus.size()) throw MiningError("target position out of range");
  if (!corpus.mentions_concept(target, concept_id)) {
    throw MiningError("target " + std::to_string(corpus.id(target)) + " does not mention concept " +
                      data::category_words()[static_cast<std::size_t>(concept_id)]);
  }
}

struct GroundingPools {
  std::vector<std::size_t> positive;
  std::vector<std::size_t> negative;
};

GroundingPools grounding_pools(const Corpus& corpus, std::size_t target, ConceptId concept_id) {
  GroundingPools p;
  for (std::size_t c = 0; c < corpus.size(); ++c) {
    if (c == target) continue;
    if (corpus.mentions_concept(c, concept_id)) {
      if (presence_filter(corpus.example(c), concept_id)) p.positive.push_back(c);
    } else if (!corpus.shares_concept(target, c)) {
      p.negative.push_back(c);
    }
  }
  return p;
}

}  // namespace

std::optional<GroundingCandidates> build_grounding_candidates(const Corpus& corpus, std::size_t target, ConceptId concept_id,
                                                              const MiningConfig& config) {
  check_target(corpus, target, concept_id);
  const auto pools = grounding_pools(corpus, target, concept_id);
  if (pools.positive.empty()) return std::nullopt;
  std::vector<Scored> pos, text, visual;
  pos.reserve(pools.positive.size());
  for (std::size_t c : pools.positive) pos.push_back({corpus.xi(target, c, config.beta_pos), corpus.id(c)});
  text.reserve(pools.negative.size());
  visual.reserve(pools.negative.size());
  for (std::size_t c : pools.negative) {
    const double qs = corpus.question_similarity(target, c);
    const double vs = corpus.image_similarity(target, c);
    text.push_back({config.beta_text * qs + (1.0 - config.beta_text) * vs, corpus.id(c)});
    visual.push_back({config.beta_visual * qs + (1.0 - config.beta_visual) * vs, corpus.id(c)});
  }
  const std::size_t half = config.n_neg / 2;
  GroundingCandidates g;
  g.target = corpus.id(target);
  g.concept_id = concept_id;
  g.positives = top(pos, config.n_pos, ascending);
  g.negatives_text = top(text, half, descending);
  g.negatives_visual = top(visual, half, descending);
  g.short_pool = pools.positive.size() < config.n_pos || pools.negative.size() < half;
  return g;
}

std::optional<GroundingCandidates> build_random_grounding_candidates(const Corpus& corpus, std::size_t target, ConceptId concept_id,
                                                                     const MiningConfig& config) {
  check_target(corpus, target, concept_id);
  const auto pools = grounding_pools(corpus, target, concept_id);
  if (pools.positive.empty()) return std::nullopt;
  num::Rng rng(num::derive_seed(config.seed, "random-references", corpus.id(target) * 64 + static_cast<std::uint64_t>(concept_id)));
  auto draw = [&](std::vector<std::size_t> pool, std::size_t k) {
    rng.shuffle(pool);
    pool.resize(std::min(k, pool.size()));
    std::vector<ExampleId> ids;
    for (std::size_t c : pool) ids.push_back(corpus.id(c));
    std::sort(ids.begin(), ids.end());
    return ids;
  };
  const std::size_t half = config.n_neg / 2;
  GroundingCandidates g;
  g.target = corpus.id(target);
  g.concept_id = concept_id;
  g.positives = draw(pools.positive, config.n_pos);
  g.negatives_text = draw(pools.negative, half);
  g.negatives_visual = draw(pools.negative, half);
  g.short_pool = pools.positive.size() < config.n_pos || pools.negative.size() < half;
  return g;
}

std::uint64_t skill_tie_key(ExampleId target, ExampleId candidate) { return num::derive_seed(target, "skill-tie", candidate); }

namespace {

std::vector<ExampleId> draw_skill_negatives(std::vector<ExampleId> rest, ExampleId target, const MiningConfig& config) {
  std::sort(rest.begin(), rest.end());
  num::Rng rng(num::derive_seed(config.seed, "skill-negatives", target));
  rng.shuffle(rest);
  rest.resize(std::min(config.skill_negatives, rest.size()));
  std::sort(rest.begin(), rest.end());
  return rest;
}

}  // namespace

SkillCandidates build_skill_candidates(const Corpus& corpus, std::size_t target, const MiningConfig& config) {
  if (target >= corpus.size()) throw MiningError("target position out of range");
  struct Ranked {
    double score;
    std::uint64_t key;
    ExampleId id;
  };
  const ExampleId tid = corpus.id(target);
  std::vector<Ranked> all;
  all.reserve(corpus.size());
  for (std::size_t c = 0; c < corpus.size(); ++c) {
    if (c != target) all.push_back({corpus.question_similarity(target, c), skill_tie_key(tid, corpus.id(c)), corpus.id(c)});
  }
  const std::size_t k = std::min(config.skill_pool, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.key < b.key;
  });
  SkillCandidates s;
  s.target = tid;
  std::vector<ExampleId> rest;
  for (std::size_t i = 0; i < all.size(); ++i) (i < k ? s.positives : rest).push_back(all[i].id);
  s.negatives = draw_skill_negatives(std::move(rest), tid, config);
  s.short_pool = s.positives.size() < config.skill_pool || s.negatives.size() < config.skill_negatives;
  return s;
}

std::optional<GroundingCandidates> oracle_grounding_candidates(const Corpus& corpus, std::size_t target, ConceptId concept_id,
                                                               const MiningConfig& config) {
  const auto& target_mentions = corpus.mentions(target);
  std::vector<std::pair<double, ExampleId>> pos, text, visual;
  for (std::size_t c = 0; c < corpus.size(); ++c) {
    if (corpus.id(c) == corpus.id(target)) continue;
    const auto& cm = corpus.mentions(c);
    bool has_concept = false, shares = false;
    for (const auto& m : cm) {
      has_concept |= m.concept_id == concept_id;
      for (const auto& t : target_mentions) shares |= m.concept_id == t.concept_id;
    }
    if (has_concept && presence_filter(corpus.example(c), concept_id)) pos.emplace_back(corpus.xi(target, c, config.beta_pos), corpus.id(c));
    if (!shares) {
      // Negated scores so one ascending sort serves both "largest first" pools.
      text.emplace_back(-corpus.xi(target, c, config.beta_text), corpus.id(c));
      visual.emplace_back(-corpus.xi(target, c, config.beta_visual), corpus.id(c));
    }
  }
  if (pos.empty()) return std::nullopt;
  std::sort(pos.begin(), pos.end());
  std::sort(text.begin(), text.end());
  std::sort(visual.begin(), visual.end());
  auto first = [](const std::vector<std::pair<double, ExampleId>>& v, std::size_t k) {
    std::vector<ExampleId> out;
    for (std::size_t i = 0; i < v.size() && i < k; ++i) out.push_back(v[i].second);
    return out;
  };
  GroundingCandidates g;
  g.target = corpus.id(target);
  g.concept_id = concept_id;
  g.positives = first(pos, config.n_pos);
  g.negatives_text = first(text, config.n_neg / 2);
  g.negatives_visual = first(visual, config.n_neg / 2);
  g.short_pool = pos.size() < config.n_pos || text.size() < config.n_neg / 2;
  return g;
}

SkillCandidates oracle_skill_candidates(const Corpus& corpus, std::size_t target, const MiningConfig& config) {
  const ExampleId tid = corpus.id(target);
  std::vector<std::tuple<double, std::uint64_t, ExampleId>> all;
  for (std::size_t c = 0; c < corpus.size(); ++c) {
    if (c == target) continue;
    all.emplace_back(-corpus.question_similarity(target, c), skill_tie_key(tid, corpus.id(c)), corpus.id(c));
  }
  std::sort(all.begin(), all.end());
  SkillCandidates s;
  s.target = tid;
  std::vector<ExampleId> rest;
  for (std::size_t i = 0; i < all.size(); ++i) (i < config.skill_pool ? s.positives : rest).push_back(std::get<2>(all[i]));
  s.negatives = draw_skill_negatives(std::move(rest), tid, config);
  s.short_pool = s.positives.size() < config.skill_pool || s.negatives.size() < config.skill_negatives;
  return s;
}

void ReferenceCache::add(ReferenceEntry entry) {
  const auto key = std::make_pair(entry.grounding.target, entry.grounding.concept_id);
  if (index_.count(key)) throw MiningError("duplicate reference entry for target " + std::to_string(key.first));
  index_[key] = entries_.size();
  entries_.push_back(std::move(entry));
}

const ReferenceEntry* ReferenceCache::find(ExampleId target, ConceptId concept_id) const {
  auto it = index_.find({target, concept_id});
  return it == index_.end() ? nullptr : &entries_[it->second];
}

bool ReferenceCache::has_target(ExampleId target) const {
  auto it = index_.lower_bound({target, std::numeric_limits<ConceptId>::min()});
  return it != index_.end() && it->first.first == target;
}

std::string ReferenceCache::to_jsonl() const {
  std::string out;
  for (const auto& e : entries_) {
    nlohmann::json j = {{"target", e.grounding.target},
                        {"concept", data::category_words()[static_cast<std::size_t>(e.grounding.concept_id)]},
                        {"positives", e.grounding.positives},
                        {"negatives_text", e.grounding.negatives_text},
                        {"negatives_visual", e.grounding.negatives_visual},
                        {"skill_positives", e.skill.positives},
                        {"skill_negatives", e.skill.negatives},
                        {"short_pool", e.grounding.short_pool},
                        {"skill_short_pool", e.skill.short_pool}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

ReferenceCache ReferenceCache::from_jsonl(const std::string& text) {
  ReferenceCache cache;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ReferenceEntry e;
      e.grounding.target = j.at("target").get<ExampleId>();
      const auto word = j.at("concept").get<std::string>();
      const auto c = data::category_id(word);
      if (!c) throw MiningError("unknown concept '" + word + "'");
      e.grounding.concept_id = *c;
      e.grounding.positives = j.at("positives").get<std::vector<ExampleId>>();
      e.grounding.negatives_text = j.at("negatives_text").get<std::vector<ExampleId>>();
      e.grounding.negatives_visual = j.at("negatives_visual").get<std::vector<ExampleId>>();
      e.grounding.short_pool = j.at("short_pool").get<bool>();
      e.skill.target = e.grounding.target;
      e.skill.positives = j.at("skill_positives").get<std::vector<ExampleId>>();
      e.skill.negatives = j.at("skill_negatives").get<std::vector<ExampleId>>();
      e.skill.short_pool = j.at("skill_short_pool").get<bool>();
      cache.add(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw MiningError("reference cache line " + std::to_string(lineno) + ": " + ex.what());
    } catch (const MiningError& ex) {
      throw MiningError("reference cache line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return cache;
}

void ReferenceCache::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw MiningError("cannot open " + path.string() + " for writing");
  out << to_jsonl();
}

ReferenceCache ReferenceCache::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MiningError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_jsonl(ss.str());
}

ReferenceCache mine_references(const Corpus& corpus, const MiningConfig& config, ReferenceScheme scheme, MiningReport* report) {
  ReferenceCache cache;
  MiningReport local;
  for (std::size_t t = 0; t < corpus.size(); ++t) {
    const auto& mentions = corpus.mentions(t);
    if (mentions.empty()) continue;
    ++local.targets;
    const SkillCandidates skill = build_skill_candidates(corpus, t, config);
    std::vector<ConceptId> seen;
    for (const auto& m : mentions) {
      if (std::find(seen.begin(), seen.end(), m.concept_id) != seen.end()) continue;
      seen.push_back(m.concept_id);
      auto g = scheme == ReferenceScheme::Ccc ? build_grounding_candidates(corpus, t, m.concept_id, config)
                                              : build_random_grounding_candidates(corpus, t, m.concept_id, config);
      if (!g) {
        local.skipped.push_back("target " + std::to_string(corpus.id(t)) + " concept " +
                                data::category_words()[static_cast<std::size_t>(m.concept_id)] + ": no positive candidates");
        continue;
      }
      local.short_pools += g->short_pool;
      cache.add({std::move(*g), skill});
      ++local.entries;
    }
  }
  if (report) *report = std::move(local);
  return cache;
}

GroundingSample sample_grounding_references(const GroundingCandidates& c, num::Rng& rng) {
  if (c.positives.empty()) throw MiningError("positive pool of target " + std::to_string(c.target) + " is empty");
  if (c.negatives_text.empty()) throw MiningError("text negative pool of target " + std::to_string(c.target) + " is empty");
  if (c.negatives_visual.empty()) throw MiningError("visual negative pool of target " + std::to_string(c.target) + " is empty");
  GroundingSample s;
  s.positive = c.positives[rng.below(c.positives.size())];
  s.negative_text = c.negatives_text[rng.below(c.negatives_text.size())];
  std::vector<ExampleId> visual;
  for (ExampleId id : c.negatives_visual) {
    if (id != s.negative_text) visual.push_back(id);
  }
  if (visual.empty()) throw MiningError("visual negative pool of target " + std::to_string(c.target) + " has no example distinct from the text negative");
  s.negative_visual = visual[rng.below(visual.size())];
  return s;
}

namespace {

std::vector<ExampleId> draw_distinct(const std::vector<ExampleId>& pool, std::size_t n, const char* name, ExampleId target, num::Rng& rng) {
  if (pool.size() < n) {
    throw MiningError(std::string(name) + " pool of target " + std::to_string(target) + " has " + std::to_string(pool.size()) +
                      " entries, " + std::to_string(n) + " needed");
  }
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<ExampleId> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + rng.below(idx.size() - i);
    std::swap(idx[i], idx[j]);
    out.push_back(pool[idx[i]]);
  }
  return out;
}

}  // namespace

SkillSample sample_skill_references(const SkillCandidates& c, std::size_t n_pos, std::size_t n_neg, num::Rng& rng) {
  SkillSample s;
  s.positives = draw_distinct(c.positives, n_pos, "skill positive", c.target, rng);
  s.negatives = draw_distinct(c.negatives, n_neg, "skill negative", c.target, rng);
  return s;
}

}  // namespace sepvqa::refmine
