#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sepvqa/annotate/annotate.hpp"
#include "sepvqa/data/dataset.hpp"
#include "sepvqa/num/random.hpp"
#include "sepvqa/num/tensor.hpp"

namespace sepvqa::refmine {

using data::ConceptId;
using data::TokenId;
using ExampleId = std::uint64_t;

class MiningError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Question context q and image context v of one example.
struct ContextEmbedding {
  std::vector<double> q;
  std::vector<double> v;
};

/// Frozen stand-in for pretrained context encoders: q is the mean of fixed random token
/// vectors (the mask token contributes zero), v is the mean region feature.
class ContextEmbedder {
 public:
  explicit ContextEmbedder(std::uint64_t seed, std::size_t dim = 64);
  std::vector<double> question(const std::vector<TokenId>& tokens) const;
  std::vector<double> image(const num::Tensor& regions) const;
  ContextEmbedding embed(const data::Scene& scene, const std::vector<TokenId>& tokens) const;
  std::size_t dim() const { return dim_; }

 private:
  std::size_t dim_;
  num::Tensor table_;
};

double dot(const std::vector<double>& a, const std::vector<double>& b);
/// Cosine similarity; throws MiningError for a zero vector.
double cosine(const std::vector<double>& a, const std::vector<double>& b);
/// ξ = β·cos(q, q′) + (1 − β)·cos(v, v′).
double xi(const ContextEmbedding& target, const ContextEmbedding& candidate, double beta);

/// Keeps candidates whose question implies the concept is visible: counting questions answered
/// 0 and existence questions answered no are rejected, as are unlabeled counting and existence
/// questions whose answer cannot be checked.
bool presence_filter(const data::Example& candidate, ConceptId concept_id);

struct MiningConfig {
  std::size_t n_pos = 20;
  std::size_t n_neg = 40;
  double beta_pos = 0.6;
  double beta_text = 0.7;
  double beta_visual = 0.3;
  std::size_t skill_pool = 200;
  std::size_t skill_negatives = 200;
  std::uint64_t seed = 0;
  std::size_t embed_dim = 64;
};

/// Mining view of the training pool (D^a ∪ D^u): mentions, concept-masked question context and
/// image context per example, with unit-normalised vectors so scores are plain dot products.
class Corpus {
 public:
  Corpus(std::vector<data::Example> examples, const annotate::ConceptLexicon& lexicon, const ContextEmbedder& embedder);

  std::size_t size() const { return examples_.size(); }
  const data::Example& example(std::size_t pos) const { return examples_[pos]; }
  ExampleId id(std::size_t pos) const { return examples_[pos].id; }
  std::optional<std::size_t> position(ExampleId id) const;
  const std::vector<data::ConceptMention>& mentions(std::size_t pos) const { return mentions_[pos]; }
  bool mentions_concept(std::size_t pos, ConceptId c) const { return (concept_mask_[pos] >> c) & 1U; }
  bool shares_concept(std::size_t a, std::size_t b) const { return (concept_mask_[a] & concept_mask_[b]) != 0; }
  const ContextEmbedding& context(std::size_t pos) const { return unit_[pos]; }
  /// Cosine of masked question contexts.
  double question_similarity(std::size_t a, std::size_t b) const;
  double image_similarity(std::size_t a, std::size_t b) const;
  /// ξ between two corpus examples; the scoring used by every mining routine.
  double xi(std::size_t target, std::size_t candidate, double beta) const;

 private:
  std::vector<data::Example> examples_;
  std::vector<std::vector<data::ConceptMention>> mentions_;
  std::vector<std::uint32_t> concept_mask_;
  std::vector<ContextEmbedding> unit_;
  std::vector<std::size_t> question_key_;
  std::vector<std::vector<double>> question_sim_;
  std::map<ExampleId, std::size_t> position_;
};

struct GroundingCandidates {
  ExampleId target = 0;
  ConceptId concept_id = 0;
  std::vector<ExampleId> positives;
  std::vector<ExampleId> negatives_text;
  std::vector<ExampleId> negatives_visual;
  bool short_pool = false;

  friend bool operator==(const GroundingCandidates&, const GroundingCandidates&) = default;
};

struct SkillCandidates {
  ExampleId target = 0;
  std::vector<ExampleId> positives;
  std::vector<ExampleId> negatives;
  bool short_pool = false;

  friend bool operator==(const SkillCandidates&, const SkillCandidates&) = default;
};

/// CCC candidates: the n_pos lowest-ξ(β_pos) concept-sharing examples that pass the presence
/// filter, and the n_neg/2 highest-ξ examples sharing no target concept under each of β_text
/// and β_visual. Ties go to the smaller id. Nothing when no positive candidate exists.
std::optional<GroundingCandidates> build_grounding_candidates(const Corpus& corpus, std::size_t target, ConceptId concept_id,
                                                              const MiningConfig& config);
/// Same pools with uniform random choice instead of ξ ranking, seeded per target.
std::optional<GroundingCandidates> build_random_grounding_candidates(const Corpus& corpus, std::size_t target, ConceptId concept_id,
                                                                     const MiningConfig& config);
/// The skill_pool most similar masked questions (ties ordered by a hash salted with the target
/// id, so equal scores do not always favour the same examples) and skill_negatives uniform
/// draws from the remainder.
SkillCandidates build_skill_candidates(const Corpus& corpus, std::size_t target, const MiningConfig& config);

/// Tie-break key for skill ranking.
std::uint64_t skill_tie_key(ExampleId target, ExampleId candidate);

// Exhaustive score-everything-and-sort implementations used to verify the miners.
std::optional<GroundingCandidates> oracle_grounding_candidates(const Corpus& corpus, std::size_t target, ConceptId concept_id,
                                                               const MiningConfig& config);
SkillCandidates oracle_skill_candidates(const Corpus& corpus, std::size_t target, const MiningConfig& config);

struct ReferenceEntry {
  GroundingCandidates grounding;
  SkillCandidates skill;

  friend bool operator==(const ReferenceEntry&, const ReferenceEntry&) = default;
};

class ReferenceCache {
 public:
  void add(ReferenceEntry entry);
  const std::vector<ReferenceEntry>& entries() const { return entries_; }
  const ReferenceEntry* find(ExampleId target, ConceptId concept_id) const;
  bool has_target(ExampleId target) const;
  std::size_t size() const { return entries_.size(); }

  void save(const std::filesystem::path& path) const;
  static ReferenceCache load(const std::filesystem::path& path);
  std::string to_jsonl() const;
  static ReferenceCache from_jsonl(const std::string& text);

  friend bool operator==(const ReferenceCache& a, const ReferenceCache& b) { return a.entries_ == b.entries_; }

 private:
  std::vector<ReferenceEntry> entries_;
  std::map<std::pair<ExampleId, ConceptId>, std::size_t> index_;
};

enum class ReferenceScheme { Ccc, Random };

struct MiningReport {
  std::size_t targets = 0;
  std::size_t entries = 0;
  std::size_t short_pools = 0;
  std::vector<std::string> skipped;
};

/// One entry per (target, mentioned concept) for every corpus example with a mention.
ReferenceCache mine_references(const Corpus& corpus, const MiningConfig& config, ReferenceScheme scheme, MiningReport* report = nullptr);

struct GroundingSample {
  ExampleId positive;
  ExampleId negative_text;
  ExampleId negative_visual;
};

struct SkillSample {
  std::vector<ExampleId> positives;
  std::vector<ExampleId> negatives;
};

/// One positive and one negative from each negative pool, all distinct.
GroundingSample sample_grounding_references(const GroundingCandidates& c, num::Rng& rng);
SkillSample sample_skill_references(const SkillCandidates& c, std::size_t n_pos, std::size_t n_neg, num::Rng& rng);

}  // namespace sepvqa::refmine
