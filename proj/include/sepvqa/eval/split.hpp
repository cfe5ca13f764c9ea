#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sepvqa/data/dataset.hpp"

namespace sepvqa::eval {

class SplitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SliceMode { Composition, Concept };

/// A held-out slice. Composition slices match (skill AND any listed concept); concept slices
/// match every question mentioning a listed concept.
struct Slice {
  std::string name;
  SliceMode mode = SliceMode::Composition;
  std::optional<data::Skill> skill;
  std::vector<data::ConceptId> concepts;

  bool matches(const data::QuestionRecord& q) const;
};

struct SplitSpec {
  std::vector<Slice> slices;
  /// Share of each held-out slice kept for testing; the rest becomes unlabeled training data.
  double test_fraction = 1.0 / 3.0;
  /// Share of non-held-out questions kept as an in-distribution test set.
  double iid_test_fraction = 0.1;
  std::size_t min_unlabeled = 400;
  std::size_t min_test = 200;
  std::uint64_t seed = 0;

  /// Three composition slices and three concept slices of the default benchmark.
  static SplitSpec benchmark();
  void validate() const;
};

enum class Partition { Labeled, Unlabeled, Test };

inline constexpr const char* kIidSlice = "iid";

/// Assignment of every example (by position in the dataset) to D^a, D^u or test, and of every
/// test example to a slice name.
struct Split {
  SplitSpec spec;
  std::vector<std::uint64_t> ids;
  std::vector<Partition> partition;
  /// Slice index for held-out examples, -1 otherwise.
  std::vector<int> slice;

  std::vector<std::size_t> indices(Partition p) const;
  /// Test examples of the named slice, or of the in-distribution test set for kIidSlice.
  std::vector<std::size_t> test_indices(const std::string& slice_name) const;
  std::vector<std::string> slice_names() const;

  std::string to_json() const;
  static Split from_json(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static Split load(const std::filesystem::path& path);
  std::string hash() const;
};

/// Throws SplitError when a held-out slice is too small to give both its unlabeled share and
/// its test share the configured minimum.
Split build_novel_splits(const std::vector<data::Example>& dataset, const SplitSpec& spec);

/// Dataset as seen by training: D^u questions lose their answers, test questions are marked
/// unlabeled but keep their answers for scoring.
std::vector<data::Example> apply_split(const std::vector<data::Example>& dataset, const Split& split);

/// Labeled training questions matching any held-out slice; empty for a sound split.
std::vector<std::uint64_t> leakage(const std::vector<data::Example>& dataset, const Split& split);

}  // namespace sepvqa::eval
