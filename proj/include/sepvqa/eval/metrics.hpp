#pragma once

#include <map>
#include <string>
#include <vector>

#include "sepvqa/eval/split.hpp"
#include "sepvqa/model/encoder.hpp"

namespace sepvqa::eval {

class MetricsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Arg-max answer ids for the examples at `positions`.
std::vector<int> predict(const model::Encoder& encoder, const num::TensorMap& params, const std::vector<data::Example>& examples,
                         const std::vector<std::size_t>& positions, std::size_t batch_size = 256);

/// Exact-match accuracy in percent.
double vqa_accuracy(const std::vector<int>& predictions, const std::vector<int>& gold);

/// A concept mention with the regions showing that concept.
struct GroundingTuple {
  std::size_t position = 0;
  std::size_t token = 0;
  std::vector<std::size_t> gold_regions;
};

/// One tuple per concept mention whose concept is visible in the scene.
std::vector<GroundingTuple> grounding_tuples(const std::vector<data::Example>& examples, const std::vector<std::size_t>& positions);

/// Scaled dot products h·z_m/√d for a 1×d token row and an M×d region matrix.
std::vector<double> region_scores(const num::Tensor& h, const num::Tensor& z);
/// True when some gold region has fewer than k regions scoring strictly higher.
bool hit_at_k(const std::vector<double>& scores, const std::vector<std::size_t>& gold, std::size_t k);

struct RecallResult {
  /// Percent over non-degenerate tuples.
  double recall = 0.0;
  std::size_t counted = 0;
  /// Tuples whose scene has at most k regions, where every ranking is a hit.
  std::size_t degenerate = 0;
  std::size_t degenerate_hits = 0;
};

/// Ranks regions by φ_g-projected similarity to the concept token of the unmasked question
/// (raw states when `projected` is false).
RecallResult grounding_recall_at_k(const model::Encoder& encoder, const num::TensorMap& params, const std::vector<data::Example>& examples,
                                   const std::vector<GroundingTuple>& tuples, std::size_t k = 5, bool projected = true,
                                   std::size_t batch_size = 128);

struct SliceMetrics {
  double accuracy = 0.0;
  std::size_t size = 0;
};

struct MetricsReport {
  /// Held-out slices by name plus kIidSlice.
  std::map<std::string, SliceMetrics> slices;
  std::vector<std::string> novel_slices;
  /// Mean accuracy over the held-out slices.
  double novel_mean = 0.0;
  /// Accuracy over every test question.
  double overall = 0.0;
  RecallResult recall;
  std::string metric = "exact-match accuracy";
  /// Seed, config, split and input hashes.
  std::map<std::string, std::string> metadata;

  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
};

/// Scores a model on every test slice of the split. `dataset` must still carry gold answers.
MetricsReport evaluate_model(const model::Encoder& encoder, const num::TensorMap& params, const std::vector<data::Example>& dataset,
                             const Split& split, std::size_t k = 5);

}  // namespace sepvqa::eval
