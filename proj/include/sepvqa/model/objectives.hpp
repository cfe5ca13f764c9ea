#pragma once

#include <optional>
#include <vector>

#include "sepvqa/model/encoder.hpp"

namespace sepvqa::model {

class LossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A scalar loss node plus the score row it was computed from, for diagnostics.
struct LossValue {
  Var value;
  /// 1×T similarity row for the NCE losses, invalid otherwise.
  Var scores;
  std::size_t positive = 0;
  std::size_t terms = 0;
};

struct LossDiagnostics {
  double value = 0.0;
  double positive_similarity = 0.0;
  double mean_negative_similarity = 0.0;
  std::size_t terms = 0;
};

LossDiagnostics diagnose(const num::Evaluation& ev, const LossValue& loss);

/// −log softmax(scores)[positive] for a 1×T score row.
LossValue nce_from_scores(Var scores, std::size_t positive);

/// Mean softmax cross-entropy of B×A logits against one gold answer per row. Rows without a
/// gold answer are rejected.
LossValue vqa_loss(Var logits, const std::vector<std::optional<int>>& gold);

/// Grounding NCE: sim(a, b) = φ_g(a)·φ_g(b)/√d between the masked target token h (1×d) and every
/// reference token (T×d); exactly one reference token is flagged positive.
LossValue grounding_loss(const Encoder& encoder, Var h_masked, Var reference_tokens, const std::vector<bool>& positive);

/// Skill NCE: sim(a, b) = cos(φ_s(a), φ_s(b))/τ_s between the target summary (1×d) and L
/// reference summaries (L×d) with exactly one positive.
LossValue skill_loss(const Encoder& encoder, Var target_summary, Var reference_summaries, const std::vector<bool>& positive);

/// Cross-entropy of the vocabulary projection of a masked position (1×d) against the gold token.
LossValue mlm_loss(const Encoder& encoder, Var h_masked, TokenId gold);

}  // namespace sepvqa::model
