#include "sepvqa/model/objectives.hpp"

#include <cmath>

namespace sepvqa::model {

using num::Tensor;

namespace {

std::size_t single_positive(const std::vector<bool>& flags, std::size_t rows, const char* what) {
  if (flags.size() != rows) {
    throw LossError(std::string(what) + ": " + std::to_string(flags.size()) + " flags for " + std::to_string(rows) + " references");
  }
  std::size_t count = 0, at = 0;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    if (flags[i]) {
      ++count;
      at = i;
    }
  }
  if (count != 1) throw LossError(std::string(what) + " needs exactly one positive, got " + std::to_string(count));
  return at;
}

}  // namespace

LossDiagnostics diagnose(const num::Evaluation& ev, const LossValue& loss) {
  LossDiagnostics d;
  d.value = ev[loss.value].item();
  d.terms = loss.terms;
  if (loss.scores.valid()) {
    const Tensor& s = ev[loss.scores];
    d.positive_similarity = s[loss.positive];
    double sum = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != loss.positive) sum += s[i];
    }
    d.mean_negative_similarity = s.size() > 1 ? sum / static_cast<double>(s.size() - 1) : 0.0;
  }
  return d;
}

LossValue nce_from_scores(Var scores, std::size_t positive) {
  if (scores.shape().size() != 2 || scores.rows() != 1) throw LossError("NCE scores must be a single row");
  if (positive >= scores.cols()) throw LossError("positive index out of range");
  LossValue out;
  out.value = num::scale(num::pick(num::log_softmax_rows(scores), 0, positive), -1.0);
  out.scores = scores;
  out.positive = positive;
  out.terms = scores.cols();
  return out;
}

LossValue vqa_loss(Var logits, const std::vector<std::optional<int>>& gold) {
  if (logits.shape().size() != 2 || logits.rows() != gold.size() || gold.empty()) {
    throw LossError("VQA loss needs one gold answer per logit row");
  }
  Tensor onehot({logits.rows(), logits.cols()});
  for (std::size_t r = 0; r < gold.size(); ++r) {
    if (!gold[r]) throw LossError("VQA loss received an unlabeled example at row " + std::to_string(r));
    if (*gold[r] < 0 || static_cast<std::size_t>(*gold[r]) >= logits.cols()) throw LossError("gold answer out of vocabulary");
    onehot.at(r, static_cast<std::size_t>(*gold[r])) = 1.0;
  }
  LossValue out;
  const Var picked = num::log_softmax_rows(logits) * logits.graph().constant(std::move(onehot), "gold");
  out.value = num::scale(num::sum_all(picked), -1.0 / static_cast<double>(gold.size()));
  out.terms = gold.size();
  return out;
}

LossValue grounding_loss(const Encoder& encoder, Var h_masked, Var reference_tokens, const std::vector<bool>& positive) {
  if (h_masked.rows() != 1) throw LossError("grounding loss takes a single masked token");
  const std::size_t pos = single_positive(positive, reference_tokens.rows(), "grounding loss");
  Graph& g = h_masked.graph();
  const Var a = encoder.project_ground(g, h_masked);
  const Var r = encoder.project_ground(g, reference_tokens);
  const double scale = 1.0 / std::sqrt(static_cast<double>(encoder.config().hidden));
  return nce_from_scores(num::scale(num::matmul_nt(a, r), scale), pos);
}

LossValue skill_loss(const Encoder& encoder, Var target_summary, Var reference_summaries, const std::vector<bool>& positive) {
  if (target_summary.rows() != 1) throw LossError("skill loss takes a single target summary");
  const std::size_t pos = single_positive(positive, reference_summaries.rows(), "skill loss");
  Graph& g = target_summary.graph();
  const Var a = num::l2_normalize_rows(encoder.project_skill(g, target_summary));
  const Var r = num::l2_normalize_rows(encoder.project_skill(g, reference_summaries));
  return nce_from_scores(num::scale(num::matmul_nt(a, r), 1.0 / encoder.config().tau_s), pos);
}

LossValue mlm_loss(const Encoder& encoder, Var h_masked, TokenId gold) {
  if (h_masked.rows() != 1) throw LossError("MLM loss takes a single masked token");
  if (gold < 0 || static_cast<std::size_t>(gold) >= encoder.config().token_vocab) throw LossError("gold token out of vocabulary");
  LossValue out;
  const Var logits = encoder.mlm_logits(h_masked.graph(), h_masked);
  out.value = num::scale(num::pick(num::log_softmax_rows(logits), 0, static_cast<std::size_t>(gold)), -1.0);
  out.terms = logits.cols();
  return out;
}

}  // namespace sepvqa::model
