#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sepvqa/data/world.hpp"
#include "sepvqa/num/graph.hpp"

namespace sepvqa::model {

using data::TokenId;
using num::Graph;
using num::Var;

class EncoderError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EncoderConfig {
  std::size_t hidden = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t token_vocab = 0;
  std::size_t answer_vocab = 0;
  std::size_t region_dim = 32;
  double tau_s = 0.5;
  /// Question tokens attend to every question token and CLS; when false, only to themselves and CLS.
  bool plural_attention = true;

  /// d=512, 6 layers, 8 heads.
  static EncoderConfig paper();
  /// d=64, 2 layers, 4 heads.
  static EncoderConfig desk();
  void validate() const;

  std::string to_json() const;
  static EncoderConfig from_json(const std::string& text);

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

/// One image-question pair fed to the encoder. The regions tensor must outlive graph evaluation.
struct SequenceInput {
  const num::Tensor* regions = nullptr;
  std::vector<TokenId> tokens;
};

/// Rows of one sequence inside the stacked state matrix: CLS, then regions, then tokens.
struct SequenceLayout {
  std::size_t start = 0;
  std::size_t regions = 0;
  std::size_t tokens = 0;

  std::size_t length() const { return 1 + regions + tokens; }
  std::size_t cls_row() const { return start; }
  std::size_t region_row(std::size_t m) const { return start + 1 + m; }
  std::size_t token_row(std::size_t i) const { return start + 1 + regions + i; }
};

/// Attention scope of every sequence: CLS and regions see everything, question tokens see CLS
/// and question tokens.
std::vector<std::uint8_t> attention_mask(const SequenceLayout& layout, bool plural);

/// Multi-head softmax attention computed independently inside each sequence of a stacked batch.
Var segmented_attention(Var q, Var k, Var v, const std::vector<SequenceLayout>& layout, std::size_t heads, bool plural);

/// Gradient-blocking identity.
Var stop_gradient(Var x);

/// Final-layer states of a batch of sequences, stacked row-wise.
struct EncodedBatch {
  Var states;
  std::vector<SequenceLayout> layout;

  std::size_t size() const { return layout.size(); }
  /// CLS rows of every sequence, B×d.
  Var cls() const;
  Var cls(std::size_t b) const;
  /// Region rows z of sequence b.
  Var regions(std::size_t b) const;
  /// Question-token rows h of sequence b.
  Var tokens(std::size_t b) const;
  Var token(std::size_t b, std::size_t i) const;
  /// Mean of the question-token rows of sequence b.
  Var summary(std::size_t b) const;
  /// Summaries of every sequence, B×d.
  Var summaries() const;
};

/// Parameter layout, initialisation and forward graph of the multi-modal transformer.
class Encoder {
 public:
  explicit Encoder(EncoderConfig config);

  const EncoderConfig& config() const { return config_; }

  /// Uniform(−1/√d, 1/√d) weights, zero biases, unit layer-norm gains.
  num::TensorMap init_params(std::uint64_t seed) const;
  /// Name and shape of every trainable tensor.
  std::vector<std::pair<std::string, num::Shape>> parameter_shapes() const;

  EncodedBatch encode(Graph& g, std::span<const SequenceInput> batch) const;

  /// Embedding-table rows of a token list, before the recurrent encoder.
  Var token_embeddings(Graph& g, const std::vector<TokenId>& tokens) const;
  /// Bi-directional LSTM over every question of the batch, N_total×d with questions stacked in order.
  Var question_encoder(Graph& g, std::span<const SequenceInput> batch) const;
  /// Stacked [CLS, regions, tokens] inputs of the first transformer layer.
  Var layer_inputs(Graph& g, std::span<const SequenceInput> batch, std::vector<SequenceLayout>& layout) const;
  /// One post-norm transformer layer over stacked sequences.
  Var layer(Graph& g, Var x, const std::vector<SequenceLayout>& layout, std::size_t index) const;

  Var answer_logits(Graph& g, Var cls) const;
  /// φ_g(x) = W_g x + b_g, row-wise.
  Var project_ground(Graph& g, Var x) const;
  /// φ_s(x) = W₂ relu(W₁ x + b₁) + b₂, row-wise.
  Var project_skill(Graph& g, Var x) const;
  Var mlm_logits(Graph& g, Var x) const;

 private:
  Var param(Graph& g, const std::string& name) const;
  void check(std::span<const SequenceInput> batch) const;

  EncoderConfig config_;
  std::vector<std::pair<std::string, num::Shape>> shapes_;
};

}  // namespace sepvqa::model
