#include "sepvqa/model/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "json.hpp"
#include "sepvqa/num/random.hpp"

namespace sepvqa::model {

using num::Shape;
using num::Tensor;

EncoderConfig EncoderConfig::paper() {
  EncoderConfig c;
  c.hidden = 512;
  c.layers = 6;
  c.heads = 8;
  c.token_vocab = data::TokenVocab::get().size();
  c.answer_vocab = data::AnswerVocab::get().size();
  return c;
}

EncoderConfig EncoderConfig::desk() {
  EncoderConfig c;
  c.token_vocab = data::TokenVocab::get().size();
  c.answer_vocab = data::AnswerVocab::get().size();
  return c;
}

void EncoderConfig::validate() const {
  if (hidden == 0 || layers == 0 || heads == 0) throw EncoderError("hidden size, layer count and head count must be positive");
  if (hidden % heads != 0) throw EncoderError("hidden size " + std::to_string(hidden) + " is not divisible by " + std::to_string(heads) + " heads");
  if (hidden % 2 != 0) throw EncoderError("hidden size must be even for the bi-directional question encoder");
  if (token_vocab == 0 || answer_vocab == 0 || region_dim == 0) throw EncoderError("vocabulary sizes and region dimension must be positive");
  if (!(tau_s > 0.0)) throw EncoderError("skill temperature must be positive");
}

std::string EncoderConfig::to_json() const {
  nlohmann::json j = {{"hidden", hidden},           {"layers", layers},       {"heads", heads},
                      {"token_vocab", token_vocab}, {"answer_vocab", answer_vocab}, {"region_dim", region_dim},
                      {"tau_s", tau_s},             {"plural_attention", plural_attention}};
  return j.dump();
}

EncoderConfig EncoderConfig::from_json(const std::string& text) {
  EncoderConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.hidden = j.at("hidden").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.token_vocab = j.at("token_vocab").get<std::size_t>();
    c.answer_vocab = j.at("answer_vocab").get<std::size_t>();
    c.region_dim = j.at("region_dim").get<std::size_t>();
    c.tau_s = j.at("tau_s").get<double>();
    c.plural_attention = j.at("plural_attention").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw EncoderError(std::string("malformed encoder config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<std::uint8_t> attention_mask(const SequenceLayout& layout, bool plural) {
  const std::size_t n = layout.length();
  const std::size_t first_token = 1 + layout.regions;
  std::vector<std::uint8_t> mask(n * n, 1);
  for (std::size_t i = first_token; i < n; ++i) {
    for (std::size_t j = 1; j < n; ++j) {
      const bool allowed = j >= first_token && (plural || j == i);
      mask[i * n + j] = allowed ? 1 : 0;
    }
  }
  return mask;
}

namespace {

struct AttentionPlan {
  std::vector<SequenceLayout> layout;
  std::vector<std::vector<std::uint8_t>> masks;
  std::size_t heads = 1;
};

// Softmax weights of row i over the allowed columns of its sequence, written to p.
void attention_weights(const Tensor& q, const Tensor& k, std::size_t row, std::size_t start, std::size_t n, const std::uint8_t* mask,
                       std::size_t col0, std::size_t dh, double scale, std::vector<double>& p) {
  const std::size_t d = q.cols();
  const double* qi = q.data().data() + row * d + col0;
  double mx = -INFINITY;
  for (std::size_t j = 0; j < n; ++j) {
    if (!mask[j]) {
      p[j] = 0.0;
      continue;
    }
    const double* kj = k.data().data() + (start + j) * d + col0;
    double s = 0.0;
    for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
    p[j] = s * scale;
    mx = std::max(mx, p[j]);
  }
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (mask[j]) {
      p[j] = std::exp(p[j] - mx);
      z += p[j];
    }
  }
  for (std::size_t j = 0; j < n; ++j) p[j] = mask[j] ? p[j] / z : 0.0;
}

}  // namespace

Var segmented_attention(Var q, Var k, Var v, const std::vector<SequenceLayout>& layout, std::size_t heads, bool plural) {
  if (q.shape() != k.shape() || q.shape() != v.shape() || q.shape().size() != 2) throw EncoderError("attention needs equal-shaped Q, K, V matrices");
  if (heads == 0 || q.cols() % heads != 0) throw EncoderError("attention width not divisible by head count");
  auto plan = std::make_shared<AttentionPlan>();
  plan->layout = layout;
  plan->heads = heads;
  std::size_t rows = 0;
  for (const auto& l : layout) {
    if (l.start != rows) throw EncoderError("sequence layout is not contiguous");
    rows += l.length();
    plan->masks.push_back(attention_mask(l, plural));
  }
  if (rows != q.rows()) throw EncoderError("sequence layout covers " + std::to_string(rows) + " rows, attention input has " + std::to_string(q.rows()));

  auto op = std::make_shared<num::CustomOp>();
  op->name = "segmented_attention";
  op->forward = [plan](std::span<const Tensor* const> in) {
    const Tensor &Q = *in[0], &K = *in[1], &V = *in[2];
    const std::size_t d = Q.cols(), dh = d / plan->heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor out(Q.shape());
    std::vector<double> p;
    for (std::size_t s = 0; s < plan->layout.size(); ++s) {
      const auto& l = plan->layout[s];
      const std::size_t n = l.length();
      p.resize(n);
      for (std::size_t h = 0; h < plan->heads; ++h) {
        const std::size_t c0 = h * dh;
        for (std::size_t i = 0; i < n; ++i) {
          attention_weights(Q, K, l.start + i, l.start, n, plan->masks[s].data() + i * n, c0, dh, scale, p);
          double* o = out.data().data() + (l.start + i) * d + c0;
          for (std::size_t j = 0; j < n; ++j) {
            if (p[j] == 0.0) continue;
            const double* vj = V.data().data() + (l.start + j) * d + c0;
            for (std::size_t c = 0; c < dh; ++c) o[c] += p[j] * vj[c];
          }
        }
      }
    }
    return out;
  };
  op->backward = [plan](std::span<const Tensor* const> in, const Tensor&, const Tensor& grad) {
    const Tensor &Q = *in[0], &K = *in[1], &V = *in[2];
    const std::size_t d = Q.cols(), dh = d / plan->heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> g{Tensor(Q.shape()), Tensor(K.shape()), Tensor(V.shape())};
    double* dQ = g[0].data().data();
    double* dK = g[1].data().data();
    double* dV = g[2].data().data();
    std::vector<double> p, dp;
    for (std::size_t s = 0; s < plan->layout.size(); ++s) {
      const auto& l = plan->layout[s];
      const std::size_t n = l.length();
      p.resize(n);
      dp.resize(n);
      for (std::size_t h = 0; h < plan->heads; ++h) {
        const std::size_t c0 = h * dh;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t ri = l.start + i;
          attention_weights(Q, K, ri, l.start, n, plan->masks[s].data() + i * n, c0, dh, scale, p);
          const double* go = grad.data().data() + ri * d + c0;
          double weighted = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            if (p[j] == 0.0) {
              dp[j] = 0.0;
              continue;
            }
            const double* vj = V.data().data() + (l.start + j) * d + c0;
            double acc = 0.0;
            for (std::size_t c = 0; c < dh; ++c) acc += go[c] * vj[c];
            dp[j] = acc;
            weighted += p[j] * acc;
            double* dvj = dV + (l.start + j) * d + c0;
            for (std::size_t c = 0; c < dh; ++c) dvj[c] += p[j] * go[c];
          }
          const double* qi = Q.data().data() + ri * d + c0;
          double* dqi = dQ + ri * d + c0;
          for (std::size_t j = 0; j < n; ++j) {
            if (p[j] == 0.0) continue;
            const double ds = p[j] * (dp[j] - weighted) * scale;
            const double* kj = K.data().data() + (l.start + j) * d + c0;
            double* dkj = dK + (l.start + j) * d + c0;
            for (std::size_t c = 0; c < dh; ++c) {
              dqi[c] += ds * kj[c];
              dkj[c] += ds * qi[c];
            }
          }
        }
      }
    }
    return g;
  };
  return q.graph().custom(op, {q, k, v}, q.shape());
}

Var stop_gradient(Var x) {
  static const auto op = [] {
    auto o = std::make_shared<num::CustomOp>();
    o->name = "stop_gradient";
    o->forward = [](std::span<const Tensor* const> in) { return *in[0]; };
    o->backward = [](std::span<const Tensor* const> in, const Tensor&, const Tensor&) { return std::vector<Tensor>{Tensor(in[0]->shape())}; };
    return o;
  }();
  return x.graph().custom(op, {x}, x.shape());
}

Var EncodedBatch::cls() const {
  std::vector<std::size_t> rows;
  for (const auto& l : layout) rows.push_back(l.cls_row());
  return num::gather_rows(states, rows);
}

Var EncodedBatch::cls(std::size_t b) const { return num::slice_rows(states, layout.at(b).cls_row(), 1); }

Var EncodedBatch::regions(std::size_t b) const { return num::slice_rows(states, layout.at(b).region_row(0), layout.at(b).regions); }

Var EncodedBatch::tokens(std::size_t b) const { return num::slice_rows(states, layout.at(b).token_row(0), layout.at(b).tokens); }

Var EncodedBatch::token(std::size_t b, std::size_t i) const {
  if (i >= layout.at(b).tokens) throw EncoderError("token position " + std::to_string(i) + " out of range");
  return num::slice_rows(states, layout[b].token_row(i), 1);
}

Var EncodedBatch::summary(std::size_t b) const { return num::mean_rows(tokens(b)); }

Var EncodedBatch::summaries() const {
  std::vector<Var> rows;
  for (std::size_t b = 0; b < size(); ++b) rows.push_back(summary(b));
  return num::concat_rows(rows);
}

Encoder::Encoder(EncoderConfig config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.hidden, h = d / 2, V = config_.token_vocab, A = config_.answer_vocab;
  shapes_ = {{"tok_emb", {V, d}}, {"cls", {1, d}}, {"region_w", {config_.region_dim, d}}, {"region_b", {1, d}}};
  for (const char* dir : {"fwd", "bwd"}) {
    const std::string p = std::string("lstm_") + dir;
    shapes_.push_back({p + "_wx", {d, 4 * h}});
    shapes_.push_back({p + "_wh", {h, 4 * h}});
    shapes_.push_back({p + "_b", {1, 4 * h}});
  }
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + "_";
    for (const char* w : {"q", "k", "v", "o"}) {
      shapes_.push_back({p + "w" + w, {d, d}});
      shapes_.push_back({p + "b" + w, {1, d}});
    }
    shapes_.push_back({p + "ln1_g", {1, d}});
    shapes_.push_back({p + "ln1_b", {1, d}});
    shapes_.push_back({p + "ff1_w", {d, 2 * d}});
    shapes_.push_back({p + "ff1_b", {1, 2 * d}});
    shapes_.push_back({p + "ff2_w", {2 * d, d}});
    shapes_.push_back({p + "ff2_b", {1, d}});
    shapes_.push_back({p + "ln2_g", {1, d}});
    shapes_.push_back({p + "ln2_b", {1, d}});
  }
  shapes_.push_back({"answer_w", {d, A}});
  shapes_.push_back({"answer_b", {1, A}});
  shapes_.push_back({"ground_w", {d, d}});
  shapes_.push_back({"ground_b", {1, d}});
  shapes_.push_back({"skill_w1", {d, d}});
  shapes_.push_back({"skill_b1", {1, d}});
  shapes_.push_back({"skill_w2", {d, d}});
  shapes_.push_back({"skill_b2", {1, d}});
  shapes_.push_back({"mlm_w", {d, V}});
  shapes_.push_back({"mlm_b", {1, V}});
}

std::vector<std::pair<std::string, num::Shape>> Encoder::parameter_shapes() const { return shapes_; }

num::TensorMap Encoder::init_params(std::uint64_t seed) const {
  num::TensorMap params;
  const double bound = 1.0 / std::sqrt(static_cast<double>(config_.hidden));
  for (const auto& [name, shape] : shapes_) {
    Tensor t(shape);
    const bool bias = shape[0] == 1 && name != "cls";
    const bool gain = name.ends_with("_g");
    if (gain) {
      t.fill(1.0);
    } else if (!bias) {
      num::Rng rng(num::derive_seed(seed, "init:" + name));
      for (auto& x : t.data()) x = rng.uniform(-bound, bound);
    }
    params.emplace(name, std::move(t));
  }
  return params;
}

Var Encoder::param(Graph& g, const std::string& name) const {
  for (const auto& [n, shape] : shapes_) {
    if (n == name) return g.parameter(name, shape);
  }
  throw EncoderError("unknown encoder parameter '" + name + "'");
}

void Encoder::check(std::span<const SequenceInput> batch) const {
  if (batch.empty()) throw EncoderError("empty batch");
  for (const auto& s : batch) {
    if (s.tokens.empty()) throw EncoderError("empty question");
    for (TokenId t : s.tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= config_.token_vocab) throw EncoderError("token id " + std::to_string(t) + " out of vocabulary");
    }
    if (!s.regions || s.regions->rank() != 2 || s.regions->rows() == 0) throw EncoderError("a sequence needs at least one region");
    if (s.regions->cols() != config_.region_dim) {
      throw EncoderError("region features have " + std::to_string(s.regions->cols()) + " columns, encoder expects " + std::to_string(config_.region_dim));
    }
  }
}

Var Encoder::token_embeddings(Graph& g, const std::vector<TokenId>& tokens) const {
  std::vector<std::size_t> ids;
  for (TokenId t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= config_.token_vocab) throw EncoderError("token id " + std::to_string(t) + " out of vocabulary");
    ids.push_back(static_cast<std::size_t>(t));
  }
  if (ids.empty()) throw EncoderError("empty question");
  return num::gather_rows(param(g, "tok_emb"), ids);
}

Var Encoder::question_encoder(Graph& g, std::span<const SequenceInput> batch) const {
  check(batch);
  const std::size_t B = batch.size(), h = config_.hidden / 2;
  std::size_t T = 0, total = 0;
  std::vector<TokenId> all;
  for (const auto& s : batch) {
    T = std::max(T, s.tokens.size());
    total += s.tokens.size();
    all.insert(all.end(), s.tokens.begin(), s.tokens.end());
  }
  // Row `total` of the padded table is a zero row used past the end of shorter questions.
  const Var emb = num::concat_rows(std::vector<Var>{token_embeddings(g, all), g.constant(Tensor({1, config_.hidden}))});

  Var outputs[2];
  const char* dirs[2] = {"lstm_fwd", "lstm_bwd"};
  for (int dir = 0; dir < 2; ++dir) {
    const std::string p = dirs[dir];
    const Var wx = param(g, p + "_wx"), wh = param(g, p + "_wh"), bias = param(g, p + "_b");
    Var hs = g.constant(Tensor({B, h}));
    Var cs = g.constant(Tensor({B, h}));
    std::vector<Var> steps;
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<std::size_t> rows(B);
      std::size_t offset = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t n = batch[b].tokens.size();
        rows[b] = t < n ? offset + (dir == 0 ? t : n - 1 - t) : total;
        offset += n;
      }
      const Var x = num::gather_rows(emb, rows);
      const Var gates = num::add_row(num::matmul(x, wx) + num::matmul(hs, wh), bias);
      const Var i = num::sigmoid(num::slice_cols(gates, 0, h));
      const Var f = num::sigmoid(num::slice_cols(gates, h, h));
      const Var c = num::tanh(num::slice_cols(gates, 2 * h, h));
      const Var o = num::sigmoid(num::slice_cols(gates, 3 * h, h));
      cs = f * cs + i * c;
      hs = o * num::tanh(cs);
      steps.push_back(hs);
    }
    outputs[dir] = num::concat_rows(steps);
  }
  std::vector<std::size_t> fwd, bwd;
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t n = batch[b].tokens.size();
    for (std::size_t i = 0; i < n; ++i) {
      fwd.push_back(i * B + b);
      bwd.push_back((n - 1 - i) * B + b);
    }
  }
  return num::concat_cols(std::vector<Var>{num::gather_rows(outputs[0], fwd), num::gather_rows(outputs[1], bwd)});
}

Var Encoder::layer_inputs(Graph& g, std::span<const SequenceInput> batch, std::vector<SequenceLayout>& layout) const {
  check(batch);
  const std::size_t B = batch.size();
  std::size_t total_regions = 0, total_tokens = 0;
  for (const auto& s : batch) {
    total_regions += s.regions->rows();
    total_tokens += s.tokens.size();
  }
  Tensor stacked({total_regions, config_.region_dim});
  std::size_t r = 0;
  for (const auto& s : batch) {
    std::copy(s.regions->data().begin(), s.regions->data().end(), stacked.data().begin() + static_cast<std::ptrdiff_t>(r * config_.region_dim));
    r += s.regions->rows();
  }
  const Var regions = num::add_row(num::matmul(g.constant(std::move(stacked), "regions"), param(g, "region_w")), param(g, "region_b"));
  const Var tokens = question_encoder(g, batch);
  const Var cls = param(g, "cls");
  // Pool rows: CLS at 0, regions from 1, tokens after them; gathered into sequence order.
  const Var pool = num::concat_rows(std::vector<Var>{cls, regions, tokens});
  layout.clear();
  std::vector<std::size_t> order;
  std::size_t start = 0, region_at = 1, token_at = 1 + total_regions;
  for (std::size_t b = 0; b < B; ++b) {
    SequenceLayout l{start, batch[b].regions->rows(), batch[b].tokens.size()};
    order.push_back(0);
    for (std::size_t m = 0; m < l.regions; ++m) order.push_back(region_at++);
    for (std::size_t i = 0; i < l.tokens; ++i) order.push_back(token_at++);
    start += l.length();
    layout.push_back(l);
  }
  return num::gather_rows(pool, order);
}

Var Encoder::layer(Graph& g, Var x, const std::vector<SequenceLayout>& layout, std::size_t index) const {
  if (index >= config_.layers) throw EncoderError("layer index out of range");
  const std::string p = "layer" + std::to_string(index) + "_";
  auto affine = [&](Var in, const std::string& w, const std::string& b) { return num::add_row(num::matmul(in, param(g, p + w)), param(g, p + b)); };
  auto norm = [&](Var in, const std::string& which) {
    return num::add_row(num::mul_row(num::layernorm_rows(in), param(g, p + which + "_g")), param(g, p + which + "_b"));
  };
  const Var q = affine(x, "wq", "bq"), k = affine(x, "wk", "bk"), v = affine(x, "wv", "bv");
  const Var att = affine(segmented_attention(q, k, v, layout, config_.heads, config_.plural_attention), "wo", "bo");
  const Var x1 = norm(x + att, "ln1");
  const Var ff = affine(num::relu(affine(x1, "ff1_w", "ff1_b")), "ff2_w", "ff2_b");
  return norm(x1 + ff, "ln2");
}

EncodedBatch Encoder::encode(Graph& g, std::span<const SequenceInput> batch) const {
  EncodedBatch out;
  Var x = layer_inputs(g, batch, out.layout);
  for (std::size_t l = 0; l < config_.layers; ++l) x = layer(g, x, out.layout, l);
  out.states = x;
  return out;
}

Var Encoder::answer_logits(Graph& g, Var cls) const { return num::add_row(num::matmul(cls, param(g, "answer_w")), param(g, "answer_b")); }

Var Encoder::project_ground(Graph& g, Var x) const { return num::add_row(num::matmul(x, param(g, "ground_w")), param(g, "ground_b")); }

Var Encoder::project_skill(Graph& g, Var x) const {
  const Var hidden = num::relu(num::add_row(num::matmul(x, param(g, "skill_w1")), param(g, "skill_b1")));
  return num::add_row(num::matmul(hidden, param(g, "skill_w2")), param(g, "skill_b2"));
}

Var Encoder::mlm_logits(Graph& g, Var x) const { return num::add_row(num::matmul(x, param(g, "mlm_w")), param(g, "mlm_b")); }

}  // namespace sepvqa::model
