#include "sepvqa/eval/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace sepvqa::eval {

using nlohmann::json;
using num::Tensor;
using num::Var;

std::vector<int> predict(const model::Encoder& encoder, const num::TensorMap& params, const std::vector<data::Example>& examples,
                         const std::vector<std::size_t>& positions, std::size_t batch_size) {
  if (batch_size == 0) throw MetricsError("batch size must be positive");
  std::vector<int> out;
  out.reserve(positions.size());
  for (std::size_t begin = 0; begin < positions.size(); begin += batch_size) {
    const std::size_t end = std::min(positions.size(), begin + batch_size);
    std::vector<model::SequenceInput> seqs;
    for (std::size_t i = begin; i < end; ++i) {
      const auto& e = examples.at(positions[i]);
      seqs.push_back({&e.scene.regions, e.question.tokens});
    }
    num::Graph g;
    const auto enc = encoder.encode(g, seqs);
    const auto logits = encoder.answer_logits(g, enc.cls());
    const auto ev = num::evaluate(g, params);
    const Tensor& l = ev[logits];
    for (std::size_t r = 0; r < l.rows(); ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < l.cols(); ++c) {
        if (l.at(r, c) > l.at(r, best)) best = c;
      }
      out.push_back(static_cast<int>(best));
    }
  }
  return out;
}

double vqa_accuracy(const std::vector<int>& predictions, const std::vector<int>& gold) {
  if (predictions.size() != gold.size()) throw MetricsError("prediction and gold lists differ in length");
  if (gold.empty()) throw MetricsError("accuracy of an empty test set is undefined");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hits += predictions[i] == gold[i];
  return 100.0 * static_cast<double>(hits) / static_cast<double>(gold.size());
}

std::vector<GroundingTuple> grounding_tuples(const std::vector<data::Example>& examples, const std::vector<std::size_t>& positions) {
  std::vector<GroundingTuple> out;
  for (std::size_t p : positions) {
    const auto& e = examples.at(p);
    for (const auto& m : e.question.mentions) {
      auto gold = e.scene.gold_regions(m.concept_id);
      if (!gold.empty()) out.push_back({p, m.index, std::move(gold)});
    }
  }
  return out;
}

std::vector<double> region_scores(const Tensor& h, const Tensor& z) {
  if (h.size() != z.cols()) throw MetricsError("token and region widths differ");
  const double scale = 1.0 / std::sqrt(static_cast<double>(h.size()));
  std::vector<double> s(z.rows());
  for (std::size_t m = 0; m < z.rows(); ++m) {
    double acc = 0.0;
    for (std::size_t j = 0; j < h.size(); ++j) acc += h[j] * z.at(m, j);
    s[m] = acc * scale;
  }
  return s;
}

bool hit_at_k(const std::vector<double>& scores, const std::vector<std::size_t>& gold, std::size_t k) {
  if (gold.empty()) throw MetricsError("grounding tuple without gold regions");
  for (std::size_t g : gold) {
    if (g >= scores.size()) throw MetricsError("gold region index out of range");
    std::size_t above = 0;
    for (double s : scores) above += s > scores[g];
    if (above < k) return true;
  }
  return false;
}

RecallResult grounding_recall_at_k(const model::Encoder& encoder, const num::TensorMap& params, const std::vector<data::Example>& examples,
                                   const std::vector<GroundingTuple>& tuples, std::size_t k, bool projected, std::size_t batch_size) {
  if (k == 0) throw MetricsError("k must be positive");
  RecallResult r;
  std::size_t hits = 0;
  for (std::size_t begin = 0; begin < tuples.size(); begin += batch_size) {
    const std::size_t end = std::min(tuples.size(), begin + batch_size);
    std::vector<model::SequenceInput> seqs;
    for (std::size_t i = begin; i < end; ++i) {
      const auto& t = tuples[i];
      const auto& e = examples.at(t.position);
      const bool is_mention = std::any_of(e.question.mentions.begin(), e.question.mentions.end(), [&](const auto& m) { return m.index == t.token; });
      if (!is_mention) throw MetricsError("token " + std::to_string(t.token) + " of example " + std::to_string(e.id) + " is not a concept mention");
      seqs.push_back({&e.scene.regions, e.question.tokens});
    }
    num::Graph g;
    const auto enc = encoder.encode(g, seqs);
    std::vector<std::pair<Var, Var>> pairs;
    for (std::size_t b = 0; b < seqs.size(); ++b) {
      Var h = enc.token(b, tuples[begin + b].token);
      Var z = enc.regions(b);
      if (projected) {
        h = encoder.project_ground(g, h);
        z = encoder.project_ground(g, z);
      }
      pairs.emplace_back(h, z);
    }
    const auto ev = num::evaluate(g, params);
    for (std::size_t b = 0; b < seqs.size(); ++b) {
      const auto& t = tuples[begin + b];
      const bool hit = hit_at_k(region_scores(ev[pairs[b].first], ev[pairs[b].second]), t.gold_regions, k);
      if (enc.layout[b].regions <= k) {
        ++r.degenerate;
        r.degenerate_hits += hit;
      } else {
        ++r.counted;
        hits += hit;
      }
    }
  }
  r.recall = r.counted ? 100.0 * static_cast<double>(hits) / static_cast<double>(r.counted) : 0.0;
  return r;
}

std::string MetricsReport::to_json() const {
  json s = json::object();
  for (const auto& [name, m] : slices) s[name] = {{"accuracy", m.accuracy}, {"size", m.size}};
  json j = {{"metric", metric},
            {"slices", s},
            {"novel_slices", novel_slices},
            {"novel_mean", novel_mean},
            {"overall", overall},
            {"recall", {{"recall", recall.recall}, {"counted", recall.counted}, {"degenerate", recall.degenerate}, {"degenerate_hits", recall.degenerate_hits}}},
            {"metadata", metadata}};
  return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  MetricsReport r;
  try {
    const auto j = json::parse(text);
    r.metric = j.at("metric").get<std::string>();
    for (const auto& [name, m] : j.at("slices").items()) r.slices[name] = {m.at("accuracy").get<double>(), m.at("size").get<std::size_t>()};
    r.novel_slices = j.at("novel_slices").get<std::vector<std::string>>();
    r.novel_mean = j.at("novel_mean").get<double>();
    r.overall = j.at("overall").get<double>();
    const auto& rc = j.at("recall");
    r.recall = {rc.at("recall").get<double>(), rc.at("counted").get<std::size_t>(), rc.at("degenerate").get<std::size_t>(),
                rc.at("degenerate_hits").get<std::size_t>()};
    r.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw MetricsError(std::string("malformed metrics report: ") + e.what());
  }
  return r;
}

MetricsReport evaluate_model(const model::Encoder& encoder, const num::TensorMap& params, const std::vector<data::Example>& dataset,
                             const Split& split, std::size_t k) {
  if (dataset.size() != split.ids.size()) throw MetricsError("split and dataset sizes differ");
  MetricsReport report;
  const auto test = split.indices(Partition::Test);
  const auto predictions = predict(encoder, params, dataset, test);
  std::map<std::size_t, int> predicted;
  for (std::size_t i = 0; i < test.size(); ++i) predicted[test[i]] = predictions[i];
  auto gold_of = [&](std::size_t p) {
    const auto& a = dataset[p].question.answer;
    if (!a) throw MetricsError("test example " + std::to_string(dataset[p].id) + " has no gold answer");
    return *a;
  };
  auto score = [&](const std::vector<std::size_t>& positions) {
    std::vector<int> pred, gold;
    for (std::size_t p : positions) {
      pred.push_back(predicted.at(p));
      gold.push_back(gold_of(p));
    }
    return SliceMetrics{vqa_accuracy(pred, gold), positions.size()};
  };
  for (const auto& name : split.slice_names()) {
    report.slices[name] = score(split.test_indices(name));
    report.novel_slices.push_back(name);
    report.novel_mean += report.slices[name].accuracy;
  }
  if (!report.novel_slices.empty()) report.novel_mean /= static_cast<double>(report.novel_slices.size());
  const auto iid = split.test_indices(kIidSlice);
  if (!iid.empty()) report.slices[kIidSlice] = score(iid);
  report.overall = score(test).accuracy;
  report.recall = grounding_recall_at_k(encoder, params, dataset, grounding_tuples(dataset, test), k);
  report.metadata["split_hash"] = split.hash();
  return report;
}

}  // namespace sepvqa::eval
