#include "sepvqa/eval/ablation.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>

#include "json.hpp"
#include "sepvqa/num/checkpoint.hpp"
#include "sepvqa/util/hash.hpp"

namespace sepvqa::eval {

using nlohmann::json;

namespace {

std::vector<std::size_t> pool_positions(const Split& split) {
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < split.partition.size(); ++i) {
    if (split.partition[i] != Partition::Test) pool.push_back(i);
  }
  return pool;
}

}  // namespace

annotate::ConceptLexicon training_lexicon(const std::vector<data::Example>& view, const Split& split) {
  std::vector<data::QuestionRecord> questions;
  for (std::size_t p : pool_positions(split)) questions.push_back(view.at(p).question);
  return annotate::discover_concepts(questions, data::noun_words().size());
}

refmine::Corpus training_corpus(const std::vector<data::Example>& view, const Split& split, const annotate::ConceptLexicon& lexicon,
                                const refmine::MiningConfig& mining) {
  std::vector<data::Example> pool;
  for (std::size_t p : pool_positions(split)) pool.push_back(view.at(p));
  return refmine::Corpus(std::move(pool), lexicon, refmine::ContextEmbedder(num::derive_seed(mining.seed, "context"), mining.embed_dim));
}

BenchmarkInputs prepare_benchmark(const data::DatasetConfig& data_config, const SplitSpec& split_spec, const refmine::MiningConfig& mining) {
  BenchmarkInputs in;
  in.dataset = data::build_dataset(data_config);
  in.split = build_novel_splits(in.dataset, split_spec);
  in.view = apply_split(in.dataset, in.split);
  in.lexicon = training_lexicon(in.view, in.split);
  const auto corpus = training_corpus(in.view, in.split, in.lexicon, mining);
  in.ccc = refmine::mine_references(corpus, mining, refmine::ReferenceScheme::Ccc);
  in.random = refmine::mine_references(corpus, mining, refmine::ReferenceScheme::Random);
  return in;
}

train::TrainingData training_data(const std::vector<data::Example>& view, const Split& split, const refmine::ReferenceCache* refs) {
  return train::TrainingData(view, split.indices(Partition::Labeled), pool_positions(split), refs);
}

std::vector<AblationArm> standard_arms(const train::TrainConfig& base) {
  auto with = [&](train::Objective o) {
    auto c = base;
    c.objective = o;
    return c;
  };
  return {{"Base", with(train::Objective::Base), refmine::ReferenceScheme::Ccc},
          {"Base+MLM", with(train::Objective::Mlm), refmine::ReferenceScheme::Ccc},
          {"Base+L_s", with(train::Objective::Skill), refmine::ReferenceScheme::Ccc},
          {"Base+L_g", with(train::Objective::Grounding), refmine::ReferenceScheme::Ccc},
          {"Ours", with(train::Objective::Full), refmine::ReferenceScheme::Ccc},
          {"Ours-random-refs", with(train::Objective::Full), refmine::ReferenceScheme::Random}};
}

std::optional<AblationArm> arm_named(const train::TrainConfig& base, const std::string& name) {
  for (auto& a : standard_arms(base)) {
    if (a.name == name) return a;
  }
  return std::nullopt;
}

AblationCell run_cell(const BenchmarkInputs& inputs, const AblationArm& arm, std::uint64_t seed, std::ostream* log) {
  AblationCell cell;
  cell.arm = arm.name;
  cell.seed = seed;
  const auto start = std::chrono::steady_clock::now();
  try {
    auto config = arm.config;
    config.seed = seed;
    const auto& refs = arm.scheme == refmine::ReferenceScheme::Ccc ? inputs.ccc : inputs.random;
    const auto data = training_data(inputs.view, inputs.split, &refs);
    auto state = train::init_state(config);
    train::train(state, config, data, log);
    if (state.counters.unlabeled_vqa != 0 || state.counters.targets_outside_pool != 0) throw train::TrainError("training audit failed");
    auto report = evaluate_model(model::Encoder(config.encoder), state.params, inputs.dataset, inputs.split);
    report.metadata["arm"] = arm.name;
    report.metadata["seed"] = std::to_string(seed);
    report.metadata["config_hash"] = util::hash_hex(config.to_json());
    report.metadata["refs_hash"] = util::hash_hex(refs.to_jsonl());
    report.metadata["checkpoint_hash"] = util::hash_hex(num::encode_tensors(train::state_to_tensors(state)));
    cell.report = std::move(report);
  } catch (const std::exception& e) {
    cell.error = e.what();
  }
  cell.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return cell;
}

std::vector<std::string> table_columns(const std::vector<std::string>& slices) {
  auto cols = slices;
  cols.push_back("novel");
  cols.push_back(kIidSlice);
  cols.push_back("recall@5");
  return cols;
}

namespace {

std::map<std::string, double> cell_values(const MetricsReport& r) {
  std::map<std::string, double> v;
  for (const auto& [name, m] : r.slices) v[name] = m.accuracy;
  v["novel"] = r.novel_mean;
  v["recall@5"] = r.recall.recall;
  return v;
}

}  // namespace

std::vector<AggregateRow> aggregate(const std::vector<AblationCell>& cells, const std::vector<std::string>& arm_order) {
  std::vector<AggregateRow> rows;
  for (const auto& arm : arm_order) {
    AggregateRow row;
    row.arm = arm;
    std::map<std::string, std::vector<double>> values;
    for (const auto& c : cells) {
      if (c.arm != arm) continue;
      ++row.runs;
      if (!c.report) {
        ++row.failures;
        continue;
      }
      for (const auto& [k, v] : cell_values(*c.report)) values[k].push_back(v);
    }
    for (const auto& [k, vs] : values) {
      double mean = 0.0;
      for (double x : vs) mean += x;
      mean /= static_cast<double>(vs.size());
      double var = 0.0;
      for (double x : vs) var += (x - mean) * (x - mean);
      const double sd = vs.size() > 1 ? std::sqrt(var / static_cast<double>(vs.size() - 1)) : 0.0;
      row.columns[k] = {mean, sd};
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string render_table(const std::vector<AggregateRow>& rows, const std::vector<std::string>& columns) {
  std::string out;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-18s", "config");
  out += buf;
  for (const auto& c : columns) {
    std::snprintf(buf, sizeof buf, " %17s", c.c_str());
    out += buf;
  }
  out += "\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-18s", r.arm.c_str());
    out += buf;
    for (const auto& c : columns) {
      auto it = r.columns.find(c);
      if (it == r.columns.end()) {
        std::snprintf(buf, sizeof buf, " %17s", "n/a");
      } else {
        std::snprintf(buf, sizeof buf, " %9.2f ± %5.2f", it->second.first, it->second.second);
      }
      out += buf;
    }
    if (r.failures) out += "  (" + std::to_string(r.failures) + " of " + std::to_string(r.runs) + " runs failed)";
    out += "\n";
  }
  return out;
}

std::string table_json(const std::vector<AggregateRow>& rows, const std::vector<AblationCell>& cells) {
  json j;
  j["metric"] = "exact-match accuracy";
  json rs = json::array();
  for (const auto& r : rows) {
    json cols = json::object();
    for (const auto& [k, v] : r.columns) cols[k] = {{"mean", v.first}, {"stdev", v.second}};
    rs.push_back({{"arm", r.arm}, {"runs", r.runs}, {"failures", r.failures}, {"columns", cols}});
  }
  j["rows"] = rs;
  json cs = json::array();
  for (const auto& c : cells) {
    json cj = {{"arm", c.arm}, {"seed", c.seed}, {"error", c.error}};
    if (c.report) cj["report"] = json::parse(c.report->to_json());
    cs.push_back(cj);
  }
  j["cells"] = cs;
  return j.dump(2);
}

}  // namespace sepvqa::eval
