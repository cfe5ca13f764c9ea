#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "sepvqa/annotate/annotate.hpp"
#include "sepvqa/eval/metrics.hpp"
#include "sepvqa/eval/split.hpp"
#include "sepvqa/refmine/refmine.hpp"
#include "sepvqa/train/trainer.hpp"

namespace sepvqa::eval {

/// Dataset, split and reference caches shared by every cell of an ablation.
struct BenchmarkInputs {
  std::vector<data::Example> dataset;
  Split split;
  /// Dataset as training sees it: D^u answers removed.
  std::vector<data::Example> view;
  annotate::ConceptLexicon lexicon;
  refmine::ReferenceCache ccc;
  refmine::ReferenceCache random;
};

/// Lexicon over the training questions and the mining corpus over D^a ∪ D^u.
annotate::ConceptLexicon training_lexicon(const std::vector<data::Example>& view, const Split& split);
refmine::Corpus training_corpus(const std::vector<data::Example>& view, const Split& split, const annotate::ConceptLexicon& lexicon,
                                const refmine::MiningConfig& mining);

BenchmarkInputs prepare_benchmark(const data::DatasetConfig& data_config, const SplitSpec& split_spec, const refmine::MiningConfig& mining);

/// Training data over a split view: D^a for the VQA loss, D^a ∪ D^u as target pool.
train::TrainingData training_data(const std::vector<data::Example>& view, const Split& split, const refmine::ReferenceCache* refs);

struct AblationArm {
  std::string name;
  train::TrainConfig config;
  refmine::ReferenceScheme scheme = refmine::ReferenceScheme::Ccc;
};

/// Base, Base+MLM, Base+L_s, Base+L_g, Ours and Ours with random references, all derived from `base`.
std::vector<AblationArm> standard_arms(const train::TrainConfig& base);
std::optional<AblationArm> arm_named(const train::TrainConfig& base, const std::string& name);

struct AblationCell {
  std::string arm;
  std::uint64_t seed = 0;
  std::optional<MetricsReport> report;
  /// Failure message (for example a diverged loss), empty on success.
  std::string error;
  double seconds = 0.0;
};

/// Trains and evaluates one arm at one seed. Failures are captured in the cell.
AblationCell run_cell(const BenchmarkInputs& inputs, const AblationArm& arm, std::uint64_t seed, std::ostream* log = nullptr);

struct AggregateRow {
  std::string arm;
  std::size_t runs = 0;
  std::size_t failures = 0;
  /// Column name to (mean, sample stdev) over successful runs.
  std::map<std::string, std::pair<double, double>> columns;
};

/// Column order: each held-out slice, "novel", "iid", "recall@5".
std::vector<std::string> table_columns(const std::vector<std::string>& slices);
std::vector<AggregateRow> aggregate(const std::vector<AblationCell>& cells, const std::vector<std::string>& arm_order);
std::string render_table(const std::vector<AggregateRow>& rows, const std::vector<std::string>& columns);
std::string table_json(const std::vector<AggregateRow>& rows, const std::vector<AblationCell>& cells);

}  // namespace sepvqa::eval
