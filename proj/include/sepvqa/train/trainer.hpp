#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "sepvqa/data/dataset.hpp"
#include "sepvqa/model/encoder.hpp"
#include "sepvqa/num/adam.hpp"
#include "sepvqa/num/random.hpp"
#include "sepvqa/refmine/refmine.hpp"

namespace sepvqa::train {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Losses applied on top of the VQA loss in the optional second update of a step.
enum class Objective { Base, Full, Grounding, Skill, Mlm };

std::string_view objective_name(Objective o);
std::optional<Objective> parse_objective(std::string_view name);

struct TrainConfig {
  std::string preset = "desk";
  model::EncoderConfig encoder = model::EncoderConfig::desk();
  Objective objective = Objective::Full;
  double p_sep = 0.1;
  double learning_rate = 1e-4;
  std::size_t batch_size = 64;
  std::size_t epochs = 13;
  double decay_factor = 0.2;
  /// Epoch indices (0-based) at whose start the learning rate is multiplied by decay_factor.
  std::vector<std::size_t> decay_epochs;
  /// Negatives per skill reference set; grounding sets always take one from each negative pool.
  std::size_t skill_negatives = 2;
  /// Targets per contrastive update.
  std::size_t contrastive_targets = 1;
  std::size_t max_target_retries = 10;
  bool stop_reference_gradients = false;
  std::uint64_t seed = 0;

  static TrainConfig paper();
  static TrainConfig desk();
  static std::optional<TrainConfig> preset_named(std::string_view name);
  void validate() const;

  /// Sets one field from its flat key=value form; throws TrainError for unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);

  double learning_rate_at(std::size_t epoch) const;
};

/// Reads `key = value` lines (blank lines and `#` comments allowed) into (key, value) pairs.
std::vector<std::pair<std::string, std::string>> parse_flat_config(const std::string& text);

/// Training view over a split dataset: D^a positions feed the VQA loss, D^a ∪ D^u positions
/// are the contrastive target pool.
class TrainingData {
 public:
  TrainingData(const std::vector<data::Example>& examples, std::vector<std::size_t> labeled, std::vector<std::size_t> pool,
               const refmine::ReferenceCache* refs);

  const std::vector<data::Example>& examples() const { return *examples_; }
  const std::vector<std::size_t>& labeled() const { return labeled_; }
  const std::vector<std::size_t>& pool() const { return pool_; }
  const refmine::ReferenceCache* refs() const { return refs_; }
  const data::Example& by_id(std::uint64_t id) const;
  bool in_pool(std::size_t position) const { return in_pool_.at(position); }
  const std::vector<const refmine::ReferenceEntry*>& entries_for(std::uint64_t id) const;

 private:
  const std::vector<data::Example>* examples_;
  std::vector<std::size_t> labeled_;
  std::vector<std::size_t> pool_;
  std::vector<bool> in_pool_;
  const refmine::ReferenceCache* refs_;
  std::map<std::uint64_t, std::size_t> position_;
  std::map<std::uint64_t, std::vector<const refmine::ReferenceEntry*>> entries_;
};

struct TrainCounters {
  std::uint64_t vqa_examples = 0;
  /// Examples without a gold answer that reached the VQA loss; stays zero.
  std::uint64_t unlabeled_vqa = 0;
  std::uint64_t contrastive_updates = 0;
  std::uint64_t contrastive_targets = 0;
  /// Contrastive targets drawn from outside D^a ∪ D^u; stays zero.
  std::uint64_t targets_outside_pool = 0;
  std::uint64_t skipped_targets = 0;

  friend bool operator==(const TrainCounters&, const TrainCounters&) = default;
};

struct TrainState {
  num::TensorMap params;
  num::AdamState adam;
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  std::size_t batch_in_epoch = 0;
  num::Rng sep_rng;
  TrainCounters counters;
};

TrainState init_state(const TrainConfig& config);

struct StepReport {
  double vqa_loss = 0.0;
  bool contrastive = false;
  double contrastive_loss = 0.0;
  std::size_t targets_used = 0;
};

/// One VQA update on the labeled batch then, with probability p_sep, one update on the
/// contrastive (or MLM) objective for targets drawn from D^a ∪ D^u.
StepReport train_step(TrainState& state, const TrainConfig& config, const TrainingData& data, const std::vector<std::size_t>& batch,
                      std::ostream* log = nullptr);

struct EpochSummary {
  std::size_t epoch = 0;
  double mean_vqa_loss = 0.0;
  std::size_t steps = 0;
  std::size_t contrastive_updates = 0;
  double mean_contrastive_loss = 0.0;
};

/// Runs (or resumes) training until `config.epochs` are done, or until `stop_at_step` steps
/// when given. Logs one JSON line per step when `log` is set.
std::vector<EpochSummary> train(TrainState& state, const TrainConfig& config, const TrainingData& data, std::ostream* log = nullptr,
                                std::optional<std::uint64_t> stop_at_step = std::nullopt);

/// Labeled positions of one epoch in training order.
std::vector<std::size_t> epoch_order(const TrainConfig& config, const TrainingData& data, std::size_t epoch);

num::TensorMap state_to_tensors(const TrainState& state);
TrainState state_from_tensors(const num::TensorMap& tensors);
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

}  // namespace sepvqa::train
