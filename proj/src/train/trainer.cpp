#include "sepvqa/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "sepvqa/annotate/annotate.hpp"
#include "sepvqa/model/objectives.hpp"
#include "sepvqa/num/checkpoint.hpp"

namespace sepvqa::train {

using nlohmann::json;
using num::Tensor;
using num::Var;

std::string_view objective_name(Objective o) {
  switch (o) {
    case Objective::Base: return "base";
    case Objective::Full: return "full";
    case Objective::Grounding: return "grounding";
    case Objective::Skill: return "skill";
    case Objective::Mlm: return "mlm";
  }
  return "?";
}

std::optional<Objective> parse_objective(std::string_view name) {
  for (auto o : {Objective::Base, Objective::Full, Objective::Grounding, Objective::Skill, Objective::Mlm}) {
    if (objective_name(o) == name) return o;
  }
  return std::nullopt;
}

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.preset = "paper";
  c.encoder = model::EncoderConfig::paper();
  c.learning_rate = 1e-4;
  c.batch_size = 64;
  c.epochs = 13;
  c.decay_epochs = {10, 12};
  return c;
}

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.preset = "desk";
  c.encoder = model::EncoderConfig::desk();
  c.learning_rate = 1e-3;
  c.batch_size = 64;
  c.epochs = 3;
  c.decay_epochs = {2};
  c.contrastive_targets = 16;
  return c;
}

std::optional<TrainConfig> TrainConfig::preset_named(std::string_view name) {
  if (name == "paper") return paper();
  if (name == "desk") return desk();
  return std::nullopt;
}

void TrainConfig::validate() const {
  encoder.validate();
  if (!(p_sep >= 0.0 && p_sep <= 1.0)) throw TrainError("p_sep must lie in [0, 1]");
  if (!(learning_rate > 0.0)) throw TrainError("learning_rate must be positive");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw TrainError("decay_factor must lie in (0, 1]");
  if (batch_size == 0 || epochs == 0) throw TrainError("batch_size and epochs must be positive");
  if (skill_negatives == 0 || contrastive_targets == 0 || max_target_retries == 0) {
    throw TrainError("skill_negatives, contrastive_targets and max_target_retries must be positive");
  }
}

double TrainConfig::learning_rate_at(std::size_t epoch) const {
  double lr = learning_rate;
  for (std::size_t e : decay_epochs) {
    if (epoch >= e) lr *= decay_factor;
  }
  return lr;
}

namespace {

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size() || !std::isfinite(v)) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw TrainError("config key '" + key + "' expects a number, got '" + value + "'");
  }
}

std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  if (value.empty() || !std::all_of(value.begin(), value.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    throw TrainError("config key '" + key + "' expects a non-negative integer, got '" + value + "'");
  }
  try {
    return std::stoull(value);
  } catch (const std::exception&) {
    throw TrainError("config key '" + key + "' is out of range: '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw TrainError("config key '" + key + "' expects true or false, got '" + value + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& value) {
  if (key == "objective") {
    auto o = parse_objective(value);
    if (!o) throw TrainError("unknown objective '" + value + "' (base, full, grounding, skill, mlm)");
    objective = *o;
  } else if (key == "p_sep") {
    p_sep = parse_double(key, value);
  } else if (key == "learning_rate") {
    learning_rate = parse_double(key, value);
  } else if (key == "batch_size") {
    batch_size = parse_uint(key, value);
  } else if (key == "epochs") {
    epochs = parse_uint(key, value);
  } else if (key == "decay_factor") {
    decay_factor = parse_double(key, value);
  } else if (key == "decay_epochs") {
    decay_epochs.clear();
    std::stringstream ss(value);
    std::string part;
    while (std::getline(ss, part, ',')) {
      part = trim(part);
      if (!part.empty()) decay_epochs.push_back(parse_uint(key, part));
    }
  } else if (key == "skill_negatives") {
    skill_negatives = parse_uint(key, value);
  } else if (key == "contrastive_targets") {
    contrastive_targets = parse_uint(key, value);
  } else if (key == "max_target_retries") {
    max_target_retries = parse_uint(key, value);
  } else if (key == "stop_reference_gradients") {
    stop_reference_gradients = parse_bool(key, value);
  } else if (key == "seed") {
    seed = parse_uint(key, value);
  } else if (key == "hidden") {
    encoder.hidden = parse_uint(key, value);
  } else if (key == "layers") {
    encoder.layers = parse_uint(key, value);
  } else if (key == "heads") {
    encoder.heads = parse_uint(key, value);
  } else if (key == "tau_s") {
    encoder.tau_s = parse_double(key, value);
  } else if (key == "plural_attention") {
    encoder.plural_attention = parse_bool(key, value);
  } else {
    throw TrainError("unknown config key '" + key + "'");
  }
}

std::vector<std::pair<std::string, std::string>> parse_flat_config(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw TrainError("config line " + std::to_string(lineno) + ": expected key = value");
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (key.empty()) throw TrainError("config line " + std::to_string(lineno) + ": empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

std::string TrainConfig::to_json() const {
  json j = {{"preset", preset},
            {"encoder", json::parse(encoder.to_json())},
            {"objective", std::string(objective_name(objective))},
            {"p_sep", p_sep},
            {"learning_rate", learning_rate},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"decay_factor", decay_factor},
            {"decay_epochs", decay_epochs},
            {"skill_negatives", skill_negatives},
            {"contrastive_targets", contrastive_targets},
            {"max_target_retries", max_target_retries},
            {"stop_reference_gradients", stop_reference_gradients},
            {"seed", seed}};
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  TrainConfig c;
  try {
    const auto j = json::parse(text);
    c.preset = j.at("preset").get<std::string>();
    c.encoder = model::EncoderConfig::from_json(j.at("encoder").dump());
    const auto obj = j.at("objective").get<std::string>();
    auto o = parse_objective(obj);
    if (!o) throw TrainError("unknown objective '" + obj + "'");
    c.objective = *o;
    c.p_sep = j.at("p_sep").get<double>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.decay_factor = j.at("decay_factor").get<double>();
    c.decay_epochs = j.at("decay_epochs").get<std::vector<std::size_t>>();
    c.skill_negatives = j.at("skill_negatives").get<std::size_t>();
    c.contrastive_targets = j.at("contrastive_targets").get<std::size_t>();
    c.max_target_retries = j.at("max_target_retries").get<std::size_t>();
    c.stop_reference_gradients = j.at("stop_reference_gradients").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw TrainError(std::string("malformed training config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainingData::TrainingData(const std::vector<data::Example>& examples, std::vector<std::size_t> labeled, std::vector<std::size_t> pool,
                           const refmine::ReferenceCache* refs)
    : examples_(&examples), labeled_(std::move(labeled)), pool_(std::move(pool)), in_pool_(examples.size(), false), refs_(refs) {
  for (std::size_t i = 0; i < examples.size(); ++i) position_.emplace(examples[i].id, i);
  for (std::size_t p : labeled_) {
    if (p >= examples.size()) throw TrainError("labeled position out of range");
  }
  for (std::size_t p : pool_) in_pool_.at(p) = true;
  if (refs_) {
    for (const auto& e : refs_->entries()) entries_[e.grounding.target].push_back(&e);
  }
}

const data::Example& TrainingData::by_id(std::uint64_t id) const {
  auto it = position_.find(id);
  if (it == position_.end()) throw TrainError("example " + std::to_string(id) + " is not in the training data");
  return (*examples_)[it->second];
}

const std::vector<const refmine::ReferenceEntry*>& TrainingData::entries_for(std::uint64_t id) const {
  static const std::vector<const refmine::ReferenceEntry*> none;
  auto it = entries_.find(id);
  return it == entries_.end() ? none : it->second;
}

TrainState init_state(const TrainConfig& config) {
  config.validate();
  TrainState s;
  s.params = model::Encoder(config.encoder).init_params(num::derive_seed(config.seed, "init"));
  s.adam.config.learning_rate = config.learning_rate;
  s.sep_rng = num::Rng(num::derive_seed(config.seed, "sep"));
  return s;
}

std::vector<std::size_t> epoch_order(const TrainConfig& config, const TrainingData& data, std::size_t epoch) {
  std::vector<std::size_t> order = data.labeled();
  num::Rng rng(num::derive_seed(config.seed, "shuffle", epoch));
  rng.shuffle(order);
  return order;
}

namespace {

std::size_t mention_position(const data::Example& e, data::ConceptId c) {
  for (const auto& m : e.question.mentions) {
    if (m.concept_id == c) return m.index;
  }
  throw TrainError("example " + std::to_string(e.id) + " does not mention concept " + data::category_words()[static_cast<std::size_t>(c)]);
}

// Sequences and loss wiring of one contrastive target.
struct TargetPlan {
  std::size_t masked = 0;        // target with the concept masked
  std::size_t mask_position = 0;
  data::TokenId original = 0;
  std::size_t unmasked = 0;      // target as is, for the skill summary
  std::vector<std::size_t> grounding_refs;
  std::size_t grounding_ref_mention = 0;  // mention position inside the positive grounding reference
  std::vector<std::size_t> skill_refs;    // positive first
};

bool uses_grounding(Objective o) { return o == Objective::Full || o == Objective::Grounding; }
bool uses_skill(Objective o) { return o == Objective::Full || o == Objective::Skill; }

void json_line(std::ostream* log, const json& j) {
  if (log) *log << j.dump() << '\n';
}

double contrastive_update(TrainState& state, const TrainConfig& config, const TrainingData& data, std::ostream* log, std::size_t& used) {
  if (data.pool().empty()) throw TrainError("contrastive target pool is empty");
  const model::Encoder encoder(config.encoder);
  std::vector<model::SequenceInput> seqs;
  std::vector<TargetPlan> plans;
  auto push = [&](const data::Example& e, std::vector<data::TokenId> tokens) {
    seqs.push_back({&e.scene.regions, std::move(tokens)});
    return seqs.size() - 1;
  };
  for (std::size_t k = 0; k < config.contrastive_targets; ++k) {
    const std::vector<const refmine::ReferenceEntry*>* entries = nullptr;
    std::size_t pos = 0;
    for (std::size_t attempt = 0; attempt < config.max_target_retries; ++attempt) {
      pos = data.pool()[state.sep_rng.below(data.pool().size())];
      const auto& found = data.entries_for(data.examples()[pos].id);
      if (!found.empty()) {
        entries = &found;
        break;
      }
    }
    if (!entries) {
      ++state.counters.skipped_targets;
      json_line(log, {{"step", state.step}, {"kind", "skip"}, {"reason", "no cached references after retries"}});
      continue;
    }
    if (!data.in_pool(pos)) ++state.counters.targets_outside_pool;
    ++state.counters.contrastive_targets;
    const data::Example& target = data.examples()[pos];
    const refmine::ReferenceEntry& entry = *(*entries)[state.sep_rng.below(entries->size())];
    TargetPlan plan;
    const auto masked = annotate::mask_concept(target.question.tokens, target.question.mentions,
                                               mention_position(target, entry.grounding.concept_id));
    plan.mask_position = masked.position;
    plan.original = masked.original;
    if (uses_grounding(config.objective) || config.objective == Objective::Mlm) plan.masked = push(target, masked.tokens);
    if (uses_grounding(config.objective)) {
      const auto g = refmine::sample_grounding_references(entry.grounding, state.sep_rng);
      const data::Example& positive = data.by_id(g.positive);
      plan.grounding_ref_mention = mention_position(positive, entry.grounding.concept_id);
      plan.grounding_refs.push_back(push(positive, positive.question.tokens));
      for (auto id : {g.negative_text, g.negative_visual}) plan.grounding_refs.push_back(push(data.by_id(id), data.by_id(id).question.tokens));
    }
    if (uses_skill(config.objective)) {
      plan.unmasked = push(target, target.question.tokens);
      const auto s = refmine::sample_skill_references(entry.skill, 1, config.skill_negatives, state.sep_rng);
      for (auto id : s.positives) plan.skill_refs.push_back(push(data.by_id(id), data.by_id(id).question.tokens));
      for (auto id : s.negatives) plan.skill_refs.push_back(push(data.by_id(id), data.by_id(id).question.tokens));
    }
    plans.push_back(std::move(plan));
  }
  used = plans.size();
  if (plans.empty()) return 0.0;

  num::Graph g;
  const auto enc = encoder.encode(g, seqs);
  auto ref = [&](Var v) { return config.stop_reference_gradients ? model::stop_gradient(v) : v; };
  std::vector<Var> terms;
  std::vector<model::LossValue> parts;
  for (const auto& plan : plans) {
    if (uses_grounding(config.objective)) {
      std::vector<Var> rows;
      std::vector<bool> flags;
      for (std::size_t r = 0; r < plan.grounding_refs.size(); ++r) {
        const std::size_t b = plan.grounding_refs[r];
        rows.push_back(ref(enc.tokens(b)));
        for (std::size_t i = 0; i < enc.layout[b].tokens; ++i) flags.push_back(r == 0 && i == plan.grounding_ref_mention);
      }
      auto loss = model::grounding_loss(encoder, enc.token(plan.masked, plan.mask_position), num::concat_rows(rows), flags);
      terms.push_back(loss.value);
      parts.push_back(loss);
    }
    if (uses_skill(config.objective)) {
      std::vector<Var> rows;
      std::vector<bool> flags;
      for (std::size_t r = 0; r < plan.skill_refs.size(); ++r) {
        rows.push_back(ref(enc.summary(plan.skill_refs[r])));
        flags.push_back(r == 0);
      }
      auto loss = model::skill_loss(encoder, enc.summary(plan.unmasked), num::concat_rows(rows), flags);
      terms.push_back(loss.value);
      parts.push_back(loss);
    }
    if (config.objective == Objective::Mlm) {
      auto loss = model::mlm_loss(encoder, enc.token(plan.masked, plan.mask_position), plan.original);
      terms.push_back(loss.value);
      parts.push_back(loss);
    }
  }
  Var total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = total + terms[i];
  total = num::scale(total, 1.0 / static_cast<double>(plans.size()));
  const auto ev = num::evaluate(g, state.params);
  const auto grads = num::gradients(g, ev, total);
  num::adam_step(state.adam, state.params, grads);
  const double value = ev[total].item();
  if (log) {
    double pos_sim = 0.0, neg_sim = 0.0;
    for (const auto& p : parts) {
      const auto d = model::diagnose(ev, p);
      pos_sim += d.positive_similarity;
      neg_sim += d.mean_negative_similarity;
    }
    json_line(log, {{"step", state.step},
                    {"kind", std::string(objective_name(config.objective))},
                    {"value", value},
                    {"targets", plans.size()},
                    {"positive_similarity", pos_sim / static_cast<double>(parts.size())},
                    {"mean_negative_similarity", neg_sim / static_cast<double>(parts.size())}});
  }
  return value;
}

}  // namespace

StepReport train_step(TrainState& state, const TrainConfig& config, const TrainingData& data, const std::vector<std::size_t>& batch,
                      std::ostream* log) {
  if (batch.empty()) throw TrainError("empty labeled batch");
  const model::Encoder encoder(config.encoder);
  state.adam.config.learning_rate = config.learning_rate_at(state.epoch);
  StepReport report;
  {
    std::vector<model::SequenceInput> seqs;
    std::vector<std::optional<int>> gold;
    for (std::size_t p : batch) {
      const auto& e = data.examples().at(p);
      if (!e.question.labeled || !e.question.answer) {
        ++state.counters.unlabeled_vqa;
        throw TrainError("example " + std::to_string(e.id) + " has no label and cannot enter the VQA loss");
      }
      seqs.push_back({&e.scene.regions, e.question.tokens});
      gold.push_back(e.question.answer);
    }
    num::Graph g;
    const auto enc = encoder.encode(g, seqs);
    const auto loss = model::vqa_loss(encoder.answer_logits(g, enc.cls()), gold);
    const auto ev = num::evaluate(g, state.params);
    const auto grads = num::gradients(g, ev, loss.value);
    num::adam_step(state.adam, state.params, grads);
    report.vqa_loss = ev[loss.value].item();
    state.counters.vqa_examples += batch.size();
    json_line(log, {{"step", state.step}, {"epoch", state.epoch}, {"kind", "vqa"}, {"value", report.vqa_loss}});
  }
  const bool fire = state.sep_rng.bernoulli(config.p_sep) && config.objective != Objective::Base;
  if (fire) {
    report.contrastive_loss = contrastive_update(state, config, data, log, report.targets_used);
    report.contrastive = report.targets_used > 0;
    if (report.contrastive) ++state.counters.contrastive_updates;
  }
  ++state.step;
  return report;
}

std::vector<EpochSummary> train(TrainState& state, const TrainConfig& config, const TrainingData& data, std::ostream* log,
                                std::optional<std::uint64_t> stop_at_step) {
  config.validate();
  if (data.labeled().empty()) throw TrainError("no labeled training examples");
  std::vector<EpochSummary> history;
  while (state.epoch < config.epochs) {
    const auto order = epoch_order(config, data, state.epoch);
    const std::size_t batches = (order.size() + config.batch_size - 1) / config.batch_size;
    EpochSummary summary;
    summary.epoch = state.epoch;
    double contrastive_sum = 0.0;
    while (state.batch_in_epoch < batches) {
      if (stop_at_step && state.step >= *stop_at_step) {
        if (summary.steps) history.push_back(summary);
        return history;
      }
      const std::size_t begin = state.batch_in_epoch * config.batch_size;
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end));
      const auto r = train_step(state, config, data, batch, log);
      ++state.batch_in_epoch;
      ++summary.steps;
      summary.mean_vqa_loss += (r.vqa_loss - summary.mean_vqa_loss) / static_cast<double>(summary.steps);
      if (r.contrastive) {
        ++summary.contrastive_updates;
        contrastive_sum += r.contrastive_loss;
      }
    }
    if (summary.contrastive_updates) summary.mean_contrastive_loss = contrastive_sum / static_cast<double>(summary.contrastive_updates);
    history.push_back(summary);
    ++state.epoch;
    state.batch_in_epoch = 0;
  }
  return history;
}

namespace {

Tensor row_of(const std::vector<double>& v) { return Tensor({v.size()}, v); }

}  // namespace

num::TensorMap state_to_tensors(const TrainState& s) {
  num::TensorMap out;
  for (const auto& [name, t] : s.params) out.emplace("param/" + name, t);
  for (const auto& [name, t] : s.adam.first_moment) out.emplace("adam_m/" + name, t);
  for (const auto& [name, t] : s.adam.second_moment) out.emplace("adam_v/" + name, t);
  const auto& c = s.counters;
  out.emplace("state/scalars", row_of({static_cast<double>(s.step), static_cast<double>(s.epoch), static_cast<double>(s.batch_in_epoch),
                                       static_cast<double>(s.adam.step), s.adam.config.learning_rate, s.adam.config.beta1,
                                       s.adam.config.beta2, s.adam.config.epsilon, static_cast<double>(c.vqa_examples),
                                       static_cast<double>(c.unlabeled_vqa), static_cast<double>(c.contrastive_updates),
                                       static_cast<double>(c.contrastive_targets), static_cast<double>(c.targets_outside_pool),
                                       static_cast<double>(c.skipped_targets)}));
  std::vector<double> words;
  for (std::uint64_t w : s.sep_rng.state_words()) {
    words.push_back(static_cast<double>(w >> 32));
    words.push_back(static_cast<double>(w & 0xffffffffULL));
  }
  out.emplace("state/rng", row_of(words));
  return out;
}

TrainState state_from_tensors(const num::TensorMap& tensors) {
  TrainState s;
  auto find = [&](const std::string& name) -> const Tensor& {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw TrainError("checkpoint lacks '" + name + "'");
    return it->second;
  };
  const Tensor& sc = find("state/scalars");
  if (sc.size() != 14) throw TrainError("checkpoint scalar block has " + std::to_string(sc.size()) + " entries, expected 14");
  auto u = [&](std::size_t i) { return static_cast<std::uint64_t>(sc[i]); };
  s.step = u(0);
  s.epoch = u(1);
  s.batch_in_epoch = u(2);
  s.adam.step = u(3);
  s.adam.config = {sc[4], sc[5], sc[6], sc[7]};
  s.counters = {u(8), u(9), u(10), u(11), u(12), u(13)};
  const Tensor& r = find("state/rng");
  if (r.size() % 2 != 0) throw TrainError("checkpoint rng block has odd length");
  std::vector<std::uint64_t> words;
  for (std::size_t i = 0; i < r.size(); i += 2) words.push_back((static_cast<std::uint64_t>(r[i]) << 32) | static_cast<std::uint64_t>(r[i + 1]));
  try {
    s.sep_rng.set_state_words(words);
  } catch (const std::exception& e) {
    throw TrainError(std::string("checkpoint rng state: ") + e.what());
  }
  for (const auto& [name, t] : tensors) {
    if (name.starts_with("param/")) s.params.emplace(name.substr(6), t);
    else if (name.starts_with("adam_m/")) s.adam.first_moment.emplace(name.substr(7), t);
    else if (name.starts_with("adam_v/")) s.adam.second_moment.emplace(name.substr(7), t);
    else if (!name.starts_with("state/")) throw TrainError("unexpected checkpoint record '" + name + "'");
  }
  if (s.params.empty()) throw TrainError("checkpoint holds no parameters");
  return s;
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) { num::save_tensors(path, state_to_tensors(state)); }

TrainState load_checkpoint(const std::filesystem::path& path) { return state_from_tensors(num::load_tensors(path)); }

}  // namespace sepvqa::train
