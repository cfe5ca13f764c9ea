// Command-line entry points: gen-data, mine-refs, train, eval, ablate, report.

#include <atomic>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "sepvqa/eval/ablation.hpp"
#include "sepvqa/num/checkpoint.hpp"
#include "sepvqa/util/hash.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sepvqa;

namespace {

/// Bad flags, bad config values or missing inputs: exit status 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw UsageError(what + " not found: " + path.string());
}

// Runs `fn` and maps any exception to a usage error.
template <class F>
auto as_usage(F&& fn) {
  try {
    return fn();
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

/// The one manifest a command writes into its output directory.
class Manifest {
 public:
  explicit Manifest(std::string command) {
    j_["command"] = std::move(command);
    j_["started"] = now_utc();
    j_["inputs"] = json::object();
    j_["outputs"] = json::object();
  }
  void set(const std::string& key, json value) { j_[key] = std::move(value); }
  void input(const fs::path& path) { j_["inputs"][path.string()] = util::hash_file(path); }
  void output(const fs::path& path) { j_["outputs"][path.string()] = util::hash_file(path); }
  void write(const fs::path& dir, int status, const std::string& error) {
    j_["finished"] = now_utc();
    j_["exit_status"] = status;
    if (!error.empty()) j_["error"] = error;
    std::error_code ec;
    fs::create_directories(dir, ec);
    std::ofstream out(dir / "manifest.json");
    if (out) out << j_.dump(2) << '\n';
  }

 private:
  json j_;
};

int run_command(Manifest& manifest, const std::string& out_dir, const std::function<void()>& body) {
  int status = 0;
  std::string error;
  try {
    body();
  } catch (const UsageError& e) {
    status = kExitUsage;
    error = e.what();
  } catch (const std::exception& e) {
    status = kExitRuntime;
    error = e.what();
  }
  if (status != 0) std::cerr << "ERROR: " << error << '\n';
  if (!out_dir.empty()) manifest.write(out_dir, status, error);
  return status;
}

std::vector<std::pair<std::string, std::string>> config_pairs(const std::string& path, Manifest& manifest) {
  if (path.empty()) return {};
  require_file(path, "config file");
  manifest.set("config_path", path);
  manifest.input(path);
  return as_usage([&] { return train::parse_flat_config(read_text(path)); });
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw UsageError("config key '" + key + "' expects a number, got '" + v + "'");
  return d;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw UsageError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return std::stoull(v);
}

// ---- shared data directory ----

struct DataDir {
  std::vector<data::Example> dataset;
  eval::Split split;
  annotate::ConceptLexicon lexicon;
};

/// Split manifest to use instead of <data>/split.json, set by --split.
std::string split_override;

DataDir load_data_dir(const fs::path& dir, Manifest& manifest) {
  const auto ds = dir / "dataset.jsonl", lx = dir / "lexicon.json";
  const fs::path sp = split_override.empty() ? dir / "split.json" : fs::path(split_override);
  require_file(ds, "dataset");
  require_file(sp, "split manifest");
  require_file(lx, "lexicon");
  for (const auto& p : {ds, sp, lx}) manifest.input(p);
  DataDir d;
  d.dataset = data::read_jsonl(ds);
  d.split = eval::Split::load(sp);
  d.lexicon = annotate::ConceptLexicon::load(lx);
  if (d.split.ids.size() != d.dataset.size()) throw UsageError("split manifest does not match the dataset");
  for (std::size_t i = 0; i < d.dataset.size(); ++i) {
    if (d.split.ids[i] != d.dataset[i].id) throw UsageError("split manifest lists a different example at position " + std::to_string(i));
  }
  return d;
}

// ---- gen-data ----

void apply_data_key(data::DatasetConfig& dc, eval::SplitSpec& spec, const std::string& k, const std::string& v) {
  if (k == "scene_count") dc.scene_count = to_size(k, v);
  else if (k == "max_objects") dc.max_objects = to_size(k, v);
  else if (k == "noise") dc.noise = to_double(k, v);
  else if (k == "theme_strength") dc.theme_strength = to_double(k, v);
  else if (k == "counting_presence") dc.counting_presence = to_double(k, v);
  else if (k == "existence_yes") dc.existence_yes = to_double(k, v);
  else if (k == "test_fraction") spec.test_fraction = to_double(k, v);
  else if (k == "iid_test_fraction") spec.iid_test_fraction = to_double(k, v);
  else if (k == "min_unlabeled") spec.min_unlabeled = to_size(k, v);
  else if (k == "min_test") spec.min_test = to_size(k, v);
  else throw UsageError("unknown config key '" + k + "'");
}

int cmd_gen_data(const std::string& out, const std::string& config, std::uint64_t seed, std::optional<std::size_t> scenes) {
  Manifest m("gen-data");
  m.set("seed", seed);
  return run_command(m, out, [&] {
    auto dc = data::DatasetConfig::benchmark();
    auto spec = eval::SplitSpec::benchmark();
    for (const auto& [k, v] : config_pairs(config, m)) apply_data_key(dc, spec, k, v);
    if (scenes) dc.scene_count = *scenes;
    dc.seed = num::derive_seed(seed, "dataset");
    spec.seed = num::derive_seed(seed, "split");
    as_usage([&] {
      dc.validate();
      spec.validate();
      return 0;
    });
    const auto dataset = data::build_dataset(dc);
    const auto split = eval::build_novel_splits(dataset, spec);
    const auto view = eval::apply_split(dataset, split);
    const auto lexicon = eval::training_lexicon(view, split);
    fs::create_directories(out);
    const fs::path dir(out);
    data::write_jsonl(dir / "dataset.jsonl", dataset);
    split.save(dir / "split.json");
    lexicon.save(dir / "lexicon.json");
    for (const char* f : {"dataset.jsonl", "split.json", "lexicon.json"}) m.output(dir / f);
    m.set("examples", dataset.size());
    m.set("split_hash", split.hash());
    std::cout << "wrote " << dataset.size() << " examples to " << (dir / "dataset.jsonl").string() << '\n';
  });
}

// ---- mine-refs ----

void apply_mining_key(refmine::MiningConfig& mc, const std::string& k, const std::string& v) {
  if (k == "n_pos") mc.n_pos = to_size(k, v);
  else if (k == "n_neg") mc.n_neg = to_size(k, v);
  else if (k == "beta_pos") mc.beta_pos = to_double(k, v);
  else if (k == "beta_text") mc.beta_text = to_double(k, v);
  else if (k == "beta_visual") mc.beta_visual = to_double(k, v);
  else if (k == "skill_pool") mc.skill_pool = to_size(k, v);
  else if (k == "skill_negatives") mc.skill_negatives = to_size(k, v);
  else if (k == "embed_dim") mc.embed_dim = to_size(k, v);
  else throw UsageError("unknown config key '" + k + "'");
}

// Re-derives the cached pools of `count` random targets with the exhaustive oracles.
std::size_t spot_check(const refmine::Corpus& corpus, const refmine::ReferenceCache& cache, const refmine::MiningConfig& mc,
                       std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> targets;
  for (std::size_t p = 0; p < corpus.size(); ++p) {
    if (cache.has_target(corpus.id(p))) targets.push_back(p);
  }
  num::Rng rng(num::derive_seed(seed, "spot-check"));
  rng.shuffle(targets);
  targets.resize(std::min(count, targets.size()));
  std::size_t checked = 0;
  for (std::size_t t : targets) {
    const auto skill = refmine::oracle_skill_candidates(corpus, t, mc);
    for (const auto& mention : corpus.mentions(t)) {
      const auto* entry = cache.find(corpus.id(t), mention.concept_id);
      const auto oracle = refmine::oracle_grounding_candidates(corpus, t, mention.concept_id, mc);
      if (!entry) {
        if (oracle) throw std::runtime_error("spot check: target " + std::to_string(corpus.id(t)) + " is missing from the cache");
        continue;
      }
      if (!oracle || !(entry->grounding == *oracle) || !(entry->skill == skill)) {
        throw std::runtime_error("spot check: cached references of target " + std::to_string(corpus.id(t)) + " differ from the oracle");
      }
    }
    ++checked;
  }
  return checked;
}

int cmd_mine_refs(const std::string& data_dir, const std::string& out, const std::string& config, std::uint64_t seed,
                  const std::string& scheme, std::size_t verify) {
  Manifest m("mine-refs");
  m.set("seed", seed);
  return run_command(m, out, [&] {
    refmine::MiningConfig mc;
    for (const auto& [k, v] : config_pairs(config, m)) apply_mining_key(mc, k, v);
    mc.seed = num::derive_seed(seed, "mining");
    const auto d = load_data_dir(data_dir, m);
    const auto view = eval::apply_split(d.dataset, d.split);
    const auto corpus = eval::training_corpus(view, d.split, d.lexicon, mc);
    fs::create_directories(out);
    json reports = json::object();
    auto mine = [&](refmine::ReferenceScheme s, const std::string& name) {
      refmine::MiningReport report;
      const auto cache = refmine::mine_references(corpus, mc, s, &report);
      const fs::path path = fs::path(out) / ("refs_" + name + ".jsonl");
      cache.save(path);
      m.output(path);
      reports[name] = {{"targets", report.targets}, {"entries", report.entries}, {"short_pools", report.short_pools}, {"skipped", report.skipped.size()}};
      std::cout << name << ": " << report.entries << " entries for " << report.targets << " targets, " << report.skipped.size() << " skipped\n";
      if (s == refmine::ReferenceScheme::Ccc && verify > 0) {
        const auto checked = spot_check(corpus, cache, mc, verify, seed);
        reports[name]["oracle_checked"] = checked;
        std::cout << "oracle spot check passed on " << checked << " targets\n";
      }
    };
    if (scheme == "ccc" || scheme == "both") mine(refmine::ReferenceScheme::Ccc, "ccc");
    if (scheme == "random" || scheme == "both") mine(refmine::ReferenceScheme::Random, "random");
    m.set("mining", reports);
  });
}

// ---- train ----

std::string arm_label(const train::TrainConfig& c) {
  if (c.objective == train::Objective::Base || c.p_sep == 0.0) return "Base";
  switch (c.objective) {
    case train::Objective::Full: return "Ours";
    case train::Objective::Grounding: return "Base+L_g";
    case train::Objective::Skill: return "Base+L_s";
    case train::Objective::Mlm: return "Base+MLM";
    default: return "Base";
  }
}

struct TrainFlags {
  std::string preset = "desk";
  std::string config;
  std::uint64_t seed = 0;
  std::optional<double> p_sep;
  std::optional<std::string> objective;
};

train::TrainConfig build_train_config(const TrainFlags& f, Manifest& m) {
  auto preset = train::TrainConfig::preset_named(f.preset);
  if (!preset) throw UsageError("unknown preset '" + f.preset + "' (paper, desk)");
  auto c = *preset;
  for (const auto& [k, v] : config_pairs(f.config, m)) as_usage([&, k = k, v = v] { c.set(k, v); return 0; });
  if (f.objective) as_usage([&] { c.set("objective", *f.objective); return 0; });
  if (f.p_sep) c.p_sep = *f.p_sep;
  c.seed = f.seed;
  as_usage([&] { c.validate(); return 0; });
  return c;
}

int cmd_train(const std::string& data_dir, const std::string& refs_path, const std::string& out, const TrainFlags& flags,
              const std::string& resume, std::optional<std::uint64_t> stop_at) {
  Manifest m("train");
  m.set("seed", flags.seed);
  return run_command(m, out, [&] {
    const auto config = build_train_config(flags, m);
    m.set("arm", arm_label(config));
    m.set("config_hash", util::hash_hex(config.to_json()));
    const auto d = load_data_dir(data_dir, m);
    refmine::ReferenceCache refs;
    const bool needs_refs = config.objective != train::Objective::Base && config.p_sep > 0.0;
    if (!refs_path.empty()) {
      require_file(refs_path, "reference cache");
      m.input(refs_path);
      refs = refmine::ReferenceCache::load(refs_path);
    } else if (needs_refs) {
      throw UsageError("--refs is required for objective " + std::string(train::objective_name(config.objective)));
    }
    const auto view = eval::apply_split(d.dataset, d.split);
    const auto data = eval::training_data(view, d.split, &refs);
    const fs::path dir(out);
    fs::create_directories(dir);
    train::TrainState state;
    std::ofstream log;
    if (!resume.empty()) {
      require_file(resume, "checkpoint");
      m.input(resume);
      const fs::path sidecar = fs::path(resume).parent_path() / "config.json";
      if (fs::exists(sidecar) && train::TrainConfig::from_json(read_text(sidecar)).to_json() != config.to_json()) {
        throw UsageError("resume checkpoint was trained with a different config (" + sidecar.string() + ")");
      }
      state = train::load_checkpoint(resume);
      log.open(dir / "train_log.jsonl", std::ios::app);
    } else {
      state = train::init_state(config);
      log.open(dir / "train_log.jsonl", std::ios::trunc);
    }
    const auto history = train::train(state, config, data, &log, stop_at);
    log.close();
    if (state.counters.unlabeled_vqa != 0 || state.counters.targets_outside_pool != 0) throw train::TrainError("training audit failed");
    write_text(dir / "config.json", config.to_json());
    train::save_checkpoint(state, dir / "checkpoint.bin");
    for (const char* f : {"config.json", "checkpoint.bin", "train_log.jsonl"}) m.output(dir / f);
    json epochs = json::array();
    for (const auto& e : history) {
      epochs.push_back({{"epoch", e.epoch}, {"steps", e.steps}, {"mean_vqa_loss", e.mean_vqa_loss},
                        {"contrastive_updates", e.contrastive_updates}, {"mean_contrastive_loss", e.mean_contrastive_loss}});
      std::cout << "epoch " << e.epoch << ": vqa loss " << e.mean_vqa_loss << ", " << e.contrastive_updates << " contrastive updates\n";
    }
    m.set("epochs", epochs);
    m.set("steps", state.step);
    const auto& c = state.counters;
    m.set("counters", {{"vqa_examples", c.vqa_examples}, {"unlabeled_vqa", c.unlabeled_vqa}, {"contrastive_updates", c.contrastive_updates},
                       {"contrastive_targets", c.contrastive_targets}, {"targets_outside_pool", c.targets_outside_pool},
                       {"skipped_targets", c.skipped_targets}});
  });
}

// ---- eval ----

void write_report(const fs::path& dir, const eval::MetricsReport& report, Manifest& m) {
  write_text(dir / "report.json", report.to_json());
  std::ostringstream text;
  text << "metric: " << report.metric << '\n';
  for (const auto& [name, s] : report.slices) text << name << ": " << s.accuracy << " (" << s.size << " questions)\n";
  text << "novel mean: " << report.novel_mean << "\noverall: " << report.overall << "\nrecall@5: " << report.recall.recall << " over "
       << report.recall.counted << " tuples (" << report.recall.degenerate << " degenerate excluded)\n";
  write_text(dir / "report.txt", text.str());
  m.output(dir / "report.json");
  m.output(dir / "report.txt");
  std::cout << text.str();
}

int cmd_eval(const std::string& data_dir, const std::string& checkpoint, const std::string& config_path, const std::string& out,
             std::size_t k, bool raw_states) {
  Manifest m("eval");
  return run_command(m, out, [&] {
    require_file(checkpoint, "checkpoint");
    const fs::path sidecar = config_path.empty() ? fs::path(checkpoint).parent_path() / "config.json" : fs::path(config_path);
    require_file(sidecar, "training config");
    m.input(checkpoint);
    m.input(sidecar);
    const auto config = as_usage([&] { return train::TrainConfig::from_json(read_text(sidecar)); });
    m.set("seed", config.seed);
    const auto d = load_data_dir(data_dir, m);
    const auto state = train::load_checkpoint(checkpoint);
    const model::Encoder encoder(config.encoder);
    auto report = eval::evaluate_model(encoder, state.params, d.dataset, d.split, k);
    if (raw_states) {
      const auto test = d.split.indices(eval::Partition::Test);
      report.recall = eval::grounding_recall_at_k(encoder, state.params, d.dataset, eval::grounding_tuples(d.dataset, test), k, false);
      report.metadata["recall_states"] = "raw";
    }
    report.metadata["arm"] = arm_label(config);
    report.metadata["seed"] = std::to_string(config.seed);
    report.metadata["config_hash"] = util::hash_hex(config.to_json());
    report.metadata["checkpoint_hash"] = util::hash_file(checkpoint);
    report.metadata["dataset_hash"] = util::hash_file(fs::path(data_dir) / "dataset.jsonl");
    fs::create_directories(out);
    write_report(out, report, m);
  });
}

// ---- ablate ----

void emit_table(const fs::path& dir, const std::vector<eval::AblationCell>& cells, const std::vector<std::string>& arm_order,
                const std::vector<std::string>& slices, Manifest& m) {
  const auto rows = eval::aggregate(cells, arm_order);
  const auto text = "metric: exact-match accuracy (mean ± sample stdev over seeds)\n" + eval::render_table(rows, eval::table_columns(slices));
  write_text(dir / "table.txt", text);
  write_text(dir / "table.json", eval::table_json(rows, cells));
  m.output(dir / "table.txt");
  m.output(dir / "table.json");
  std::cout << text;
}

int cmd_ablate(const std::string& data_dir, const std::string& refs_dir, const std::string& out, const TrainFlags& flags,
               std::size_t seeds, const std::string& arms_list, std::size_t jobs) {
  Manifest m("ablate");
  m.set("seed", flags.seed);
  return run_command(m, out, [&] {
    if (seeds == 0) throw UsageError("--seeds must be positive");
    if (jobs == 0) throw UsageError("--jobs must be positive");
    const auto base = build_train_config(flags, m);
    std::vector<eval::AblationArm> arms;
    if (arms_list.empty()) {
      arms = eval::standard_arms(base);
    } else {
      std::stringstream ss(arms_list);
      std::string name;
      while (std::getline(ss, name, ',')) {
        auto a = eval::arm_named(base, name);
        if (!a) throw UsageError("unknown arm '" + name + "'");
        arms.push_back(*a);
      }
    }
    const auto d = load_data_dir(data_dir, m);
    eval::BenchmarkInputs inputs;
    inputs.dataset = d.dataset;
    inputs.split = d.split;
    inputs.view = eval::apply_split(d.dataset, d.split);
    inputs.lexicon = d.lexicon;
    if (!refs_dir.empty()) {
      for (const char* f : {"refs_ccc.jsonl", "refs_random.jsonl"}) {
        require_file(fs::path(refs_dir) / f, "reference cache");
        m.input(fs::path(refs_dir) / f);
      }
      inputs.ccc = refmine::ReferenceCache::load(fs::path(refs_dir) / "refs_ccc.jsonl");
      inputs.random = refmine::ReferenceCache::load(fs::path(refs_dir) / "refs_random.jsonl");
    } else {
      refmine::MiningConfig mc;
      mc.seed = num::derive_seed(flags.seed, "mining");
      const auto corpus = eval::training_corpus(inputs.view, inputs.split, inputs.lexicon, mc);
      inputs.ccc = refmine::mine_references(corpus, mc, refmine::ReferenceScheme::Ccc);
      inputs.random = refmine::mine_references(corpus, mc, refmine::ReferenceScheme::Random);
    }
    struct Task {
      const eval::AblationArm* arm;
      std::uint64_t seed;
    };
    std::vector<Task> tasks;
    for (const auto& a : arms) {
      for (std::size_t s = 0; s < seeds; ++s) tasks.push_back({&a, flags.seed + s});
    }
    std::vector<eval::AblationCell> cells(tasks.size());
    std::atomic<std::size_t> next{0};
    std::mutex io;
    auto worker = [&] {
      for (std::size_t i = next++; i < tasks.size(); i = next++) {
        cells[i] = eval::run_cell(inputs, *tasks[i].arm, tasks[i].seed);
        std::lock_guard lock(io);
        std::cout << tasks[i].arm->name << " seed " << tasks[i].seed << ": "
                  << (cells[i].report ? "novel " + std::to_string(cells[i].report->novel_mean) : "FAILED " + cells[i].error) << " ("
                  << cells[i].seconds << " s)\n";
      }
    };
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < std::min(jobs, tasks.size()); ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    const fs::path dir(out);
    for (const auto& c : cells) {
      const fs::path cell_dir = dir / "cells" / c.arm / ("seed" + std::to_string(c.seed));
      fs::create_directories(cell_dir);
      if (c.report) {
        write_text(cell_dir / "report.json", c.report->to_json());
        m.output(cell_dir / "report.json");
      } else {
        write_text(cell_dir / "error.txt", c.error + "\n");
      }
    }
    std::vector<std::string> order;
    for (const auto& a : arms) order.push_back(a.name);
    emit_table(dir, cells, order, d.split.slice_names(), m);
    std::size_t failed = 0;
    for (const auto& c : cells) failed += !c.report;
    m.set("cells", cells.size());
    m.set("failed_cells", failed);
  });
}

// ---- report ----

int cmd_report(const std::string& in_dir, const std::string& out) {
  Manifest m("report");
  return run_command(m, out, [&] {
    if (!fs::is_directory(in_dir)) throw UsageError("report directory not found: " + in_dir);
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(in_dir)) {
      if (e.is_regular_file() && e.path().filename() == "report.json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw UsageError("no report.json files under " + in_dir);
    std::vector<eval::AblationCell> cells;
    std::vector<std::string> order, slices;
    for (const auto& f : files) {
      m.input(f);
      auto r = eval::MetricsReport::from_json(read_text(f));
      eval::AblationCell c;
      c.arm = r.metadata.count("arm") ? r.metadata.at("arm") : f.parent_path().filename().string();
      c.seed = r.metadata.count("seed") ? std::stoull(r.metadata.at("seed")) : 0;
      if (slices.empty()) slices = r.novel_slices;
      if (std::find(order.begin(), order.end(), c.arm) == order.end()) order.push_back(c.arm);
      c.report = std::move(r);
      cells.push_back(std::move(c));
    }
    // Standard arms first in their usual order, anything else after.
    std::vector<std::string> sorted;
    for (const auto& a : eval::standard_arms(train::TrainConfig::desk())) {
      if (std::find(order.begin(), order.end(), a.name) != order.end()) sorted.push_back(a.name);
    }
    for (const auto& a : order) {
      if (std::find(sorted.begin(), sorted.end(), a) == sorted.end()) sorted.push_back(a);
    }
    fs::create_directories(out);
    emit_table(out, cells, sorted, slices, m);
    m.set("reports", files.size());
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Skill-concept separation for VQA on a synthetic benchmark"};
  app.require_subcommand(1);

  std::string out, config, data_dir, refs, checkpoint, resume, scheme = "both", arms, report_dir, config_json;
  std::uint64_t seed = 0;
  std::size_t verify = 0, seeds = 5, jobs = 1, k = 5;
  std::optional<std::size_t> scenes;
  std::optional<std::uint64_t> stop_at;
  bool raw_states = false;
  TrainFlags tf;

  auto* gen = app.add_subcommand("gen-data", "Generate the dataset, held-out split and concept lexicon");
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--config", config, "Flat key = value dataset/split config");
  gen->add_option("--seed", seed, "Master seed");
  gen->add_option("--scenes", scenes, "Override the number of questions");

  auto* mine = app.add_subcommand("mine-refs", "Mine CCC and random reference caches over D^a ∪ D^u");
  mine->add_option("--data", data_dir, "Directory written by gen-data")->required();
  mine->add_option("--split", split_override, "Split manifest (defaults to split.json in --data)");
  mine->add_option("--out", out, "Output directory")->required();
  mine->add_option("--config", config, "Flat key = value mining config");
  mine->add_option("--seed", seed, "Master seed");
  mine->add_option("--scheme", scheme, "ccc, random or both")->check(CLI::IsMember({"ccc", "random", "both"}));
  mine->add_option("--verify", verify, "Re-derive this many random targets with the exhaustive oracle");

  auto add_train_flags = [&](CLI::App* c) {
    c->add_option("--preset", tf.preset, "paper or desk")->check(CLI::IsMember({"paper", "desk"}));
    c->add_option("--config", tf.config, "Flat key = value training config");
    c->add_option("--seed", tf.seed, "Master seed");
    c->add_option("--p-sep", tf.p_sep, "Probability of the contrastive update per step");
  };
  auto* tr = app.add_subcommand("train", "Train one model");
  tr->add_option("--data", data_dir, "Directory written by gen-data")->required();
  tr->add_option("--split", split_override, "Split manifest (defaults to split.json in --data)");
  tr->add_option("--refs", refs, "Reference cache (refs_ccc.jsonl or refs_random.jsonl)");
  tr->add_option("--out", out, "Output directory")->required();
  tr->add_option("--objective", tf.objective, "base, full, grounding, skill or mlm");
  tr->add_option("--resume", resume, "Checkpoint to continue from");
  tr->add_option("--stop-at-step", stop_at, "Stop after this many steps in total");
  add_train_flags(tr);

  auto* ev = app.add_subcommand("eval", "Score a checkpoint on every test slice");
  ev->add_option("--data", data_dir, "Directory written by gen-data")->required();
  ev->add_option("--split", split_override, "Split manifest (defaults to split.json in --data)");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint written by train")->required();
  ev->add_option("--config", config_json, "Training config JSON (defaults to config.json beside the checkpoint)");
  ev->add_option("--out", out, "Output directory")->required();
  ev->add_option("--k", k, "Recall cutoff")->check(CLI::PositiveNumber);
  ev->add_flag("--raw-states", raw_states, "Rank regions by raw states instead of grounding projections");

  auto* ab = app.add_subcommand("ablate", "Train and evaluate every ablation arm over several seeds");
  ab->add_option("--data", data_dir, "Directory written by gen-data")->required();
  ab->add_option("--split", split_override, "Split manifest (defaults to split.json in --data)");
  ab->add_option("--refs", refs, "Directory written by mine-refs (mined on the fly when absent)");
  ab->add_option("--out", out, "Output directory")->required();
  ab->add_option("--seeds", seeds, "Number of seeds, starting at --seed");
  ab->add_option("--arms", arms, "Comma-separated arm names (default: all six)");
  ab->add_option("--jobs", jobs, "Parallel training workers");
  add_train_flags(ab);

  auto* rp = app.add_subcommand("report", "Aggregate report.json files into one table");
  rp->add_option("--dir", report_dir, "Directory searched recursively for report.json")->required();
  rp->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "ERROR: " << e.what() << '\n';
    return kExitUsage;
  }

  if (gen->parsed()) return cmd_gen_data(out, config, seed, scenes);
  if (mine->parsed()) return cmd_mine_refs(data_dir, out, config, seed, scheme, verify);
  if (tr->parsed()) return cmd_train(data_dir, refs, out, tf, resume, stop_at);
  if (ev->parsed()) return cmd_eval(data_dir, checkpoint, config_json, out, k, raw_states);
  if (ab->parsed()) return cmd_ablate(data_dir, refs, out, tf, seeds, arms, jobs);
  return cmd_report(report_dir, out);
}
