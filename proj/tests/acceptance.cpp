// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "model_cases.hpp"
#include "sepvqa/eval/ablation.hpp"
#include "sepvqa/num/checkpoint.hpp"
#include "sepvqa/util/hash.hpp"

using namespace sepvqa;
using namespace sepvqa::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 2) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

std::string sci(double v) {
  std::ostringstream s;
  s.setf(std::ios::scientific);
  s.precision(2);
  s << v;
  return s.str();
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

// ---- 1: gradients ----

Outcome gradient_correctness(bool verbose) {
  const double start = cpu_seconds();
  std::size_t checks = 0, failures = 0, vacuous = 0;
  std::string first_failure;
  auto record = [&](const std::string& what, std::uint64_t seed, const num::GradCheckReport& r) {
    ++checks;
    if (r.vacuous) ++vacuous;
    if (verbose && (r.vacuous || !r.passed)) {
      std::cout << "  " << what << " seed " << seed << (r.vacuous ? " vacuous" : " failed");
      if (r.worst()) std::cout << " worst " << r.worst()->name << " analytic " << r.worst()->analytic << " numeric " << r.worst()->numeric;
      std::cout << "\n";
    }
    if (!r.passed) {
      if (failures++ == 0 && r.worst()) {
        first_failure = what + " seed " + std::to_string(seed) + " (" + r.worst()->name + " rel err " + sci(r.worst()->max_relative_error) + ")";
      }
    }
  };
  for (const auto& c : op_cases()) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      num::Rng rng(num::derive_seed(seed, c.name));
      num::Graph g;
      num::TensorMap b;
      const auto out = c.build(g, b, rng);
      record("op " + c.name, seed, num::grad_check(g, b, out));
    }
  }
  for (const auto& c : loss_cases()) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) record(c.name, seed, check_loss_case(c, seed, 4));
  }
  const double seconds = cpu_seconds() - start;
  Outcome o;
  o.pass = failures == 0 && vacuous == 0 && seconds < 300.0;
  o.detail = std::to_string(checks) + " checks over " + std::to_string(op_cases().size()) + " ops, the encoder and 4 losses x 100 seeds; " +
             std::to_string(failures) + " failed, " + std::to_string(vacuous) + " vacuous; " + fmt(seconds, 1) + " s CPU (limit 300)";
  if (!first_failure.empty()) o.detail += "; first failure: " + first_failure;
  return o;
}

// ---- 2: loss identities ----

double loss_value(num::Graph& g, const model::LossValue& l, const num::TensorMap& p) { return num::evaluate(g, p)[l.value].item(); }

double logsumexp(const std::vector<double>& s) {
  const double m = *std::max_element(s.begin(), s.end());
  double acc = 0.0;
  for (double x : s) acc += std::exp(x - m);
  return m + std::log(acc);
}

Outcome loss_identities() {
  auto cfg = tiny_config();
  cfg.hidden = 4;
  const model::Encoder enc(cfg);
  auto ground = enc.init_params(0);
  ground.at("ground_w") = num::Tensor::identity(4);
  ground.at("ground_b").fill(0.0);
  auto skill = enc.init_params(0);
  skill.at("skill_w1") = num::Tensor::identity(4);
  skill.at("skill_w2") = num::Tensor::identity(4);
  skill.at("skill_b1").fill(100.0);
  skill.at("skill_b2").fill(-100.0);
  auto direction = [](std::size_t axis, double cos, double norm) {
    num::Tensor t({1, 4});
    t[0] = norm * cos;
    t[axis] = norm * std::sqrt(1.0 - cos * cos);
    return t;
  };
  auto stack = [](const std::vector<num::Tensor>& rows) {
    num::Tensor out({rows.size(), 4});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t j = 0; j < 4; ++j) out.at(r, j) = rows[r][j];
    }
    return out;
  };
  double worst = 0.0;
  num::Rng rng(7);
  for (std::size_t t : {2, 7, 40}) {
    num::Graph g;
    std::vector<bool> flags(t, false);
    flags[t / 2] = true;
    const auto l = model::grounding_loss(enc, g.constant(num::Tensor({1, 4})), g.constant(random_tensor(rng, {t, 4})), flags);
    worst = std::max(worst, std::abs(loss_value(g, l, ground) - std::log(static_cast<double>(t))));
  }
  for (std::size_t n : {2, 3, 9}) {
    std::vector<num::Tensor> rows;
    for (std::size_t r = 0; r < n; ++r) rows.push_back(direction(1, 0.4, 0.5 + static_cast<double>(r)));
    std::vector<bool> flags(n, false);
    flags[0] = true;
    num::Graph g;
    const auto l = model::skill_loss(enc, g.constant(direction(2, 0.7, 1.3)), g.constant(stack(rows)), flags);
    worst = std::max(worst, std::abs(loss_value(g, l, skill) - std::log(static_cast<double>(n))));
  }
  // Three-reference hand computations.
  const num::Tensor h = num::Tensor::matrix(1, 4, {0.3, -1.2, 0.8, 0.5});
  const num::Tensor refs = num::Tensor::matrix(3, 4, {1.0, 0.2, -0.4, 0.9, -0.7, 0.6, 0.1, 0.0, 0.25, -1.5, 0.35, -0.2});
  const std::vector<double> cos{0.9, 0.1, -0.2};
  const num::Tensor skill_refs = stack({direction(1, cos[0], 2.0), direction(2, cos[1], 0.3), direction(3, cos[2], 1.1)});
  for (std::size_t pos = 0; pos < 3; ++pos) {
    std::vector<bool> flags(3, false);
    flags[pos] = true;
    std::vector<double> s(3), c(3);
    for (std::size_t r = 0; r < 3; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < 4; ++j) dot += h[j] * refs.at(r, j);
      s[r] = dot / 2.0;
      c[r] = cos[r] / 0.5;
    }
    num::Graph g;
    const auto lg = model::grounding_loss(enc, g.constant(h), g.constant(refs), flags);
    const auto ls = model::skill_loss(enc, g.constant(direction(1, 1.0, 1.0)), g.constant(skill_refs), flags);
    worst = std::max(worst, std::abs(loss_value(g, lg, ground) - (logsumexp(s) - s[pos])));
    worst = std::max(worst, std::abs(loss_value(g, ls, skill) - (logsumexp(c) - c[pos])));
  }
  return {worst < 1e-9, "ln T, ln L and 3-reference oracles; worst absolute error " + sci(worst) + " (limit 1e-9)"};
}

// ---- 3: mining ----

refmine::Corpus small_corpus(std::uint64_t instance) {
  data::DatasetConfig dc;
  dc.scene_count = 40;
  dc.seed = 5000 + instance;
  auto ex = data::build_dataset(dc);
  // Ten exact duplicates under fresh ids give the oracles score ties to break.
  for (std::size_t k = 0; k < 10; ++k) {
    auto dup = ex[k * 3];
    dup.id = 100000 + k;
    ex.push_back(dup);
  }
  std::vector<data::QuestionRecord> qs;
  for (const auto& e : ex) qs.push_back(e.question);
  const auto lex = annotate::discover_concepts(qs, 1000);
  return refmine::Corpus(std::move(ex), lex, refmine::ContextEmbedder(instance));
}

std::size_t invariant_violations(const refmine::Corpus& c, const refmine::MiningConfig& cfg, std::size_t targets, std::size_t& checked) {
  std::size_t bad = 0;
  checked = 0;
  auto expect = [&](bool ok) { bad += !ok; };
  num::Rng pick(11);
  std::vector<std::size_t> order(c.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  pick.shuffle(order);
  for (std::size_t t : order) {
    if (checked == targets) break;
    if (c.mentions(t).empty()) continue;
    const auto skill = refmine::build_skill_candidates(c, t, cfg);
    std::set<refmine::ExampleId> sp(skill.positives.begin(), skill.positives.end());
    expect(sp.size() == skill.positives.size() && !sp.count(c.id(t)));
    double worst_pos = std::numeric_limits<double>::infinity();
    for (auto id : skill.positives) worst_pos = std::min(worst_pos, c.question_similarity(t, *c.position(id)));
    for (auto id : skill.negatives) expect(!sp.count(id) && id != c.id(t) && c.question_similarity(t, *c.position(id)) <= worst_pos);
    for (const auto& m : c.mentions(t)) {
      const auto g = refmine::build_grounding_candidates(c, t, m.concept_id, cfg);
      if (!g) continue;
      const std::set<refmine::ExampleId> pos(g->positives.begin(), g->positives.end());
      const std::set<refmine::ExampleId> nt(g->negatives_text.begin(), g->negatives_text.end());
      const std::set<refmine::ExampleId> nv(g->negatives_visual.begin(), g->negatives_visual.end());
      double max_pos = -2.0, min_text = 2.0, min_visual = 2.0;
      for (auto id : g->positives) {
        const auto p = *c.position(id);
        expect(id != c.id(t) && c.mentions_concept(p, m.concept_id) && refmine::presence_filter(c.example(p), m.concept_id));
        max_pos = std::max(max_pos, c.xi(t, p, cfg.beta_pos));
      }
      for (auto id : g->negatives_text) {
        const auto p = *c.position(id);
        expect(!c.shares_concept(t, p));
        min_text = std::min(min_text, c.xi(t, p, cfg.beta_text));
      }
      for (auto id : g->negatives_visual) {
        const auto p = *c.position(id);
        expect(!c.shares_concept(t, p));
        min_visual = std::min(min_visual, c.xi(t, p, cfg.beta_visual));
      }
      for (std::size_t p = 0; p < c.size(); ++p) {
        if (p == t) continue;
        if (c.mentions_concept(p, m.concept_id) && refmine::presence_filter(c.example(p), m.concept_id) && !pos.count(c.id(p))) {
          expect(c.xi(t, p, cfg.beta_pos) >= max_pos);
        }
        if (!c.shares_concept(t, p)) {
          if (!nt.count(c.id(p))) expect(c.xi(t, p, cfg.beta_text) <= min_text);
          if (!nv.count(c.id(p))) expect(c.xi(t, p, cfg.beta_visual) <= min_visual);
        }
      }
    }
    ++checked;
  }
  return bad;
}

Outcome mining_oracle(const eval::BenchmarkInputs& bench, const refmine::MiningConfig& mining) {
  refmine::MiningConfig small;
  small.n_pos = 5;
  small.n_neg = 10;
  small.skill_pool = 8;
  small.skill_negatives = 10;
  std::size_t compared = 0, mismatches = 0;
  for (std::uint64_t inst = 0; inst < 100; ++inst) {
    small.seed = inst;
    const auto c = small_corpus(inst);
    for (std::size_t t = 0; t < c.size(); ++t) {
      ++compared;
      mismatches += !(refmine::build_skill_candidates(c, t, small) == refmine::oracle_skill_candidates(c, t, small));
      for (const auto& m : c.mentions(t)) {
        ++compared;
        mismatches += !(refmine::build_grounding_candidates(c, t, m.concept_id, small) == refmine::oracle_grounding_candidates(c, t, m.concept_id, small));
      }
    }
  }
  const auto corpus = eval::training_corpus(bench.view, bench.split, bench.lexicon, mining);
  std::size_t checked = 0;
  const auto violations = invariant_violations(corpus, mining, 1000, checked);
  Outcome o;
  o.pass = mismatches == 0 && compared > 0 && violations == 0 && checked == 1000;
  o.detail = std::to_string(mismatches) + " oracle mismatches in " + std::to_string(compared) + " comparisons over 100 corpora of 50 questions; " +
             std::to_string(violations) + " invariant violations over " + std::to_string(checked) + " targets of the " +
             std::to_string(corpus.size()) + "-question training corpus";
  return o;
}

// ---- 4: split ----

Outcome split_integrity(const eval::BenchmarkInputs& bench) {
  const auto& ds = bench.dataset;
  const auto& split = bench.split;
  std::size_t leaks = 0, misplaced = 0, answers_left = 0;
  std::size_t counts[3] = {0, 0, 0};
  bool aligned = split.ids.size() == ds.size() && split.partition.size() == ds.size() && split.slice.size() == ds.size();
  std::set<std::uint64_t> ids;
  for (std::size_t i = 0; aligned && i < ds.size(); ++i) {
    aligned = split.ids[i] == ds[i].id;
    ids.insert(ds[i].id);
    const auto p = split.partition[i];
    ++counts[static_cast<int>(p)];
    bool any = false;
    for (const auto& s : split.spec.slices) any = any || s.matches(ds[i].question);
    if (p == eval::Partition::Labeled && any) ++leaks;
    if (p == eval::Partition::Unlabeled && (!any || split.slice[i] < 0)) ++misplaced;
    if (p == eval::Partition::Unlabeled && bench.view[i].question.answer) ++answers_left;
    if (p == eval::Partition::Test && split.slice[i] >= 0 && !split.spec.slices[static_cast<std::size_t>(split.slice[i])].matches(ds[i].question)) ++misplaced;
  }
  const bool exact = aligned && ids.size() == ds.size() && counts[0] + counts[1] + counts[2] == ds.size();
  const auto library_leaks = eval::leakage(ds, split).size();
  Outcome o;
  o.pass = exact && leaks == 0 && library_leaks == 0 && misplaced == 0 && answers_left == 0;
  o.detail = std::to_string(leaks) + " leaked labeled questions over " + std::to_string(split.spec.slices.size()) + " slices; D^a " +
             std::to_string(counts[0]) + " + D^u " + std::to_string(counts[1]) + " + test " + std::to_string(counts[2]) + " = " +
             std::to_string(ds.size()) + (exact ? " (exact partition)" : " (NOT a partition)") + "; " + std::to_string(misplaced) +
             " misplaced, " + std::to_string(answers_left) + " unlabeled questions still answered";
  return o;
}

// ---- 5-7: ablation ----

using Rows = std::map<std::string, eval::AggregateRow>;

double col(const Rows& rows, const std::string& arm, const std::string& column) {
  const auto& r = rows.at(arm);
  auto it = r.columns.find(column);
  return it == r.columns.end() ? std::nan("") : it->second.first;
}

Outcome table1_direction(const Rows& rows, const std::vector<std::string>& slices, double seconds) {
  const double gap = col(rows, "Ours", "novel") - col(rows, "Base", "novel");
  std::size_t wins = 0;
  std::string per_slice;
  for (const auto& s : slices) {
    const double d = col(rows, "Ours", s) - col(rows, "Base", s);
    wins += d >= 0.0;
    per_slice += (per_slice.empty() ? "" : ", ") + s + " " + (d >= 0 ? "+" : "") + fmt(d);
  }
  Outcome o;
  o.pass = gap >= 2.0 && wins >= 5 && seconds <= 90.0 * 60.0;
  o.detail = "novel mean Ours " + fmt(col(rows, "Ours", "novel")) + " vs Base " + fmt(col(rows, "Base", "novel")) + " (gap " + fmt(gap) +
             ", need >= 2.00); Ours >= Base on " + std::to_string(wins) + "/" + std::to_string(slices.size()) + " slices (need 5) [" + per_slice +
             "]; data preparation plus the Base and Ours runs took " + fmt(seconds / 60.0, 1) + " min CPU (limit 90)";
  return o;
}

Outcome table3_direction(const Rows& rows) {
  const double ours = col(rows, "Ours", "novel"), base = col(rows, "Base", "novel");
  const double lg = col(rows, "Base+L_g", "novel"), ls = col(rows, "Base+L_s", "novel");
  const double tol = 0.3;
  Outcome o;
  o.pass = ours > lg && lg >= base - tol && ours > ls && ls >= base - tol;
  o.detail = "novel mean Ours " + fmt(ours) + ", Base+L_g " + fmt(lg) + ", Base+L_s " + fmt(ls) + ", Base " + fmt(base) +
             "; need Ours > Base+L_g >= Base and Ours > Base+L_s >= Base (inner tolerance 0.30); Base+MLM " + fmt(col(rows, "Base+MLM", "novel"));
  return o;
}

Outcome grounding_direction(const Rows& rows, const eval::Split& split) {
  const double gap = col(rows, "Ours", "recall@5") - col(rows, "Base", "recall@5");
  double ccc = 0.0, random = 0.0;
  std::size_t n = 0;
  for (const auto& s : split.spec.slices) {
    if (s.mode != eval::SliceMode::Concept) continue;
    ccc += col(rows, "Ours", s.name);
    random += col(rows, "Ours-random-refs", s.name);
    ++n;
  }
  ccc /= static_cast<double>(n);
  random /= static_cast<double>(n);
  Outcome o;
  o.pass = gap >= 5.0 && ccc > random;
  o.detail = "recall@5 Ours " + fmt(col(rows, "Ours", "recall@5")) + " vs Base " + fmt(col(rows, "Base", "recall@5")) + " (gap " + fmt(gap) +
             ", need >= 5.00); novel-concept mean CCC " + fmt(ccc) + " vs random references " + fmt(random) + " (need CCC > random)";
  return o;
}

// ---- 8: determinism ----

std::string dataset_hash(const std::vector<data::Example>& ds) {
  std::string all;
  for (const auto& e : ds) all += data::example_to_json(e) + "\n";
  return util::hash_hex(all);
}

Outcome determinism(const eval::BenchmarkInputs& first, const eval::AblationCell& first_cell, const eval::AblationArm& arm,
                    const data::DatasetConfig& dc, const eval::SplitSpec& spec, const refmine::MiningConfig& mining) {
  const auto second = eval::prepare_benchmark(dc, spec, mining);
  const auto cell = eval::run_cell(second, arm, first_cell.seed);
  const bool data_same = dataset_hash(first.dataset) == dataset_hash(second.dataset) && first.split.hash() == second.split.hash();
  const bool refs_same = util::hash_hex(first.ccc.to_jsonl()) == util::hash_hex(second.ccc.to_jsonl()) &&
                         util::hash_hex(first.random.to_jsonl()) == util::hash_hex(second.random.to_jsonl());
  const bool both = first_cell.report && cell.report;
  const bool ckpt_same = both && first_cell.report->metadata.at("checkpoint_hash") == cell.report->metadata.at("checkpoint_hash");
  const bool report_same = both && util::hash_hex(first_cell.report->to_json()) == util::hash_hex(cell.report->to_json());
  auto word = [](bool b) { return b ? "identical" : "DIFFERENT"; };
  Outcome o;
  o.pass = data_same && refs_same && ckpt_same && report_same;
  o.detail = std::string("dataset+split ") + word(data_same) + ", reference caches " + word(refs_same) + ", " + arm.name + " seed " +
             std::to_string(first_cell.seed) + " checkpoint " + word(ckpt_same) + ", report " + word(report_same) + " across two runs";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  std::size_t seeds = 5;
  std::string table_path = "acceptance_ablation.json";
  bool verbose = false;
  app.add_flag("--verbose", verbose, "List every failing or vacuous gradient check");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  app.add_option("--seeds", seeds, "Ablation seeds");
  app.add_option("--table", table_path, "Where to write the ablation table JSON");
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };

  std::map<int, Outcome> results;
  auto print = [&](int n, const std::string& title, const Outcome& o) {
    results[n] = o;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << title << "): " << o.detail << std::endl;
  };
  if (wanted(1)) print(1, "gradient correctness", gradient_correctness(verbose));
  if (wanted(2)) print(2, "loss identities", loss_identities());

  const bool needs_bench = wanted(3) || wanted(4) || wanted(5) || wanted(6) || wanted(7) || wanted(8);
  if (needs_bench) {
    const auto dc = data::DatasetConfig::benchmark();
    const auto spec = eval::SplitSpec::benchmark();
    const refmine::MiningConfig mining;
    const double prep_start = cpu_seconds();
    const auto bench = eval::prepare_benchmark(dc, spec, mining);
    const double prep_seconds = cpu_seconds() - prep_start;
    std::cout << "benchmark: " << bench.dataset.size() << " questions, " << bench.split.indices(eval::Partition::Labeled).size() << " labeled, "
              << bench.ccc.size() << " reference entries, prepared in " << fmt(prep_seconds, 1) << " s CPU" << std::endl;
    if (wanted(3)) print(3, "mining oracle equivalence", mining_oracle(bench, mining));
    if (wanted(4)) print(4, "split integrity", split_integrity(bench));

    if (wanted(5) || wanted(6) || wanted(7) || wanted(8)) {
      const auto base = train::TrainConfig::desk();
      const auto arms = eval::standard_arms(base);
      std::vector<eval::AblationCell> cells;
      double core_seconds = prep_seconds;
      const std::size_t arm_seeds = (wanted(5) || wanted(6) || wanted(7)) ? seeds : 1;
      for (const auto& arm : arms) {
        if (!(wanted(5) || wanted(6) || wanted(7)) && arm.name != "Ours") continue;
        for (std::uint64_t s = 0; s < arm_seeds; ++s) {
          const double t0 = cpu_seconds();
          cells.push_back(eval::run_cell(bench, arm, s));
          const double dt = cpu_seconds() - t0;
          if (arm.name == "Base" || arm.name == "Ours") core_seconds += dt;
          const auto& c = cells.back();
          std::cout << "  " << arm.name << " seed " << s << ": "
                    << (c.report ? "novel " + fmt(c.report->novel_mean) + ", iid " + fmt(c.report->slices.at(eval::kIidSlice).accuracy) +
                                       ", recall@5 " + fmt(c.report->recall.recall)
                                 : "FAILED " + c.error)
                    << " (" << fmt(dt, 1) << " s)" << std::endl;
        }
      }
      std::vector<std::string> order;
      for (const auto& a : arms) order.push_back(a.name);
      const auto slices = bench.split.slice_names();
      if (wanted(5) || wanted(6) || wanted(7)) {
        const auto rows = eval::aggregate(cells, order);
        std::cout << "metric: exact-match accuracy, mean ± sample stdev over " << seeds << " seeds\n"
                  << eval::render_table(rows, eval::table_columns(slices)) << std::flush;
        std::ofstream(table_path) << eval::table_json(rows, cells);
        Rows by_arm;
        std::size_t failed = 0;
        for (const auto& r : rows) {
          by_arm[r.arm] = r;
          failed += r.failures;
        }
        auto guard = [&](Outcome o) {
          if (failed) {
            o.pass = false;
            o.detail += "; " + std::to_string(failed) + " ablation cells failed";
          }
          return o;
        };
        if (wanted(5)) print(5, "novel-slice gain over Base", guard(table1_direction(by_arm, slices, core_seconds)));
        if (wanted(6)) print(6, "loss ablation ordering", guard(table3_direction(by_arm)));
        if (wanted(7)) print(7, "grounding recall and reference scheme", guard(grounding_direction(by_arm, bench.split)));
      }
      if (wanted(8)) {
        const auto ours = *eval::arm_named(base, "Ours");
        const auto it = std::find_if(cells.begin(), cells.end(), [](const auto& c) { return c.arm == "Ours" && c.seed == 0; });
        print(8, "determinism", determinism(bench, *it, ours, dc, spec, mining));
      }
    }
  }

  std::size_t passed = 0;
  for (const auto& [n, o] : results) passed += o.pass;
  std::cout << passed << "/" << results.size() << " criteria passed" << std::endl;
  return passed == results.size() ? 0 : 1;
}
