#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "doctest.h"
#include "json.hpp"
#include "sepvqa/data/world.hpp"
#include "sepvqa/util/hash.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path& workdir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "sepvqa_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct Result {
  int status;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Result run(const std::string& args) {
  const auto out = workdir() / "stdout.txt", err = workdir() / "stderr.txt";
  const std::string cmd = "cd " + workdir().string() + " && " + SEPVQA_CLI + std::string(" ") + args + " > " + out.string() + " 2> " + err.string();
  const int raw = std::system(cmd.c_str());
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(out), slurp(err)};
}

void write(const std::string& name, const std::string& text) {
  std::ofstream(workdir() / name) << text;
}

json manifest(const std::string& dir) { return json::parse(slurp(workdir() / dir / "manifest.json")); }

std::string hash(const std::string& rel) { return sepvqa::util::hash_file(workdir() / rel); }

// Small benchmark shared by every case: 3000 questions with reduced slice minimums.
void ensure_data() {
  static bool done = false;
  if (done) return;
  write("small.cfg", "min_unlabeled = 20\nmin_test = 10\n");
  write("tiny.cfg", "hidden = 16\nlayers = 1\nheads = 2\nepochs = 2\ndecay_epochs = 1\ncontrastive_targets = 2\n");
  REQUIRE(run("gen-data --out data --config small.cfg --scenes 3000 --seed 4").status == 0);
  REQUIRE(run("mine-refs --data data --out refs --seed 4").status == 0);
  done = true;
}

}  // namespace

TEST_CASE("gen-data writes the configured number of questions deterministically") {
  ensure_data();
  std::ifstream in(workdir() / "data/dataset.jsonl");
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) lines += !l.empty();
  CHECK(lines == 3000);
  for (const char* f : {"split.json", "lexicon.json", "manifest.json"}) CHECK(fs::exists(workdir() / "data" / f));
  REQUIRE(run("gen-data --out data_again --config small.cfg --scenes 3000 --seed 4").status == 0);
  for (const char* f : {"dataset.jsonl", "split.json", "lexicon.json"}) {
    CHECK(hash(std::string("data/") + f) == hash(std::string("data_again/") + f));
  }
  const auto m = manifest("data");
  CHECK(m.at("command") == "gen-data");
  CHECK(m.at("exit_status") == 0);
  CHECK(m.at("outputs").size() == 3);
}

TEST_CASE("configuration and usage errors exit with status 2") {
  write("bad.cfg", "bogus_key = 1\n");
  auto r = run("gen-data --out bad --config bad.cfg");
  CHECK(r.status == 2);
  CHECK(r.err.rfind("ERROR: ", 0) == 0);
  CHECK(r.err.find("bogus_key") != std::string::npos);
  CHECK(manifest("bad").at("exit_status") == 2);
  CHECK(run("mine-refs --data no_such_dir --out m").status == 2);
  CHECK(run("eval --data no_such_dir --checkpoint missing.bin --out e").status == 2);
  CHECK(run("train --data data --out t --preset huge").status == 2);
  CHECK(run("frobnicate").status == 2);
}

TEST_CASE("runtime failures exit with status 3") {
  // Slices this small cannot meet the default minimum sizes.
  const auto r = run("gen-data --out tiny_data --scenes 200");
  CHECK(r.status == 3);
  CHECK(r.err.rfind("ERROR: ", 0) == 0);
}

TEST_CASE("mine-refs covers every target and passes the oracle spot check") {
  ensure_data();
  const auto r = run("mine-refs --data data --out refs_checked --seed 4 --scheme ccc --verify 100");
  REQUIRE(r.status == 0);
  CHECK(r.out.find("oracle spot check passed on 100 targets") != std::string::npos);
  const auto m = manifest("refs_checked").at("mining").at("ccc");
  CHECK(m.at("oracle_checked") == 100);
  CHECK(m.at("skipped") == 0);
  CHECK(hash("refs_checked/refs_ccc.jsonl") == hash("refs/refs_ccc.jsonl"));
}

TEST_CASE("--split replaces the split manifest in the data directory") {
  ensure_data();
  fs::copy_file(workdir() / "data/split.json", workdir() / "moved_split.json", fs::copy_options::overwrite_existing);
  REQUIRE(run("mine-refs --data data --split moved_split.json --out refs_split --seed 4 --scheme ccc").status == 0);
  CHECK(hash("refs_split/refs_ccc.jsonl") == hash("refs/refs_ccc.jsonl"));
  CHECK(manifest("refs_split").at("inputs").contains("moved_split.json"));
  const auto r = run("mine-refs --data data --split missing_split.json --out refs_nosplit");
  CHECK(r.status == 2);
  CHECK(r.err.find("missing_split.json") != std::string::npos);
}

TEST_CASE("train, resume and eval") {
  ensure_data();
  REQUIRE(run("train --data data --refs refs/refs_ccc.jsonl --out full --config tiny.cfg --seed 2").status == 0);
  CHECK(fs::exists(workdir() / "full/checkpoint.bin"));
  CHECK(manifest("full").at("arm") == "Ours");
  REQUIRE(run("train --data data --refs refs/refs_ccc.jsonl --out part --config tiny.cfg --seed 2 --stop-at-step 23").status == 0);
  REQUIRE(run("train --data data --refs refs/refs_ccc.jsonl --out part --config tiny.cfg --seed 2 --resume part/checkpoint.bin").status == 0);
  CHECK(hash("part/checkpoint.bin") == hash("full/checkpoint.bin"));
  CHECK(hash("part/train_log.jsonl") == hash("full/train_log.jsonl"));
  CHECK(run("train --data data --refs refs/refs_ccc.jsonl --out part --config tiny.cfg --seed 3 --resume part/checkpoint.bin").status == 2);

  REQUIRE(run("train --data data --out base --config tiny.cfg --p-sep 0").status == 0);
  CHECK(manifest("base").at("arm") == "Base");

  REQUIRE(run("eval --data data --checkpoint full/checkpoint.bin --out eval_full").status == 0);
  REQUIRE(run("eval --data data --checkpoint full/checkpoint.bin --out eval_again").status == 0);
  CHECK(hash("eval_full/report.json") == hash("eval_again/report.json"));
  const auto report = json::parse(slurp(workdir() / "eval_full/report.json"));
  CHECK(report.at("metric") == "exact-match accuracy");
  CHECK(report.at("metadata").at("arm") == "Ours");
  CHECK(report.at("slices").size() == 7);
}

TEST_CASE("untrained checkpoints score near chance") {
  ensure_data();
  const double chance = 100.0 / static_cast<double>(sepvqa::data::AnswerVocab::get().size());
  double sum = 0.0;
  const int seeds = 6;
  for (int s = 0; s < seeds; ++s) {
    const std::string dir = "untrained" + std::to_string(s);
    REQUIRE(run("train --data data --out " + dir + " --objective base --stop-at-step 0 --seed " + std::to_string(s)).status == 0);
    REQUIRE(run("eval --data data --checkpoint " + dir + "/checkpoint.bin --out " + dir + "_eval").status == 0);
    sum += json::parse(slurp(workdir() / (dir + "_eval/report.json"))).at("overall").get<double>();
  }
  const double mean = sum / seeds;
  CAPTURE(mean);
  CAPTURE(chance);
  CHECK(mean < 2.0 * chance);
}

TEST_CASE("ablate and report build the same table") {
  ensure_data();
  const auto r = run("ablate --data data --refs refs --out abl --config tiny.cfg --seeds 2 --arms Base,Ours --jobs 2");
  REQUIRE(r.status == 0);
  const auto table = json::parse(slurp(workdir() / "abl/table.json"));
  CHECK(table.at("rows").size() == 2);
  CHECK(table.at("cells").size() == 4);
  REQUIRE(run("report --dir abl/cells --out rep").status == 0);
  CHECK(slurp(workdir() / "rep/table.txt") == slurp(workdir() / "abl/table.txt"));
  CHECK(manifest("rep").at("reports") == 4);
  CHECK(run("report --dir nowhere --out rep2").status == 2);
}
