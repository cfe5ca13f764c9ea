#include "sepvqa/eval/split.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "sepvqa/num/random.hpp"
#include "sepvqa/util/hash.hpp"

namespace sepvqa::eval {

using nlohmann::json;

bool Slice::matches(const data::QuestionRecord& q) const {
  if (mode == SliceMode::Composition && skill && q.skill != *skill) return false;
  for (const auto& m : q.mentions) {
    if (std::find(concepts.begin(), concepts.end(), m.concept_id) != concepts.end()) return true;
  }
  return false;
}

SplitSpec SplitSpec::benchmark() {
  SplitSpec s;
  auto cat = [](const char* w) { return *data::category_id(w); };
  s.slices.push_back({"counting-dog", SliceMode::Composition, data::Skill::Counting, {cat("dog")}});
  s.slices.push_back({"color-car", SliceMode::Composition, data::Skill::Color, {cat("car")}});
  s.slices.push_back({"subcategory-food", SliceMode::Composition, data::Skill::Subcategory,
                      data::categories_in(*data::supercategory_id("food"))});
  s.slices.push_back({"concept-sheep", SliceMode::Concept, std::nullopt, {cat("sheep")}});
  s.slices.push_back({"concept-phone", SliceMode::Concept, std::nullopt, {cat("phone")}});
  s.slices.push_back({"concept-bowl", SliceMode::Concept, std::nullopt, {cat("bowl")}});
  return s;
}

void SplitSpec::validate() const {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw SplitError("test_fraction must lie in (0, 1)");
  if (!(iid_test_fraction >= 0.0 && iid_test_fraction < 1.0)) throw SplitError("iid_test_fraction must lie in [0, 1)");
  for (std::size_t i = 0; i < slices.size(); ++i) {
    const auto& s = slices[i];
    if (s.name.empty() || s.name == kIidSlice) throw SplitError("invalid slice name '" + s.name + "'");
    if (s.concepts.empty()) throw SplitError("slice '" + s.name + "' lists no concepts");
    if (s.mode == SliceMode::Composition && !s.skill) throw SplitError("composition slice '" + s.name + "' needs a skill");
    for (std::size_t j = 0; j < i; ++j) {
      if (slices[j].name == s.name) throw SplitError("duplicate slice name '" + s.name + "'");
    }
  }
}

std::vector<std::size_t> Split::indices(Partition p) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < partition.size(); ++i) {
    if (partition[i] == p) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> Split::test_indices(const std::string& slice_name) const {
  int want = -1;
  if (slice_name != kIidSlice) {
    for (std::size_t s = 0; s < spec.slices.size(); ++s) {
      if (spec.slices[s].name == slice_name) want = static_cast<int>(s);
    }
    if (want < 0) throw SplitError("unknown slice '" + slice_name + "'");
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < partition.size(); ++i) {
    if (partition[i] == Partition::Test && slice[i] == want) out.push_back(i);
  }
  return out;
}

std::vector<std::string> Split::slice_names() const {
  std::vector<std::string> out;
  for (const auto& s : spec.slices) out.push_back(s.name);
  return out;
}

namespace {

const char* partition_name(Partition p) {
  switch (p) {
    case Partition::Labeled: return "labeled";
    case Partition::Unlabeled: return "unlabeled";
    case Partition::Test: return "test";
  }
  return "?";
}

json slice_to_json(const Slice& s) {
  json concepts = json::array();
  for (auto c : s.concepts) concepts.push_back(data::category_words()[static_cast<std::size_t>(c)]);
  return {{"name", s.name},
          {"mode", s.mode == SliceMode::Composition ? "composition" : "concept"},
          {"skill", s.skill ? json(std::string(data::skill_name(*s.skill))) : json(nullptr)},
          {"concepts", concepts}};
}

Slice slice_from_json(const json& j) {
  Slice s;
  s.name = j.at("name").get<std::string>();
  const auto mode = j.at("mode").get<std::string>();
  if (mode != "composition" && mode != "concept") throw SplitError("unknown slice mode '" + mode + "'");
  s.mode = mode == "composition" ? SliceMode::Composition : SliceMode::Concept;
  if (!j.at("skill").is_null()) {
    const auto name = j.at("skill").get<std::string>();
    auto skill = data::parse_skill(name);
    if (!skill) throw SplitError("unknown skill '" + name + "'");
    s.skill = *skill;
  }
  for (const auto& c : j.at("concepts")) {
    const auto word = c.get<std::string>();
    auto id = data::category_id(word);
    if (!id) throw SplitError("unknown concept '" + word + "'");
    s.concepts.push_back(*id);
  }
  return s;
}

}  // namespace

std::string Split::to_json() const {
  json j;
  json slices = json::array();
  for (const auto& s : spec.slices) slices.push_back(slice_to_json(s));
  j["spec"] = {{"slices", slices},
               {"test_fraction", spec.test_fraction},
               {"iid_test_fraction", spec.iid_test_fraction},
               {"min_unlabeled", spec.min_unlabeled},
               {"min_test", spec.min_test},
               {"seed", spec.seed}};
  json parts = {{"labeled", json::array()}, {"unlabeled", json::array()}, {"test", json::array()}};
  json per_slice = json::object();
  per_slice[kIidSlice] = json::array();
  for (const auto& s : spec.slices) per_slice[s.name] = json::array();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    parts[partition_name(partition[i])].push_back(ids[i]);
    if (partition[i] == Partition::Test) {
      per_slice[slice[i] < 0 ? std::string(kIidSlice) : spec.slices[static_cast<std::size_t>(slice[i])].name].push_back(ids[i]);
    }
  }
  j["partitions"] = parts;
  j["test_slices"] = per_slice;
  json held = json::array();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (slice[i] >= 0) held.push_back({ids[i], slice[i]});
  }
  j["held_out"] = held;
  return j.dump();
}

Split Split::from_json(const std::string& text) {
  Split s;
  try {
    const json j = json::parse(text);
    const auto& sp = j.at("spec");
    for (const auto& sl : sp.at("slices")) s.spec.slices.push_back(slice_from_json(sl));
    s.spec.test_fraction = sp.at("test_fraction").get<double>();
    s.spec.iid_test_fraction = sp.at("iid_test_fraction").get<double>();
    s.spec.min_unlabeled = sp.at("min_unlabeled").get<std::size_t>();
    s.spec.min_test = sp.at("min_test").get<std::size_t>();
    s.spec.seed = sp.at("seed").get<std::uint64_t>();
    s.spec.validate();
    std::vector<std::pair<std::uint64_t, Partition>> rows;
    for (auto p : {Partition::Labeled, Partition::Unlabeled, Partition::Test}) {
      for (const auto& id : j.at("partitions").at(partition_name(p))) rows.emplace_back(id.get<std::uint64_t>(), p);
    }
    std::sort(rows.begin(), rows.end());
    std::map<std::uint64_t, int> held;
    for (const auto& h : j.at("held_out")) held[h.at(0).get<std::uint64_t>()] = h.at(1).get<int>();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (i > 0 && rows[i].first == rows[i - 1].first) throw SplitError("example " + std::to_string(rows[i].first) + " appears in two partitions");
      s.ids.push_back(rows[i].first);
      s.partition.push_back(rows[i].second);
      auto it = held.find(rows[i].first);
      s.slice.push_back(it == held.end() ? -1 : it->second);
    }
  } catch (const nlohmann::json::exception& e) {
    throw SplitError(std::string("malformed split manifest: ") + e.what());
  }
  return s;
}

void Split::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw SplitError("cannot open " + path.string() + " for writing");
  out << to_json() << '\n';
}

Split Split::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SplitError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::string Split::hash() const { return util::hash_hex(to_json()); }

Split build_novel_splits(const std::vector<data::Example>& dataset, const SplitSpec& spec) {
  spec.validate();
  Split split;
  split.spec = spec;
  const std::size_t n = dataset.size();
  split.ids.resize(n);
  split.partition.assign(n, Partition::Labeled);
  split.slice.assign(n, -1);
  std::vector<std::vector<std::size_t>> members(spec.slices.size());
  for (std::size_t i = 0; i < n; ++i) {
    split.ids[i] = dataset[i].id;
    if (i > 0 && dataset[i].id <= dataset[i - 1].id) throw SplitError("dataset ids must be strictly increasing");
    for (std::size_t s = 0; s < spec.slices.size(); ++s) {
      if (spec.slices[s].matches(dataset[i].question)) {
        split.slice[i] = static_cast<int>(s);
        members[s].push_back(i);
        break;
      }
    }
  }
  std::string shortfall;
  for (std::size_t s = 0; s < spec.slices.size(); ++s) {
    auto& idx = members[s];
    const auto n_test = static_cast<std::size_t>(std::llround(spec.test_fraction * static_cast<double>(idx.size())));
    const std::size_t n_unlabeled = idx.size() - n_test;
    if (n_test < spec.min_test || n_unlabeled < spec.min_unlabeled) {
      shortfall += " " + spec.slices[s].name + " has " + std::to_string(idx.size()) + " questions (" + std::to_string(n_unlabeled) +
                   " unlabeled, " + std::to_string(n_test) + " test; need " + std::to_string(spec.min_unlabeled) + " and " +
                   std::to_string(spec.min_test) + ")";
      continue;
    }
    num::Rng rng(num::derive_seed(spec.seed, "split-slice", s));
    rng.shuffle(idx);
    for (std::size_t k = 0; k < idx.size(); ++k) split.partition[idx[k]] = k < n_test ? Partition::Test : Partition::Unlabeled;
  }
  if (!shortfall.empty()) throw SplitError("held-out slices below minimum size:" + shortfall);
  for (std::size_t i = 0; i < n; ++i) {
    if (split.slice[i] >= 0) continue;
    num::Rng rng(num::derive_seed(spec.seed, "split-iid", dataset[i].id));
    if (rng.bernoulli(spec.iid_test_fraction)) split.partition[i] = Partition::Test;
  }
  return split;
}

std::vector<data::Example> apply_split(const std::vector<data::Example>& dataset, const Split& split) {
  if (dataset.size() != split.ids.size()) throw SplitError("split covers " + std::to_string(split.ids.size()) + " examples, dataset has " + std::to_string(dataset.size()));
  std::vector<data::Example> out = dataset;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].id != split.ids[i]) throw SplitError("split and dataset disagree on example order at position " + std::to_string(i));
    if (!out[i].question.answer) throw SplitError("example " + std::to_string(out[i].id) + " has no gold answer");
    switch (split.partition[i]) {
      case Partition::Labeled:
        out[i].question.labeled = true;
        break;
      case Partition::Unlabeled:
        out[i].question.labeled = false;
        out[i].question.answer.reset();
        break;
      case Partition::Test:
        out[i].question.labeled = false;
        break;
    }
  }
  return out;
}

std::vector<std::uint64_t> leakage(const std::vector<data::Example>& dataset, const Split& split) {
  std::vector<std::uint64_t> out;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (split.partition.at(i) != Partition::Labeled) continue;
    for (const auto& s : split.spec.slices) {
      if (s.matches(dataset[i].question)) {
        out.push_back(dataset[i].id);
        break;
      }
    }
  }
  return out;
}

}  // namespace sepvqa::eval
