#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sepvqa/data/question.hpp"
#include "sepvqa/data/scene.hpp"

namespace sepvqa::data {

struct Example {
  std::uint64_t id = 0;
  Scene scene;
  QuestionRecord question;

  friend bool operator==(const Example&, const Example&) = default;
};

/// Generates `scene_count` examples. Example i depends only on (config, i): a composition is
/// drawn by weight, then objects are resampled until the question is answerable. Counting
/// questions show the concept with probability `counting_presence`; existence answers are
/// yes with probability `existence_yes`.
std::vector<Example> build_dataset(const DatasetConfig& config);

/// Compositions with positive weight that no scene can realise under the config.
std::vector<std::pair<Skill, ConceptId>> unreachable_compositions(const DatasetConfig& config);

std::string example_to_json(const Example& example);
Example example_from_json(const std::string& line);

void write_jsonl(const std::filesystem::path& path, const std::vector<Example>& examples);
std::vector<Example> read_jsonl(const std::filesystem::path& path);

}  // namespace sepvqa::data
