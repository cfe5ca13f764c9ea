#include "sepvqa/data/scene.hpp"

#include <cmath>
#include <numeric>

namespace sepvqa::data {

std::size_t Scene::count(ConceptId category) const {
  std::size_t n = 0;
  for (const auto& o : objects) n += (o.category == category);
  return n;
}

std::vector<std::size_t> Scene::gold_regions(ConceptId category) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    if (objects[i].category == category) out.push_back(i);
  }
  return out;
}

std::map<ConceptId, std::vector<std::size_t>> Scene::gold_region_of() const {
  std::map<ConceptId, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < objects.size(); ++i) out[objects[i].category].push_back(i);
  return out;
}

DatasetConfig DatasetConfig::benchmark() {
  DatasetConfig c;
  const auto dog = *category_id("dog");
  const auto car = *category_id("car");
  c.composition_overrides.push_back({Skill::Counting, dog, 5.0});
  c.composition_overrides.push_back({Skill::Color, car, 5.0});
  for (ConceptId food : categories_in(*supercategory_id("food"))) {
    c.composition_overrides.push_back({Skill::Subcategory, food, 1.5});
  }
  return c;
}

namespace {

void check_weights(const std::vector<double>& w, std::size_t expected, const char* what) {
  if (w.empty()) return;
  if (w.size() != expected) {
    throw DataError(std::string(what) + " has " + std::to_string(w.size()) + " entries, expected " + std::to_string(expected));
  }
  for (double v : w) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw DataError(std::string(what) + " must be finite and nonnegative");
  }
  if (std::accumulate(w.begin(), w.end(), 0.0) <= 0.0) throw DataError(std::string(what) + " sum to zero");
}

}  // namespace

void DatasetConfig::validate() const {
  if (scene_count == 0) throw DataError("scene_count must be positive");
  if (max_objects == 0) throw DataError("max_objects must be positive");
  if (max_objects > static_cast<std::size_t>(kMaxCount)) {
    throw DataError("max_objects " + std::to_string(max_objects) + " exceeds the largest count answer " + std::to_string(kMaxCount));
  }
  if (region_dim < attribute_code_width()) {
    throw DataError("region_dim " + std::to_string(region_dim) + " is smaller than the attribute code width " +
                    std::to_string(attribute_code_width()));
  }
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw DataError("noise must be finite and nonnegative");
  for (double p : {theme_strength, counting_presence, existence_yes}) {
    if (!(p >= 0.0 && p <= 1.0)) throw DataError("probabilities must lie in [0, 1]");
  }
  if (max_attempts == 0) throw DataError("max_attempts must be positive");
  check_weights(category_weights, category_words().size(), "category_weights");
  check_weights(skill_weights, kSkillCount, "skill_weights");
  check_weights(concept_weights, category_words().size(), "concept_weights");
  for (const auto& o : composition_overrides) {
    if (o.concept_id < 0 || static_cast<std::size_t>(o.concept_id) >= category_words().size()) throw DataError("composition override concept out of range");
    if (!(o.weight >= 0.0) || !std::isfinite(o.weight)) throw DataError("composition override weight must be finite and nonnegative");
  }
}

double DatasetConfig::category_weight(ConceptId c) const {
  return category_weights.empty() ? 1.0 : category_weights.at(static_cast<std::size_t>(c));
}
double DatasetConfig::skill_weight(Skill s) const {
  return skill_weights.empty() ? 1.0 : skill_weights.at(static_cast<std::size_t>(s));
}
double DatasetConfig::concept_weight(ConceptId c) const {
  return concept_weights.empty() ? 1.0 : concept_weights.at(static_cast<std::size_t>(c));
}
double DatasetConfig::composition_weight(Skill s, ConceptId c) const {
  double w = skill_weight(s) * concept_weight(c);
  for (const auto& o : composition_overrides) {
    if (o.skill == s && o.concept_id == c) w *= o.weight;
  }
  return w;
}

std::size_t attribute_code_width() { return category_words().size() + color_words().size() + 3; }

FeatureRenderer::FeatureRenderer(const DatasetConfig& config)
    : mixing_({attribute_code_width(), config.region_dim}), noise_(config.noise) {
  config.validate();
  num::Rng rng(num::derive_seed(config.seed, "feature-mixing"));
  const std::size_t d = config.region_dim;
  const double unit = 1.0 / std::sqrt(static_cast<double>(d));
  auto gaussian_row = [&] {
    std::vector<double> r(d);
    for (auto& v : r) v = unit * rng.normal();
    return r;
  };
  std::vector<std::vector<double>> super_rows;
  for (std::size_t s = 0; s < supercategory_words().size(); ++s) super_rows.push_back(gaussian_row());
  std::size_t row = 0;
  const double half = std::sqrt(0.5);
  for (std::size_t c = 0; c < category_words().size(); ++c, ++row) {
    const auto own = gaussian_row();
    const auto& shared = super_rows[static_cast<std::size_t>(supercategory_of(static_cast<ConceptId>(c)))];
    for (std::size_t j = 0; j < d; ++j) mixing_.at(row, j) = half * shared[j] + half * own[j];
  }
  for (std::size_t k = row; k < attribute_code_width(); ++k) {
    const auto r = gaussian_row();
    for (std::size_t j = 0; j < d; ++j) mixing_.at(k, j) = r[j];
  }
}

num::Tensor FeatureRenderer::render(const std::vector<SceneObject>& objects, num::Rng& rng) const {
  const std::size_t d = mixing_.cols();
  const std::size_t ncat = category_words().size();
  const std::size_t ncol = color_words().size();
  num::Tensor out({objects.size(), d});
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const auto& o = objects[i];
    const std::size_t size_row = ncat + ncol;
    for (std::size_t j = 0; j < d; ++j) {
      double v = mixing_.at(static_cast<std::size_t>(o.category), j) + mixing_.at(ncat + static_cast<std::size_t>(o.color), j);
      if (o.large) v += mixing_.at(size_row, j);
      v += o.x * mixing_.at(size_row + 1, j) + o.y * mixing_.at(size_row + 2, j);
      out.at(i, j) = v;
    }
    if (noise_ > 0.0) {
      for (std::size_t j = 0; j < d; ++j) out.at(i, j) += noise_ * rng.normal();
    }
  }
  return out;
}

std::vector<SceneObject> sample_objects(const DatasetConfig& config, num::Rng& rng) {
  const std::size_t ncat = category_words().size();
  std::vector<double> global(ncat);
  for (std::size_t c = 0; c < ncat; ++c) global[c] = config.category_weight(static_cast<ConceptId>(c));
  std::vector<double> theme_weights(supercategory_words().size(), 0.0);
  for (std::size_t c = 0; c < ncat; ++c) theme_weights[static_cast<std::size_t>(supercategory_of(static_cast<ConceptId>(c)))] += global[c];
  const auto theme = static_cast<int>(rng.categorical(theme_weights));
  std::vector<double> themed(ncat, 0.0);
  for (std::size_t c = 0; c < ncat; ++c) {
    if (supercategory_of(static_cast<ConceptId>(c)) == theme) themed[c] = global[c];
  }

  const std::size_t n = 1 + rng.below(config.max_objects);
  std::vector<SceneObject> objects(n);
  for (auto& o : objects) {
    const bool in_theme = rng.bernoulli(config.theme_strength);
    o.category = static_cast<ConceptId>(rng.categorical(in_theme ? themed : global));
    o.color = static_cast<int>(rng.below(color_words().size()));
    o.large = rng.bernoulli(0.5);
    o.x = rng.uniform();
    o.y = rng.uniform();
  }
  return objects;
}

Scene generate_scene(const DatasetConfig& config, num::Rng& rng) {
  return generate_scene(config, FeatureRenderer(config), rng);
}

Scene generate_scene(const DatasetConfig& config, const FeatureRenderer& renderer, num::Rng& rng) {
  Scene s;
  s.objects = sample_objects(config, rng);
  s.regions = renderer.render(s.objects, rng);
  return s;
}

}  // namespace sepvqa::data
