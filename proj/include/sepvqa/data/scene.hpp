#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "sepvqa/data/world.hpp"
#include "sepvqa/num/random.hpp"
#include "sepvqa/num/tensor.hpp"

namespace sepvqa::data {

struct SceneObject {
  ConceptId category = 0;
  int color = 0;
  bool large = false;
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

/// A synthetic image: attributed objects and one region feature row per object.
struct Scene {
  std::vector<SceneObject> objects;
  num::Tensor regions;

  std::size_t count(ConceptId category) const;
  std::vector<std::size_t> gold_regions(ConceptId category) const;
  std::map<ConceptId, std::vector<std::size_t>> gold_region_of() const;

  friend bool operator==(const Scene&, const Scene&) = default;
};

/// Multiplier applied to the sampling weight of one (skill, concept) composition.
struct CompositionWeight {
  Skill skill;
  ConceptId concept_id;
  double weight;
};

struct DatasetConfig {
  /// One question is generated per scene.
  std::size_t scene_count = 20000;
  std::size_t max_objects = 8;
  std::size_t region_dim = 32;
  double noise = 0.1;
  /// Probability that an object is drawn from the scene's theme supercategory.
  double theme_strength = 0.6;
  /// Object category sampling weights; empty means uniform.
  std::vector<double> category_weights;
  /// Question skill and concept weights; empty means uniform.
  std::vector<double> skill_weights;
  std::vector<double> concept_weights;
  std::vector<CompositionWeight> composition_overrides;
  /// Fraction of counting questions whose concept_id is present in the scene.
  double counting_presence = 0.75;
  double existence_yes = 0.5;
  std::size_t max_attempts = 5000;
  std::uint64_t seed = 0;

  /// Default benchmark: uniform weights with boosts on the held-out compositions so every
  /// held-out slice has enough questions for both unlabeled training and testing.
  static DatasetConfig benchmark();

  void validate() const;
  double category_weight(ConceptId c) const;
  double skill_weight(Skill s) const;
  double concept_weight(ConceptId c) const;
  double composition_weight(Skill s, ConceptId c) const;
};

/// Width of the attribute code: category one-hot, color one-hot, size bit, (x, y).
std::size_t attribute_code_width();

/// Fixed linear map from attribute codes to region features. Category columns share a
/// per-supercategory component so related categories have related features.
class FeatureRenderer {
 public:
  explicit FeatureRenderer(const DatasetConfig& config);
  num::Tensor render(const std::vector<SceneObject>& objects, num::Rng& rng) const;
  const num::Tensor& mixing() const { return mixing_; }

 private:
  num::Tensor mixing_;  // code width × region dim
  double noise_;
};

std::vector<SceneObject> sample_objects(const DatasetConfig& config, num::Rng& rng);
Scene generate_scene(const DatasetConfig& config, num::Rng& rng);
Scene generate_scene(const DatasetConfig& config, const FeatureRenderer& renderer, num::Rng& rng);

}  // namespace sepvqa::data
