#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefseg/rng.hpp"
#include "prefseg/sample.hpp"
#include "prefseg/toy_model.hpp"

namespace prefseg::toy {

/// Scene statistics of the synthetic task: each image holds 1..max_objects
/// axis-aligned rectangles of distinct classes in distinct quadrants.
struct SceneConfig {
  int max_objects = 3;
  int min_side = 3;
  int max_side = 6;
  double background_mean = 0.08;
  double background_sd = 0.03;
  double texture_sd = 0.03;

  void validate(const ModelConfig& model) const;
  nlohmann::json to_json() const;
  static SceneConfig from_json(const nlohmann::json& doc);
};

Sample synth_sample(const ModelConfig& model, const SceneConfig& scene, Rng& rng);

/// count samples, sample i drawn from derive_seed(seed, "sample", i).
std::vector<Sample> synth_dataset(const ModelConfig& model, const SceneConfig& scene,
                                  std::size_t count, std::uint64_t seed);

}  // namespace prefseg::toy
