#include "prefseg/synth.hpp"

#include <algorithm>
#include <array>
#include <numeric>

#include "prefseg/error.hpp"

namespace prefseg::toy {

void SceneConfig::validate(const ModelConfig& model) const {
  const int quadrant = model.grid / 2;
  if (max_objects < 1 || max_objects > std::min(4, model.classes)) {
    throw ConfigError("max_objects must lie in 1..min(4, classes)");
  }
  if (max_objects > model.max_targets) {
    throw ConfigError("max_objects exceeds the model's max_targets");
  }
  if (min_side < 1 || max_side < min_side || max_side > quadrant) {
    throw ConfigError("object sides must satisfy 1 <= min_side <= max_side <= grid/2");
  }
  if (!(background_sd >= 0) || !(texture_sd >= 0) || !(background_mean >= 0)) {
    throw ConfigError("scene noise levels must be >= 0");
  }
}

nlohmann::json SceneConfig::to_json() const {
  return {{"max_objects", max_objects},         {"min_side", min_side},
          {"max_side", max_side},               {"background_mean", background_mean},
          {"background_sd", background_sd},     {"texture_sd", texture_sd}};
}

SceneConfig SceneConfig::from_json(const nlohmann::json& doc) {
  SceneConfig s;
  s.max_objects = doc.value("max_objects", s.max_objects);
  s.min_side = doc.value("min_side", s.min_side);
  s.max_side = doc.value("max_side", s.max_side);
  s.background_mean = doc.value("background_mean", s.background_mean);
  s.background_sd = doc.value("background_sd", s.background_sd);
  s.texture_sd = doc.value("texture_sd", s.texture_sd);
  return s;
}

namespace {

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

Sample synth_sample(const ModelConfig& model, const SceneConfig& scene, Rng& rng) {
  scene.validate(model);
  const int g = model.grid;
  const int half = g / 2;
  const int n_obj = rng.uniform_int(1, scene.max_objects);

  std::vector<int> quads(4);
  std::iota(quads.begin(), quads.end(), 0);
  shuffle(quads, rng);
  quads.resize(static_cast<std::size_t>(n_obj));
  std::sort(quads.begin(), quads.end());

  std::vector<int> classes(static_cast<std::size_t>(model.classes));
  std::iota(classes.begin(), classes.end(), 0);
  shuffle(classes, rng);

  struct Object {
    int quadrant;
    int cls;
    Mask mask;
  };
  std::vector<Object> objects;
  for (int i = 0; i < n_obj; ++i) {
    const int q = quads[static_cast<std::size_t>(i)];
    const int h = rng.uniform_int(scene.min_side, scene.max_side);
    const int w = rng.uniform_int(scene.min_side, scene.max_side);
    const int top = (q / 2) * half + rng.uniform_int(0, half - h);
    const int left = (q % 2) * half + rng.uniform_int(0, half - w);
    Mask m(g, g);
    m.fill_rect(top, left, h, w);
    objects.push_back({q, classes[static_cast<std::size_t>(i)], std::move(m)});
  }

  Image img(g, g);
  for (int r = 0; r < g; ++r) {
    for (int c = 0; c < g; ++c) {
      double v = rng.normal(scene.background_mean, scene.background_sd);
      for (const auto& o : objects) {
        if (o.mask.get(r, c)) v = rng.normal(model.class_intensity(o.cls), scene.texture_sd);
      }
      img.at(r, c) = std::clamp(v, 0.0, 1.0);
    }
  }

  // A nonzero subset of the occupied quadrants.
  const int subset = rng.uniform_int(1, (1 << n_obj) - 1);
  Sample s;
  s.image = std::move(img);
  for (int i = 0; i < n_obj; ++i) {
    const auto& o = objects[static_cast<std::size_t>(i)];
    s.object_masks.push_back(o.mask);
    if (!((subset >> i) & 1)) continue;
    s.instruction |= 1 << o.quadrant;
    s.gt_response.insert(s.gt_response.end(),
                         {vocab::object_token(o.cls), vocab::kSeg, vocab::kEndOfSentence});
    s.gt_masks.push_back(o.mask);
  }
  s.validate();
  return s;
}

std::vector<Sample> synth_dataset(const ModelConfig& model, const SceneConfig& scene,
                                  std::size_t count, std::uint64_t seed) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, "sample", i));
    out.push_back(synth_sample(model, scene, rng));
  }
  return out;
}

}  // namespace prefseg::toy
