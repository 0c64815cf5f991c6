#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefseg/mask.hpp"
#include "prefseg/rng.hpp"
#include "prefseg/sample.hpp"
#include "prefseg/segmenter.hpp"
#include "prefseg/types.hpp"

namespace prefseg::collect {

struct Rect {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
  bool operator==(const Rect&) const = default;
};

struct NoiseSpec {
  Rect rect;
  double sigma = 0.25;
  std::uint64_t seed = 0;
};

/// Adds independent Gaussian(0, sigma^2) noise inside rect, clamped to [0, 1].
/// Throws GeometryError when rect is not fully inside the image.
Image perturb_image(const Image& img, const NoiseSpec& spec);

/// Uniform top-left, uniform size in [1/4, 3/4] of each dimension.
NoiseSpec sample_noise_spec(int height, int width, double sigma, Rng& rng);

/// Per-target localization terms IoU(pred_n, gt_n) - max IoU(pred_n, wrong
/// proposal). A proposal corresponds to gt_n iff their IoU exceeds 0.5.
std::vector<double> target_localization_scores(const std::vector<Mask>& pred,
                                               const std::vector<Mask>& gt,
                                               const std::vector<Mask>& sam);

/// Mean of target_localization_scores; always in [-1, 1].
double localization_score(const std::vector<Mask>& pred,
                          const std::vector<Mask>& gt,
                          const std::vector<Mask>& sam);

std::vector<double> target_boundary_ious(const std::vector<Mask>& pred,
                                         const std::vector<Mask>& gt,
                                         BandWidth w);

enum class Phase { kLocalization, kBoundary };

const char* phase_name(Phase p);
Phase phase_from_name(const std::string& name);

struct PerturbationRecord {
  std::size_t index = 0;  // position within its round
  NoiseSpec noise;
  Image image;
  TokenSeq tokens;
  std::vector<Mask> masks;
  std::vector<Embedding> embeddings;
  double score_s = 0.0;
  double boundary_iou_b = 0.0;
  std::vector<double> target_s;
  std::vector<double> target_b;
};

/// Three perturbed views ordered best, median, worst by the phase criterion,
/// plus per-target orderings L_s^n of {0, 1, 2}.
struct SegPreferenceSample {
  std::size_t source_index = 0;
  Phase phase = Phase::kLocalization;
  int instruction = 0;
  std::array<PerturbationRecord, 3> records;
  std::vector<std::array<int, 3>> orderings;
  std::size_t rounds = 0;

  std::size_t targets() const { return orderings.size(); }
  /// f^{n, i} and M^{n, i} views into the records.
  const Embedding& embedding(std::size_t n, std::size_t i) const {
    return records[i].embeddings[n];
  }
  const Mask& mask(std::size_t n, std::size_t i) const { return records[i].masks[n]; }
  /// Per-target phase criterion of record i.
  double target_criterion(std::size_t n, std::size_t i) const;
};

struct Skipped {
  std::size_t source_index = 0;
  std::size_t rounds = 0;
};

struct SegCollectConfig {
  std::size_t n_p = 30;
  std::size_t max_rounds = 20;
  std::size_t top_k = 5;
  double sigma = 0.25;
  double high_threshold = 0.8;
  double low_threshold = 0.0;
  std::optional<BandWidth> band;  // default_band_width when absent
};

using SegCollectResult = std::variant<SegPreferenceSample, Skipped>;

/// Ranks candidate indices by value descending, ties by lower index.
std::vector<std::size_t> rank_descending(const std::vector<double>& values);
/// Highest, median (lower-middle for even counts) and lowest of a ranking.
std::array<std::size_t, 3> pick_high_median_low(const std::vector<std::size_t>& ranked);

/// Builds the best/median/worst triple from one round of records.
/// Localization selects by s; Boundary ranks by s, keeps the top_k and
/// selects by boundary IoU among them.
SegPreferenceSample select_triple(std::vector<PerturbationRecord> round, Phase phase,
                                  std::size_t top_k);

/// Curriculum collection for one sample. Localization regenerates rounds of
/// n_p perturbations until min s < 0 and max s > 0.8 (or the round cap is
/// hit, giving Skipped); Boundary uses a single round.
SegCollectResult collect_seg_preference(const Sample& sample, const Segmenter& model,
                                        const std::vector<Mask>& sam, Phase phase,
                                        const SegCollectConfig& config,
                                        std::uint64_t seed,
                                        std::size_t source_index = 0);

/// Token positions not on a longest common subsequence of a and b.
std::pair<IndexList, IndexList> diff_indices(const TokenSeq& a, const TokenSeq& b);

/// Stand-in for the external corrector: works at object-token granularity.
class CorruptionOracle {
 public:
  virtual ~CorruptionOracle() = default;
  /// Replaces wrong object tokens of y with the ground-truth objects.
  virtual TokenSeq correct(const TokenSeq& y, const TokenSeq& y_g) const = 0;
  /// Injects a small number of object errors into the ground truth.
  virtual TokenSeq corrupt(const TokenSeq& y_g, Rng& rng) const = 0;
};

class SyntheticCorruptionOracle : public CorruptionOracle {
 public:
  SyntheticCorruptionOracle(int object_classes, int max_substitutions = 1);
  TokenSeq correct(const TokenSeq& y, const TokenSeq& y_g) const override;
  TokenSeq corrupt(const TokenSeq& y_g, Rng& rng) const override;

 private:
  int object_classes_;
  int max_substitutions_;
};

enum class TextPath { kCorrection, kErrorInjection };

struct TextPreferenceSample {
  std::size_t source_index = 0;
  Image image;
  int instruction = 0;
  TokenSeq y;
  TokenSeq y_c;
  IndexList l_y;
  IndexList l_yc;
  TextPath path = TextPath::kCorrection;
};

TextPreferenceSample collect_text_preference(const Sample& sample,
                                             const Segmenter& model,
                                             const CorruptionOracle& oracle,
                                             std::uint64_t seed,
                                             std::size_t source_index = 0);

/// A collected dataset: text pairs, one phase of segmentation triples, and
/// the indices of skipped samples.
struct PreferenceDataset {
  Phase phase = Phase::kLocalization;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::size_t input_count = 0;
  std::vector<TextPreferenceSample> text;
  std::vector<SegPreferenceSample> seg;
  std::vector<Skipped> skipped;
};

void save_dataset(const std::filesystem::path& dir, const PreferenceDataset& ds);
PreferenceDataset load_dataset(const std::filesystem::path& dir);

}  // namespace prefseg::collect
