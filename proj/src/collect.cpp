#include "prefseg/collect.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <tuple>

#include "prefseg/error.hpp"
#include "prefseg/io.hpp"

namespace prefseg::collect {

namespace fs = std::filesystem;

Image perturb_image(const Image& img, const NoiseSpec& spec) {
  const auto& r = spec.rect;
  if (r.top < 0 || r.left < 0 || r.height < 1 || r.width < 1 ||
      r.top + r.height > img.height() || r.left + r.width > img.width()) {
    throw GeometryError("noise rectangle outside the image");
  }
  if (!(spec.sigma >= 0.0)) throw GeometryError("noise sigma must be >= 0");
  Image out = img;
  if (spec.sigma == 0.0) return out;
  Rng rng(spec.seed);
  for (int row = r.top; row < r.top + r.height; ++row) {
    for (int col = r.left; col < r.left + r.width; ++col) {
      out.at(row, col) = std::clamp(out.at(row, col) + rng.normal(0.0, spec.sigma),
                                    0.0, 1.0);
    }
  }
  return out;
}

NoiseSpec sample_noise_spec(int height, int width, double sigma, Rng& rng) {
  auto extent = [&rng](int dim) {
    const int lo = std::max(1, (dim + 3) / 4);
    const int hi = std::max(lo, (3 * dim) / 4);
    return rng.uniform_int(lo, hi);
  };
  NoiseSpec spec;
  spec.sigma = sigma;
  spec.rect.height = extent(height);
  spec.rect.width = extent(width);
  spec.rect.top = rng.uniform_int(0, height - spec.rect.height);
  spec.rect.left = rng.uniform_int(0, width - spec.rect.width);
  spec.seed = rng.next_u64();
  return spec;
}

std::vector<double> target_localization_scores(const std::vector<Mask>& pred,
                                               const std::vector<Mask>& gt,
                                               const std::vector<Mask>& sam) {
  if (pred.size() != gt.size() || pred.empty()) {
    throw ShapeError("localization_score: need |pred| = |gt| >= 1");
  }
  std::vector<double> out;
  for (std::size_t n = 0; n < pred.size(); ++n) {
    double wrong = 0.0;
    for (const auto& s : sam) {
      if (iou(s, gt[n]) > 0.5) continue;  // corresponds to the target
      wrong = std::max(wrong, iou(pred[n], s));
    }
    out.push_back(iou(pred[n], gt[n]) - wrong);
  }
  return out;
}

double localization_score(const std::vector<Mask>& pred, const std::vector<Mask>& gt,
                          const std::vector<Mask>& sam) {
  const auto t = target_localization_scores(pred, gt, sam);
  return std::accumulate(t.begin(), t.end(), 0.0) / static_cast<double>(t.size());
}

std::vector<double> target_boundary_ious(const std::vector<Mask>& pred,
                                         const std::vector<Mask>& gt, BandWidth w) {
  if (pred.size() != gt.size()) throw ShapeError("boundary IoU: target count mismatch");
  std::vector<double> out;
  for (std::size_t n = 0; n < pred.size(); ++n) out.push_back(boundary_iou(pred[n], gt[n], w));
  return out;
}

const char* phase_name(Phase p) {
  return p == Phase::kLocalization ? "localization" : "boundary";
}

Phase phase_from_name(const std::string& name) {
  if (name == "localization") return Phase::kLocalization;
  if (name == "boundary") return Phase::kBoundary;
  throw ConfigError("unknown phase '" + name + "' (expected localization|boundary)");
}

double SegPreferenceSample::target_criterion(std::size_t n, std::size_t i) const {
  return phase == Phase::kLocalization ? records[i].target_s[n] : records[i].target_b[n];
}

std::vector<std::size_t> rank_descending(const std::vector<double>& values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return values[a] > values[b];
  });
  return idx;
}

std::array<std::size_t, 3> pick_high_median_low(const std::vector<std::size_t>& ranked) {
  if (ranked.size() < 3) throw ShapeError("need at least three candidates");
  // Ranked best-first; the lower-middle element of an even set sits at n/2.
  return {ranked.front(), ranked[ranked.size() / 2], ranked.back()};
}

SegPreferenceSample select_triple(std::vector<PerturbationRecord> round, Phase phase,
                                  std::size_t top_k) {
  std::vector<double> s;
  for (const auto& r : round) s.push_back(r.score_s);
  std::vector<std::size_t> ranked = rank_descending(s);
  std::array<std::size_t, 3> pick{};
  if (phase == Phase::kLocalization) {
    pick = pick_high_median_low(ranked);
  } else {
    ranked.resize(std::min(std::max<std::size_t>(top_k, 3), ranked.size()));
    // Preserve perturbation-index order among the kept set for tie-breaking.
    std::vector<std::size_t> kept = ranked;
    std::sort(kept.begin(), kept.end());
    std::vector<double> b;
    for (std::size_t i : kept) b.push_back(round[i].boundary_iou_b);
    const auto by_b = rank_descending(b);
    const auto local = pick_high_median_low(by_b);
    pick = {kept[local[0]], kept[local[1]], kept[local[2]]};
  }
  SegPreferenceSample out;
  out.phase = phase;
  for (std::size_t slot = 0; slot < 3; ++slot) out.records[slot] = round[pick[slot]];
  const std::size_t n_targets = out.records[0].masks.size();
  for (std::size_t n = 0; n < n_targets; ++n) {
    std::vector<double> crit;
    for (std::size_t i = 0; i < 3; ++i) crit.push_back(out.target_criterion(n, i));
    const auto order = rank_descending(crit);
    out.orderings.push_back({static_cast<int>(order[0]), static_cast<int>(order[1]),
                             static_cast<int>(order[2])});
  }
  return out;
}

namespace {

std::vector<PerturbationRecord> run_round(const Sample& sample, const Segmenter& model,
                                          const std::vector<Mask>& sam,
                                          const SegCollectConfig& config, BandWidth band,
                                          std::uint64_t round_seed) {
  std::vector<PerturbationRecord> round(config.n_p);
  // Each evaluation is a pure function of (image, instruction); order-free.
  for (std::size_t i = 0; i < config.n_p; ++i) {
    Rng rng(derive_seed(round_seed, "perturbation", i));
    auto& rec = round[i];
    rec.index = i;
    rec.noise = sample_noise_spec(sample.image.height(), sample.image.width(),
                                  config.sigma, rng);
    rec.image = perturb_image(sample.image, rec.noise);
    auto out = model.run(rec.image, sample.instruction, std::nullopt);
    rec.tokens = std::move(out.response.tokens);
    rec.embeddings = std::move(out.response.embeddings);
    rec.masks = std::move(out.masks);
    if (rec.masks.size() != sample.gt_masks.size() ||
        rec.embeddings.size() != sample.gt_masks.size()) {
      throw ShapeError("segmenter produced " + std::to_string(rec.masks.size()) +
                       " masks for " + std::to_string(sample.gt_masks.size()) +
                       " targets");
    }
    rec.target_s = target_localization_scores(rec.masks, sample.gt_masks, sam);
    rec.target_b = target_boundary_ious(rec.masks, sample.gt_masks, band);
    rec.score_s = std::accumulate(rec.target_s.begin(), rec.target_s.end(), 0.0) /
                  static_cast<double>(rec.target_s.size());
    rec.boundary_iou_b = std::accumulate(rec.target_b.begin(), rec.target_b.end(), 0.0) /
                         static_cast<double>(rec.target_b.size());
  }
  return round;
}

}  // namespace

SegCollectResult collect_seg_preference(const Sample& sample, const Segmenter& model,
                                        const std::vector<Mask>& sam, Phase phase,
                                        const SegCollectConfig& config,
                                        std::uint64_t seed, std::size_t source_index) {
  if (config.n_p < 3) throw ConfigError("n_p must be >= 3");
  if (config.max_rounds < 1) throw ConfigError("max_rounds must be >= 1");
  sample.validate();
  const BandWidth band =
      config.band.value_or(default_band_width(sample.image.height(), sample.image.width()));
  const std::size_t rounds = phase == Phase::kLocalization ? config.max_rounds : 1;
  for (std::size_t r = 0; r < rounds; ++r) {
    auto round = run_round(sample, model, sam, config, band, derive_seed(seed, "round", r));
    if (phase == Phase::kLocalization) {
      double lo = round.front().score_s;
      double hi = lo;
      for (const auto& rec : round) {
        lo = std::min(lo, rec.score_s);
        hi = std::max(hi, rec.score_s);
      }
      if (!(lo < config.low_threshold && hi > config.high_threshold)) continue;
    }
    auto out = select_triple(std::move(round), phase, config.top_k);
    out.source_index = source_index;
    out.instruction = sample.instruction;
    out.rounds = r + 1;
    return out;
  }
  return Skipped{source_index, rounds};
}

std::pair<IndexList, IndexList> diff_indices(const TokenSeq& a, const TokenSeq& b) {
  const std::size_t n = a.size();
  const std::size_t m = b.size();
  // lcs[i][j] = LCS length of a[i..] and b[j..]
  std::vector<std::vector<std::size_t>> lcs(n + 1, std::vector<std::size_t>(m + 1, 0));
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t j = m; j-- > 0;) {
      lcs[i][j] = a[i] == b[j] ? lcs[i + 1][j + 1] + 1
                               : std::max(lcs[i + 1][j], lcs[i][j + 1]);
    }
  }
  IndexList la;
  IndexList lb;
  std::size_t i = 0;
  std::size_t j = 0;
  while (i < n && j < m) {
    if (a[i] == b[j]) {
      ++i;
      ++j;
    } else if (lcs[i + 1][j] >= lcs[i][j + 1]) {
      la.push_back(i++);
    } else {
      lb.push_back(j++);
    }
  }
  for (; i < n; ++i) la.push_back(i);
  for (; j < m; ++j) lb.push_back(j);
  return {la, lb};
}

SyntheticCorruptionOracle::SyntheticCorruptionOracle(int object_classes,
                                                     int max_substitutions)
    : object_classes_(object_classes), max_substitutions_(max_substitutions) {
  if (object_classes < 2 || object_classes > vocab::kMaxObjectClasses) {
    throw ConfigError("corruption oracle needs 2..60 object classes");
  }
  if (max_substitutions < 1) throw ConfigError("max_substitutions must be >= 1");
}

namespace {

std::vector<std::size_t> object_positions(const TokenSeq& t) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (vocab::is_object(t[i])) out.push_back(i);
  }
  return out;
}

}  // namespace

TokenSeq SyntheticCorruptionOracle::correct(const TokenSeq& y, const TokenSeq& y_g) const {
  const auto py = object_positions(y);
  const auto pg = object_positions(y_g);
  if (py.size() != pg.size() || y.size() != y_g.size()) return y_g;
  TokenSeq out = y;
  for (std::size_t n = 0; n < py.size(); ++n) {
    if (py[n] != pg[n]) return y_g;  // structure differs; fall back to a rewrite
    out[py[n]] = y_g[pg[n]];
  }
  return out;
}

TokenSeq SyntheticCorruptionOracle::corrupt(const TokenSeq& y_g, Rng& rng) const {
  auto positions = object_positions(y_g);
  if (positions.empty()) return y_g;
  std::set<TokenId> present(y_g.begin(), y_g.end());
  std::vector<TokenId> absent;
  for (int c = 0; c < object_classes_; ++c) {
    if (!present.contains(vocab::object_token(c))) absent.push_back(vocab::object_token(c));
  }
  TokenSeq out = y_g;
  const int subs = rng.uniform_int(1, std::min<int>(max_substitutions_,
                                                    static_cast<int>(positions.size())));
  for (int s = 0; s < subs; ++s) {
    const int pick = rng.uniform_int(s, static_cast<int>(positions.size()) - 1);
    std::swap(positions[s], positions[pick]);
    const std::size_t pos = positions[s];
    if (!absent.empty()) {
      out[pos] = absent[rng.uniform_int(0, static_cast<int>(absent.size()) - 1)];
    } else {
      const int shift = rng.uniform_int(1, object_classes_ - 1);
      out[pos] = vocab::object_token((vocab::object_class(y_g[pos]) + shift) % object_classes_);
    }
  }
  return out;
}

TextPreferenceSample collect_text_preference(const Sample& sample, const Segmenter& model,
                                             const CorruptionOracle& oracle,
                                             std::uint64_t seed,
                                             std::size_t source_index) {
  sample.validate();
  auto generated = model.run(sample.image, sample.instruction, derive_seed(seed, "decode"));
  TextPreferenceSample out;
  out.source_index = source_index;
  out.image = sample.image;
  out.instruction = sample.instruction;
  const auto objects = [](const TokenSeq& t) {
    std::set<TokenId> s;
    for (TokenId id : t) {
      if (vocab::is_object(id)) s.insert(id);
    }
    return s;
  };
  if (objects(generated.response.tokens) == objects(sample.gt_response)) {
    Rng rng(derive_seed(seed, "corrupt"));
    out.path = TextPath::kErrorInjection;
    out.y = oracle.corrupt(sample.gt_response, rng);
    out.y_c = sample.gt_response;
  } else {
    out.path = TextPath::kCorrection;
    out.y = std::move(generated.response.tokens);
    out.y_c = oracle.correct(out.y, sample.gt_response);
  }
  std::tie(out.l_y, out.l_yc) = diff_indices(out.y, out.y_c);
  return out;
}

// ---- persistence ---------------------------------------------------------

namespace {

nlohmann::json noise_to_json(const NoiseSpec& n) {
  return {{"rect", {n.rect.top, n.rect.left, n.rect.height, n.rect.width}},
          {"sigma", n.sigma},
          {"seed", n.seed}};
}

NoiseSpec noise_from_json(const nlohmann::json& doc) {
  NoiseSpec n;
  const auto r = doc.at("rect").get<std::vector<int>>();
  n.rect = {r.at(0), r.at(1), r.at(2), r.at(3)};
  n.sigma = doc.at("sigma").get<double>();
  n.seed = doc.at("seed").get<std::uint64_t>();
  return n;
}

std::string seg_stem(std::size_t i) { return "seg_" + io::padded(i); }
std::string text_stem(std::size_t i) { return "text_" + io::padded(i); }

void save_seg(const fs::path& dir, std::size_t i, const SegPreferenceSample& s) {
  nlohmann::json doc;
  doc["source_index"] = s.source_index;
  doc["phase"] = phase_name(s.phase);
  doc["instruction"] = s.instruction;
  doc["rounds"] = s.rounds;
  doc["orderings"] = s.orderings;
  const std::string stem = seg_stem(i);
  for (std::size_t r = 0; r < 3; ++r) {
    const auto& rec = s.records[r];
    nlohmann::json rj;
    rj["index"] = rec.index;
    rj["noise"] = noise_to_json(rec.noise);
    rj["image"] = io::image_to_json(rec.image);
    rj["tokens"] = rec.tokens;
    rj["score_s"] = rec.score_s;
    rj["boundary_iou_b"] = rec.boundary_iou_b;
    rj["target_s"] = rec.target_s;
    rj["target_b"] = rec.target_b;
    rj["embeddings"] = nlohmann::json::array();
    for (const auto& e : rec.embeddings) rj["embeddings"].push_back(io::embedding_to_json(e));
    rj["targets"] = rec.masks.size();
    for (std::size_t n = 0; n < rec.masks.size(); ++n) {
      io::write_mask_file(dir / (stem + "_r" + std::to_string(r) + "_t" +
                                 std::to_string(n) + ".mask"),
                          rec.masks[n]);
    }
    doc["records"].push_back(rj);
  }
  io::write_json(dir / (stem + ".json"), doc);
}

SegPreferenceSample load_seg(const fs::path& dir, std::size_t i) {
  const std::string stem = seg_stem(i);
  const auto doc = io::read_json(dir / (stem + ".json"));
  SegPreferenceSample s;
  s.source_index = doc.at("source_index").get<std::size_t>();
  s.phase = phase_from_name(doc.at("phase").get<std::string>());
  s.instruction = doc.at("instruction").get<int>();
  s.rounds = doc.at("rounds").get<std::size_t>();
  s.orderings = doc.at("orderings").get<std::vector<std::array<int, 3>>>();
  for (std::size_t r = 0; r < 3; ++r) {
    const auto& rj = doc.at("records").at(r);
    auto& rec = s.records[r];
    rec.index = rj.at("index").get<std::size_t>();
    rec.noise = noise_from_json(rj.at("noise"));
    rec.image = io::image_from_json(rj.at("image"));
    rec.tokens = rj.at("tokens").get<TokenSeq>();
    rec.score_s = rj.at("score_s").get<double>();
    rec.boundary_iou_b = rj.at("boundary_iou_b").get<double>();
    rec.target_s = rj.at("target_s").get<std::vector<double>>();
    rec.target_b = rj.at("target_b").get<std::vector<double>>();
    for (const auto& e : rj.at("embeddings")) rec.embeddings.push_back(io::embedding_from_json(e));
    const auto targets = rj.at("targets").get<std::size_t>();
    for (std::size_t n = 0; n < targets; ++n) {
      rec.masks.push_back(io::read_mask_file(
          dir / (stem + "_r" + std::to_string(r) + "_t" + std::to_string(n) + ".mask")));
    }
  }
  return s;
}

}  // namespace

void save_dataset(const fs::path& dir, const PreferenceDataset& ds) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());
  nlohmann::json manifest;
  manifest["phase"] = phase_name(ds.phase);
  manifest["seed"] = ds.seed;
  manifest["config_hash"] = ds.config_hash;
  manifest["input_count"] = ds.input_count;
  manifest["text_count"] = ds.text.size();
  manifest["seg_count"] = ds.seg.size();
  manifest["skipped"] = nlohmann::json::array();
  for (const auto& s : ds.skipped) {
    manifest["skipped"].push_back({{"source_index", s.source_index}, {"rounds", s.rounds}});
  }
  for (std::size_t i = 0; i < ds.text.size(); ++i) {
    const auto& t = ds.text[i];
    io::write_json(dir / (text_stem(i) + ".json"),
                   {{"source_index", t.source_index},
                    {"instruction", t.instruction},
                    {"image", io::image_to_json(t.image)},
                    {"y", t.y},
                    {"y_c", t.y_c},
                    {"l_y", t.l_y},
                    {"l_yc", t.l_yc},
                    {"path", t.path == TextPath::kCorrection ? "correction" : "injection"}});
  }
  for (std::size_t i = 0; i < ds.seg.size(); ++i) save_seg(dir, i, ds.seg[i]);
  io::write_json(dir / "manifest.json", manifest);
}

PreferenceDataset load_dataset(const fs::path& dir) {
  const auto manifest = io::read_json(dir / "manifest.json");
  PreferenceDataset ds;
  ds.phase = phase_from_name(manifest.at("phase").get<std::string>());
  ds.seed = manifest.at("seed").get<std::uint64_t>();
  ds.config_hash = manifest.at("config_hash").get<std::string>();
  ds.input_count = manifest.at("input_count").get<std::size_t>();
  for (const auto& s : manifest.at("skipped")) {
    ds.skipped.push_back({s.at("source_index").get<std::size_t>(),
                          s.at("rounds").get<std::size_t>()});
  }
  const auto text_count = manifest.at("text_count").get<std::size_t>();
  for (std::size_t i = 0; i < text_count; ++i) {
    const auto doc = io::read_json(dir / (text_stem(i) + ".json"));
    TextPreferenceSample t;
    t.source_index = doc.at("source_index").get<std::size_t>();
    t.instruction = doc.at("instruction").get<int>();
    t.image = io::image_from_json(doc.at("image"));
    t.y = doc.at("y").get<TokenSeq>();
    t.y_c = doc.at("y_c").get<TokenSeq>();
    t.l_y = doc.at("l_y").get<IndexList>();
    t.l_yc = doc.at("l_yc").get<IndexList>();
    t.path = doc.at("path").get<std::string>() == "correction" ? TextPath::kCorrection
                                                               : TextPath::kErrorInjection;
    ds.text.push_back(std::move(t));
  }
  const auto seg_count = manifest.at("seg_count").get<std::size_t>();
  for (std::size_t i = 0; i < seg_count; ++i) ds.seg.push_back(load_seg(dir, i));
  return ds;
}

}  // namespace prefseg::collect
