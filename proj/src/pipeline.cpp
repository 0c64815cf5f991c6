#include "prefseg/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <iostream>
#include <sstream>

#include "prefseg/checkpoint.hpp"
#include "prefseg/ensemble.hpp"
#include "prefseg/error.hpp"
#include "prefseg/io.hpp"
#include "prefseg/rng.hpp"

namespace prefseg::pipeline {

namespace fs = std::filesystem;
using toy::Stage;

void RunConfig::validate() const {
  if (train_samples < 1 || val_samples < 1) throw ConfigError("sample counts must be >= 1");
  model.validate();
  scene.validate(model);
  hyper.validate();
  train.validate();
  if (k < 1) throw ConfigError("k must be >= 1");
  if (collect.n_p < 3) throw ConfigError("n_p must be >= 3");
  if (collect.max_rounds < 1 || collect.top_k < 3) {
    throw ConfigError("max_rounds must be >= 1 and top_k >= 3");
  }
  if (collect.top_k > collect.n_p) throw ConfigError("top_k must not exceed n_p");
  if (!(collect.sigma > 0)) throw ConfigError("noise sigma must be > 0");
  if (sft_steps < 1 || preference_steps < 1 || ensemble_steps < 1) {
    throw ConfigError("stage step counts must be >= 1");
  }
}

nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json doc;
  doc["seed"] = c.seed;
  doc["train_samples"] = c.train_samples;
  doc["val_samples"] = c.val_samples;
  doc["model"] = c.model.to_json();
  doc["scene"] = c.scene.to_json();
  doc["hyper"] = {{"beta_t", c.hyper.beta_t},
                  {"beta_s", c.hyper.beta_s},
                  {"lambda", c.hyper.lambda},
                  {"improvement_scale", c.hyper.improvement_scale}};
  doc["collect"] = {{"n_p", c.collect.n_p},
                    {"max_rounds", c.collect.max_rounds},
                    {"top_k", c.collect.top_k},
                    {"sigma", c.collect.sigma},
                    {"high_threshold", c.collect.high_threshold},
                    {"low_threshold", c.collect.low_threshold},
                    {"band_width", c.collect.band ? c.collect.band->w : 0}};
  doc["k"] = c.k;
  doc["steps"] = {{"sft", c.sft_steps},
                  {"preference", c.preference_steps},
                  {"ensemble", c.ensemble_steps}};
  auto train = c.train.to_json();
  train.erase("seed");
  doc["train"] = train;
  doc["curriculum"] = c.curriculum;
  return doc;
}

namespace {

// Rejects keys the reference document does not know, so typos fail loudly.
void check_keys(const nlohmann::json& doc, const nlohmann::json& reference,
                const std::string& where) {
  if (!doc.is_object()) throw ConfigError("run config " + where + " must be an object");
  for (const auto& [key, value] : doc.items()) {
    if (where.empty() && (key == "out_dir" || key == "config_hash")) continue;
    if (!reference.contains(key)) {
      throw ConfigError("unknown run config key '" + where + key + "'");
    }
    if (reference.at(key).is_object()) check_keys(value, reference.at(key), where + key + ".");
  }
}

}  // namespace

RunConfig config_from_json(const nlohmann::json& doc, RunConfig c) {
  check_keys(doc, config_to_json(c), "");
  try {
    c.seed = doc.value("seed", c.seed);
    c.train_samples = doc.value("train_samples", c.train_samples);
    c.val_samples = doc.value("val_samples", c.val_samples);
    if (doc.contains("model")) {
      auto merged = c.model.to_json();
      merged.update(doc.at("model"));
      c.model = toy::ModelConfig::from_json(merged);
    }
    if (doc.contains("scene")) {
      auto merged = c.scene.to_json();
      merged.update(doc.at("scene"));
      c.scene = toy::SceneConfig::from_json(merged);
    }
    if (doc.contains("hyper")) {
      const auto& h = doc.at("hyper");
      c.hyper.beta_t = h.value("beta_t", c.hyper.beta_t);
      c.hyper.beta_s = h.value("beta_s", c.hyper.beta_s);
      c.hyper.lambda = h.value("lambda", c.hyper.lambda);
      c.hyper.improvement_scale = h.value("improvement_scale", c.hyper.improvement_scale);
    }
    if (doc.contains("collect")) {
      const auto& h = doc.at("collect");
      c.collect.n_p = h.value("n_p", c.collect.n_p);
      c.collect.max_rounds = h.value("max_rounds", c.collect.max_rounds);
      c.collect.top_k = h.value("top_k", c.collect.top_k);
      c.collect.sigma = h.value("sigma", c.collect.sigma);
      c.collect.high_threshold = h.value("high_threshold", c.collect.high_threshold);
      c.collect.low_threshold = h.value("low_threshold", c.collect.low_threshold);
      const int band = h.value("band_width", c.collect.band ? c.collect.band->w : 0);
      c.collect.band.reset();
      if (band > 0) c.collect.band.emplace(band);
    }
    c.k = doc.value("k", c.k);
    if (doc.contains("steps")) {
      const auto& s = doc.at("steps");
      c.sft_steps = s.value("sft", c.sft_steps);
      c.preference_steps = s.value("preference", c.preference_steps);
      c.ensemble_steps = s.value("ensemble", c.ensemble_steps);
    }
    if (doc.contains("train")) {
      auto merged = c.train.to_json();
      merged.update(doc.at("train"));
      c.train = toy::TrainOptions::from_json(merged);
    }
    c.curriculum = doc.value("curriculum", c.curriculum);
    if (doc.contains("out_dir")) c.out_dir = doc.at("out_dir").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
  return c;
}

std::string config_hash(const RunConfig& cfg) {
  const std::string canonical = config_to_json(cfg).dump();
  return toy::hex64(fnv1a64(canonical.data(), canonical.size()));
}

fs::path Layout::collection(collect::Phase p) const {
  return root / "collect" / collect::phase_name(p);
}

fs::path Layout::checkpoint(Stage s) const { return root / "ckpt" / toy::stage_name(s); }

fs::path Layout::trace(Stage s) const {
  return root / "traces" / (std::string(toy::stage_name(s)) + ".csv");
}

RunManifest RunManifest::load_or_create(const fs::path& root) {
  RunManifest m;
  m.root_ = root;
  const fs::path file = root / "manifest.json";
  if (fs::exists(file)) {
    const auto doc = io::read_json(file);
    for (const auto& e : doc.at("entries")) {
      ManifestEntry entry;
      entry.command = e.at("command").get<std::string>();
      entry.detail = e.at("detail").get<std::string>();
      entry.config_hash = e.at("config_hash").get<std::string>();
      entry.files = e.at("files").get<std::vector<std::string>>();
      entry.seconds = e.at("seconds").get<double>();
      m.entries_.push_back(std::move(entry));
    }
  }
  return m;
}

void RunManifest::append(ManifestEntry entry) {
  for (const auto& f : entry.files) {
    if (!fs::exists(root_ / f)) throw IoError("manifest entry references missing file " + f);
  }
  entries_.push_back(std::move(entry));
  save();
}

void RunManifest::save() const {
  nlohmann::json doc;
  doc["entries"] = nlohmann::json::array();
  for (const auto& e : entries_) {
    doc["entries"].push_back({{"command", e.command},
                              {"detail", e.detail},
                              {"config_hash", e.config_hash},
                              {"files", e.files},
                              {"seconds", e.seconds}});
  }
  io::write_json(root_ / "manifest.json", doc);
}

namespace {

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string rel(const Layout& l, const fs::path& p) {
  return fs::relative(p, l.root).generic_string();
}

/// Writes config.json the first time and refuses to mix configs in one
/// output directory afterwards.
void stamp_config(const RunConfig& cfg, const Layout& l) {
  const auto hash = config_hash(cfg);
  if (fs::exists(l.config())) {
    const auto doc = io::read_json(l.config());
    if (doc.value("config_hash", std::string()) != hash) {
      throw ConfigError("output directory " + l.root.string() +
                        " belongs to a run with a different config");
    }
    return;
  }
  nlohmann::json doc;
  doc["config"] = config_to_json(cfg);
  doc["config_hash"] = hash;
  io::write_json(l.config(), doc);
}

toy::Checkpoint require_checkpoint(const RunConfig& cfg, const Layout& l, Stage s,
                                   const std::string& needed_by) {
  const auto dir = l.checkpoint(s);
  if (!fs::exists(dir / "manifest.json")) {
    throw ConfigError(needed_by + " needs the " + toy::stage_name(s) + " checkpoint at " +
                      dir.string());
  }
  auto ckpt = toy::load_checkpoint(dir);
  if (ckpt.meta.config_hash != config_hash(cfg)) {
    throw ConfigError("checkpoint " + dir.string() + " was produced by a different config");
  }
  if (ckpt.meta.stage != toy::stage_name(s)) {
    throw ConfigError("checkpoint " + dir.string() + " records stage " + ckpt.meta.stage);
  }
  return ckpt;
}

std::vector<Sample> require_split(const Layout& l, const std::string& name) {
  const auto dir = l.split(name);
  if (!fs::exists(dir / "index.json")) {
    throw ConfigError("missing " + name + " split at " + dir.string() + " (run synth first)");
  }
  return load_split(dir);
}

}  // namespace

void save_split(const fs::path& dir, const std::vector<Sample>& samples) {
  nlohmann::json index;
  index["count"] = samples.size();
  index["stems"] = nlohmann::json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string stem = "sample_" + io::padded(i);
    io::save_sample(dir, stem, samples[i]);
    index["stems"].push_back(stem);
  }
  io::write_json(dir / "index.json", index);
}

std::vector<Sample> load_split(const fs::path& dir) {
  const auto index = io::read_json(dir / "index.json");
  std::vector<Sample> out;
  for (const auto& stem : index.at("stems")) out.push_back(io::load_sample(dir, stem.get<std::string>()));
  if (out.size() != index.at("count").get<std::size_t>()) {
    throw IoError("split " + dir.string() + " has the wrong sample count");
  }
  return out;
}

void cmd_synth(const RunConfig& cfg) {
  cfg.validate();
  Timer timer;
  const Layout l{cfg.out_dir};
  stamp_config(cfg, l);
  const auto train = toy::synth_dataset(cfg.model, cfg.scene, cfg.train_samples,
                                        derive_seed(cfg.seed, "dataset", 0));
  const auto val = toy::synth_dataset(cfg.model, cfg.scene, cfg.val_samples,
                                      derive_seed(cfg.seed, "dataset", 1));
  save_split(l.split("train"), train);
  save_split(l.split("val"), val);
  RunManifest::load_or_create(l.root).append(
      {"synth", "train=" + std::to_string(train.size()) + " val=" + std::to_string(val.size()),
       config_hash(cfg),
       {rel(l, l.config()), rel(l, l.split("train") / "index.json"),
        rel(l, l.split("val") / "index.json")},
       timer.seconds()});
}

collect::PreferenceDataset cmd_collect(const RunConfig& cfg, collect::Phase phase) {
  cfg.validate();
  Timer timer;
  const Layout l{cfg.out_dir};
  stamp_config(cfg, l);
  const auto ckpt = require_checkpoint(cfg, l, Stage::kSft, "collect");
  const toy::ToyModel model(ckpt.config, ckpt.params);
  const auto train = require_split(l, "train");
  const collect::SyntheticCorruptionOracle oracle(cfg.model.classes);

  collect::PreferenceDataset ds;
  ds.phase = phase;
  ds.seed = derive_seed(cfg.seed, "collect", static_cast<std::uint64_t>(phase));
  ds.config_hash = config_hash(cfg);
  ds.input_count = train.size();
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto& s = train[i];
    ds.text.push_back(collect::collect_text_preference(
        s, model, oracle, derive_seed(cfg.seed, "collect-text", i), i));
    auto res = collect::collect_seg_preference(s, model, s.object_masks, phase, cfg.collect,
                                               derive_seed(ds.seed, "sample", i), i);
    if (auto* seg = std::get_if<collect::SegPreferenceSample>(&res)) {
      ds.seg.push_back(std::move(*seg));
    } else {
      ds.skipped.push_back(std::get<collect::Skipped>(res));
    }
  }
  const auto dir = l.collection(phase);
  collect::save_dataset(dir, ds);
  std::ostringstream skip;
  skip << "source_index,rounds\n";
  for (const auto& s : ds.skipped) skip << s.source_index << ',' << s.rounds << '\n';
  io::write_text(dir / "skip_log.csv", skip.str());
  RunManifest::load_or_create(l.root).append(
      {"collect",
       std::string(collect::phase_name(phase)) + " emitted=" + std::to_string(ds.seg.size()) +
           " skipped=" + std::to_string(ds.skipped.size()),
       ds.config_hash,
       {rel(l, dir / "manifest.json"), rel(l, dir / "skip_log.csv")},
       timer.seconds()});
  return ds;
}

std::vector<toy::LossRow> cmd_train(const RunConfig& cfg, Stage stage) {
  cfg.validate();
  Timer timer;
  const Layout l{cfg.out_dir};
  stamp_config(cfg, l);
  const auto hash = config_hash(cfg);
  const auto train = require_split(l, "train");
  toy::TrainOptions opt = cfg.train;
  opt.seed = derive_seed(cfg.seed, "train", static_cast<std::uint64_t>(stage));

  std::vector<toy::LossRow> trace;
  toy::Checkpoint out;
  out.meta.config_hash = hash;
  out.meta.stage = toy::stage_name(stage);
  out.meta.seed = opt.seed;
  out.config = cfg.model;
  switch (stage) {
    case Stage::kSft: {
      toy::ToyModel model(cfg.model,
                          toy::ModelParams::init(cfg.model, derive_seed(cfg.seed, "init")));
      trace = toy::train_sft(model, train, cfg.sft_steps, opt);
      out.params = model.params();
      out.meta.step = cfg.sft_steps;
      break;
    }
    case Stage::kPreferenceFinetune: {
      const auto ckpt = require_checkpoint(cfg, l, Stage::kSft, "preference finetuning");
      toy::ToyModel model(ckpt.config, ckpt.params);
      const auto first_phase = collect::Phase::kLocalization;
      const auto second_phase =
          cfg.curriculum ? collect::Phase::kBoundary : collect::Phase::kLocalization;
      auto load = [&](collect::Phase p) {
        const auto dir = l.collection(p);
        if (!fs::exists(dir / "manifest.json")) {
          throw ConfigError(std::string("missing ") + collect::phase_name(p) +
                            "-phase preference data at " + dir.string());
        }
        auto ds = collect::load_dataset(dir);
        if (ds.config_hash != hash) {
          throw ConfigError("preference data at " + dir.string() +
                            " was produced by a different config");
        }
        return ds;
      };
      const auto first = load(first_phase);
      const auto second = cfg.curriculum ? load(second_phase) : first;
      toy::PreferenceInputs in;
      in.train = train;
      in.text = first.text;
      in.first_half = first.seg;
      in.second_half = second.seg;
      in.first_phase = first_phase;
      in.second_phase = second_phase;
      in.band = cfg.collect.band;
      trace = toy::preference_finetune(model, in, cfg.hyper, cfg.preference_steps, opt);
      out.params = model.params();
      out.meta.step = cfg.preference_steps;
      break;
    }
    case Stage::kEnsembleTrain: {
      const auto ckpt =
          require_checkpoint(cfg, l, Stage::kPreferenceFinetune, "ensemble training");
      toy::ToyModel model(ckpt.config, ckpt.params);
      trace = toy::ensemble_train(model, train, cfg.k, cfg.ensemble_steps, cfg.hyper, opt);
      out.params = model.params();
      out.meta.step = cfg.ensemble_steps;
      break;
    }
  }
  toy::save_checkpoint(l.checkpoint(stage), out);
  io::write_text(l.trace(stage), toy::loss_trace_csv(trace));
  RunManifest::load_or_create(l.root).append(
      {"train", toy::stage_name(stage), hash,
       {rel(l, l.checkpoint(stage) / "manifest.json"), rel(l, l.trace(stage))},
       timer.seconds()});
  return trace;
}

EvalResult evaluate(const toy::ToyModel& model, std::span<const Sample> samples,
                    bool ensemble, std::size_t k, std::uint64_t seed, bool pearson) {
  if (k < 1) throw ConfigError("k must be >= 1");
  EvalResult out;
  std::vector<metrics::MaskPair> pairs;
  std::vector<metrics::ChairInput> chair_inputs;
  const Eigen::MatrixXd& prompts = model.params()[toy::kPrompts];
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    TokenSeq tokens;
    std::vector<Mask> masks;
    std::vector<SegmenterOutput> sampled;
    if (ensemble || pearson) {
      sampled = toy::sample_responses(model, s.image, s.instruction, k,
                                      derive_seed(seed, "eval-responses", i));
    }
    if (ensemble) {
      std::vector<ScoredResponse> responses;
      for (const auto& o : sampled) responses.push_back(o.response);
      auto fr = ensemble::fuse_responses(s.image, s.instruction, responses, prompts, model);
      auto fe = ensemble::fuse_embeddings(s.image, s.instruction, responses, prompts,
                                          fr.tokens, model);
      tokens = fr.tokens;
      for (const auto& f : fe.embeddings) masks.push_back(model.decode_mask(s.image, f));
    } else {
      auto o = model.run(s.image, s.instruction, std::nullopt);
      tokens = o.response.tokens;
      masks = std::move(o.masks);
    }
    if (pearson) {
      std::vector<ScoredResponse> responses;
      for (const auto& o : sampled) responses.push_back(o.response);
      const auto eta = ensemble::sentence_preference_scores(responses);
      for (std::size_t r = 0; r < sampled.size(); ++r) {
        for (std::size_t n = 0; n < s.gt_masks.size(); ++n) {
          out.eta.push_back(eta[r][n]);
          out.eta_iou.push_back(iou(sampled[r].masks[n], s.gt_masks[n]));
        }
      }
    }
    if (masks.size() != s.gt_masks.size()) {
      throw StructureError("evaluation produced the wrong number of masks");
    }
    SampleRow row;
    row.index = i;
    row.instruction = s.instruction;
    row.targets = s.gt_masks.size();
    row.tokens = tokens;
    for (std::size_t n = 0; n < masks.size(); ++n) {
      pairs.push_back({masks[n], s.gt_masks[n]});
      row.mean_iou += iou(masks[n], s.gt_masks[n]) / static_cast<double>(masks.size());
    }
    metrics::ChairInput ci{metrics::mentioned_objects(tokens),
                           metrics::mentioned_objects(s.gt_response)};
    row.mentioned = ci.mentioned.size();
    for (int m : ci.mentioned) row.hallucinated += ci.ground_truth.contains(m) ? 0 : 1;
    chair_inputs.push_back(std::move(ci));
    out.rows.push_back(std::move(row));
  }
  const auto agg = metrics::aggregate_iou(pairs);
  const auto ch = metrics::chair(chair_inputs);
  out.report.giou = agg.giou;
  out.report.ciou = agg.ciou;
  out.report.c_s = ch.c_s;
  out.report.c_i = ch.c_i;
  out.report.responses = samples.size();
  out.report.targets = pairs.size();
  if (pearson) {
    try {
      out.report.pearson_r = metrics::pearson(out.eta, out.eta_iou);
    } catch (const NumericError&) {
      out.report.pearson_r.reset();
    }
  }
  metrics::validate(out.report);
  return out;
}

std::string eval_label(Stage stage, bool ensemble) {
  return std::string(toy::stage_name(stage)) + (ensemble ? "_fused" : "_plain");
}

metrics::MetricsReport cmd_eval(const RunConfig& cfg, Stage stage, bool ensemble,
                                bool pearson) {
  cfg.validate();
  Timer timer;
  const Layout l{cfg.out_dir};
  stamp_config(cfg, l);
  const auto ckpt = require_checkpoint(cfg, l, stage, "eval");
  const toy::ToyModel model(ckpt.config, ckpt.params);
  const auto val = require_split(l, "val");
  const auto result =
      evaluate(model, val, ensemble, cfg.k, derive_seed(cfg.seed, "eval"), pearson);
  const auto dir = l.eval(eval_label(stage, ensemble));
  auto doc = metrics::to_json(result.report);
  doc["config_hash"] = config_hash(cfg);
  doc["stage"] = toy::stage_name(stage);
  doc["ensemble"] = ensemble;
  doc["k"] = ensemble ? cfg.k : 1;
  io::write_json(dir / "report.json", doc);

  std::ostringstream csv;
  csv.precision(17);
  csv << "index,instruction,targets,mentioned,hallucinated,mean_iou,tokens\n";
  for (const auto& r : result.rows) {
    csv << r.index << ',' << r.instruction << ',' << r.targets << ',' << r.mentioned << ','
        << r.hallucinated << ',' << r.mean_iou << ',';
    for (std::size_t t = 0; t < r.tokens.size(); ++t) csv << (t ? " " : "") << r.tokens[t];
    csv << '\n';
  }
  io::write_text(dir / "per_sample.csv", csv.str());
  std::vector<std::string> files{rel(l, dir / "report.json"), rel(l, dir / "per_sample.csv")};
  if (pearson) {
    std::ostringstream pts;
    pts.precision(17);
    pts << "eta,iou\n";
    for (std::size_t i = 0; i < result.eta.size(); ++i) {
      pts << result.eta[i] << ',' << result.eta_iou[i] << '\n';
    }
    io::write_text(dir / "pearson_points.csv", pts.str());
    files.push_back(rel(l, dir / "pearson_points.csv"));
  }
  RunManifest::load_or_create(l.root).append(
      {"eval", eval_label(stage, ensemble), config_hash(cfg), files, timer.seconds()});
  return result.report;
}

nlohmann::json cmd_report(const RunConfig& cfg) {
  cfg.validate();
  Timer timer;
  const Layout l{cfg.out_dir};
  stamp_config(cfg, l);
  std::ostringstream metrics_csv;
  metrics_csv << metrics::csv_header() << '\n';
  std::ostringstream plot;
  plot.precision(17);
  plot << "stage_index,label,giou,ciou,c_s,c_i\n";
  nlohmann::json summary;
  summary["config_hash"] = config_hash(cfg);
  summary["reports"] = nlohmann::json::object();
  std::size_t stage_index = 0;
  for (Stage s : {Stage::kSft, Stage::kPreferenceFinetune, Stage::kEnsembleTrain}) {
    for (bool fused : {false, true}) {
      const auto label = eval_label(s, fused);
      const auto file = l.eval(label) / "report.json";
      if (!fs::exists(file)) continue;
      const auto doc = io::read_json(file);
      const auto report = metrics::report_from_json(doc);
      metrics_csv << metrics::csv_row(label, report) << '\n';
      plot << stage_index << ',' << label << ',' << report.giou << ',' << report.ciou << ','
           << report.c_s << ',';
      if (report.c_i) plot << *report.c_i;
      plot << '\n';
      summary["reports"][label] = metrics::to_json(report);
    }
    ++stage_index;
  }
  const auto dir = l.report();
  io::write_text(dir / "metrics.csv", metrics_csv.str());
  io::write_text(dir / "plot_data.csv", plot.str());
  io::write_json(dir / "summary.json", summary);
  RunManifest::load_or_create(l.root).append(
      {"report", "", config_hash(cfg),
       {rel(l, dir / "metrics.csv"), rel(l, dir / "plot_data.csv"),
        rel(l, dir / "summary.json")},
       timer.seconds()});
  return summary;
}

}  // namespace prefseg::pipeline
