// Acceptance suite: one PASS/FAIL line per criterion, exit code 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <variant>

#include "prefseg/checkpoint.hpp"
#include "prefseg/collect.hpp"
#include "prefseg/ensemble.hpp"
#include "prefseg/io.hpp"
#include "prefseg/losses.hpp"
#include "prefseg/mask.hpp"
#include "prefseg/metrics.hpp"
#include "prefseg/pipeline.hpp"
#include "support/files.hpp"
#include "support/oracles.hpp"
#include "support/rigged.hpp"

using namespace prefseg;
using toy::Stage;
using Clock = std::chrono::steady_clock;

namespace {

constexpr double kGradTol = 1e-4;
constexpr std::size_t kGradPoints = 100;
constexpr double kGradSeconds = 30.0;
constexpr double kLn2Tol = 1e-9;
constexpr double kOracleTol = 1e-12;
constexpr double kRowSumTol = 1e-9;
constexpr double kPipelineSeconds = 600.0;
constexpr double kGiouGain = 0.02;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream o;
  o.precision(precision);
  o << v;
  return o.str();
}

struct Verdict {
  bool pass = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail = "first failure: " + what + "; " + detail;
    pass = pass && ok;
  }
};

int failures = 0;

void report(int id, const std::string& title, const std::function<Verdict()>& body) {
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v.pass = false;
    v.detail = std::string("exception: ") + e.what();
  }
  if (!v.pass) ++failures;
  std::printf("%s  %d  %s | %s\n", v.pass ? "PASS" : "FAIL", id, title.c_str(), v.detail.c_str());
  std::fflush(stdout);
}

Verdict gradients() {
  Verdict v;
  const auto t0 = Clock::now();
  const auto results = pipeline::run_gradcheck(kGradPoints, 20240611, kGradTol);
  const double secs = seconds_since(t0);
  std::set<std::string> losses_seen;
  std::ostringstream d;
  for (const auto& r : results) {
    v.require(r.passed, r.name + " max rel err " + fmt(r.max_relative_error));
    if (r.name.find("model.") != 0) {
      losses_seen.insert(r.name);
      v.require(r.points >= kGradPoints, r.name + " has " + std::to_string(r.points) + " points");
    }
    d << r.name << ' ' << fmt(r.max_relative_error, 2) << " (" << r.points << ") ";
  }
  for (const char* name : {"text_dpo_loss", "seg_preference_loss", "text_improvement_loss",
                           "seg_improvement_loss"}) {
    v.require(losses_seen.count(name) == 1, std::string("missing ") + name);
  }
  v.require(secs < kGradSeconds, "runtime " + fmt(secs) + " s");
  v.detail += d.str() + "in " + fmt(secs, 3) + " s";
  return v;
}

Verdict zero_margin() {
  Verdict v;
  Rng rng(5);
  const losses::PreferenceHyper hyper;
  double worst_t = 0.0, worst_s = 0.0;
  for (int t = 0; t < 100; ++t) {
    std::vector<double> y(6), yc(6);
    for (auto& x : y) x = -3.0 * rng.uniform() - 0.01;
    for (auto& x : yc) x = -3.0 * rng.uniform() - 0.01;
    const auto lt = losses::text_dpo_loss(yc, y, yc, y, {0, 3}, {1, 5}, hyper);
    worst_t = std::max(worst_t, std::abs(lt.value - std::log(2.0)));
    Embedding best(8), mid(8), worst(8), pol(8);
    for (int i = 0; i < 8; ++i) {
      best[i] = rng.normal();
      mid[i] = rng.normal();
      worst[i] = rng.normal();
      pol[i] = rng.normal();
    }
    const auto ls = losses::seg_preference_loss(mid, best, mid, worst, true, hyper.beta_s);
    worst_s = std::max(worst_s, std::abs(ls.value - std::log(2.0)));
    const auto off = losses::seg_preference_loss(pol, best, mid, worst, false, hyper.beta_s);
    v.require(off.value == 0.0, "inactive indicator value " + fmt(off.value));
    for (const auto& g : off.gradients) v.require(g.isZero(0.0), "inactive indicator gradient");
  }
  v.require(worst_t <= kLn2Tol, "L_t deviates " + fmt(worst_t));
  v.require(worst_s <= kLn2Tol, "L_s deviates " + fmt(worst_s));
  v.detail += "|L_t - ln2| " + fmt(worst_t, 2) + ", |L_s - ln2| " + fmt(worst_s, 2) +
              ", inactive = 0 (100 instances)";
  return v;
}

// Wraps a segmenter and records the localization score of every call.
class RecordingSegmenter : public Segmenter {
 public:
  RecordingSegmenter(const Segmenter& inner, const Sample& s) : inner_(inner), sample_(s) {}
  SegmenterOutput run(const Image& img, int instruction,
                      std::optional<std::uint64_t> seed) const override {
    auto out = inner_.run(img, instruction, seed);
    scores.push_back(collect::localization_score(out.masks, sample_.gt_masks,
                                                 sample_.object_masks));
    return out;
  }
  mutable std::vector<double> scores;

 private:
  const Segmenter& inner_;
  const Sample& sample_;
};

void check_collection(Verdict& v, const Sample& s, const Segmenter& model,
                      const collect::SegCollectConfig& cfg, std::uint64_t seed,
                      std::size_t& calls, std::size_t& skipped) {
  for (auto phase : {collect::Phase::kLocalization, collect::Phase::kBoundary}) {
    RecordingSegmenter rec(model, s);
    const auto res = collect::collect_seg_preference(s, rec, s.object_masks, phase, cfg, seed);
    ++calls;
    if (const auto* sk = std::get_if<collect::Skipped>(&res)) {
      v.require(phase == collect::Phase::kLocalization, "boundary phase skipped");
      v.require(sk->rounds == cfg.max_rounds, "skip before the round cap");
      ++skipped;
      continue;
    }
    const auto& out = std::get<collect::SegPreferenceSample>(res);
    const auto& r = out.records;
    if (phase == collect::Phase::kLocalization) {
      v.require(r[0].score_s >= r[1].score_s && r[1].score_s >= r[2].score_s,
                "localization s not descending");
      v.require(r[0].score_s > cfg.high_threshold, "s[0] <= 0.8");
      v.require(r[2].score_s < cfg.low_threshold, "s[2] >= 0");
    } else {
      v.require(r[0].boundary_iou_b >= r[1].boundary_iou_b &&
                    r[1].boundary_iou_b >= r[2].boundary_iou_b,
                "boundary b not descending");
      v.require(rec.scores.size() == cfg.n_p, "boundary phase ran more than one round");
      const auto ranked = collect::rank_descending(rec.scores);
      for (const auto& x : r) {
        const auto pos = std::find(ranked.begin(), ranked.end(), x.index) - ranked.begin();
        v.require(static_cast<std::size_t>(pos) < cfg.top_k, "boundary pick outside top-5 by s");
        v.require(rec.scores[x.index] == x.score_s, "recorded s mismatch");
      }
    }
  }
}

Verdict curriculum() {
  Verdict v;
  std::size_t calls = 0, skipped = 0;
  // Rigged segmenter: 150 seeds, both phases.
  const auto sample = rigged::two_object_sample();
  const rigged::HashQualitySegmenter rigged_model(sample, 0.2, 0.8);
  collect::SegCollectConfig cfg;
  for (std::uint64_t seed = 0; seed < 150; ++seed) {
    check_collection(v, sample, rigged_model, cfg, seed, calls, skipped);
  }
  // Briefly trained toy model on synthetic samples, with a tight round cap
  // so skips occur.
  const toy::ModelConfig mc;
  const auto data = toy::synth_dataset(mc, toy::SceneConfig{}, 40, 99);
  toy::ToyModel model(mc, toy::ModelParams::init(mc, 12));
  toy::TrainOptions opt;
  opt.seed = 12;
  toy::train_sft(model, data, 150, opt);
  collect::SegCollectConfig tcfg;
  tcfg.max_rounds = 3;
  for (std::size_t i = 0; i < data.size(); ++i) {
    check_collection(v, data[i], model, tcfg, 500 + i, calls, skipped);
  }
  v.require(calls >= 200, "only " + std::to_string(calls) + " calls");
  v.detail += std::to_string(calls) + " seeded calls (rigged and toy), " +
              std::to_string(skipped) + " localization skips at the round cap";
  return v;
}

Verdict oracles() {
  Verdict v;
  Rng rng(77);
  double worst = 0.0;
  const int n = 150;
  for (int t = 0; t < n; ++t) {
    const int h = rng.uniform_int(1, 12), w = rng.uniform_int(1, 12);
    const Mask a = oracle::random_mask(rng, h, w, rng.uniform());
    const Mask b = oracle::random_mask(rng, h, w, rng.uniform());
    const int bw = rng.uniform_int(1, 4);
    worst = std::max(worst, std::abs(iou(a, b) - oracle::iou(a, b)));
    worst = std::max(worst, std::abs(boundary_iou(a, b, BandWidth(bw)) -
                                     oracle::boundary_iou(a, b, bw)));
    v.require(boundary_iou(a, b, BandWidth(std::max(h, w))) == iou(a, b),
              "boundary iou differs from iou at saturation");
    v.require(boundary_iou(a, b, BandWidth(std::max(h, w) + 3)) == iou(a, b),
              "boundary iou differs from iou beyond saturation");

    std::vector<metrics::ChairInput> rs;
    std::vector<std::pair<std::set<int>, std::set<int>>> plain;
    for (int i = rng.uniform_int(1, 8); i > 0; --i) {
      metrics::ChairInput r;
      for (int o = 0; o < 10; ++o) {
        if (rng.uniform() < 0.3) r.mentioned.insert(o);
        if (rng.uniform() < 0.5) r.ground_truth.insert(o);
      }
      plain.emplace_back(r.mentioned, r.ground_truth);
      rs.push_back(r);
    }
    const auto c = metrics::chair(rs);
    const auto co = oracle::chair(plain);
    worst = std::max(worst, std::abs(c.c_s - co.c_s));
    v.require(c.c_i.has_value() == co.has_c_i, "C_I definedness");
    if (co.has_c_i) worst = std::max(worst, std::abs(*c.c_i - co.c_i));

    std::vector<double> x, y;
    for (int i = rng.uniform_int(2, 30); i > 0; --i) {
      x.push_back(rng.normal());
      y.push_back(0.3 * x.back() + rng.normal());
    }
    worst = std::max(worst, std::abs(metrics::pearson(x, y) - oracle::pearson(x, y)));

    std::vector<metrics::MaskPair> pairs;
    std::vector<std::pair<Mask, Mask>> mp;
    for (int i = rng.uniform_int(1, 6); i > 0; --i) {
      const Mask p = oracle::random_mask(rng, h, w, 0.4), g = oracle::random_mask(rng, h, w, 0.4);
      pairs.push_back({p, g});
      mp.emplace_back(p, g);
    }
    const auto agg = metrics::aggregate_iou(pairs);
    const auto ao = oracle::aggregate_iou(mp);
    worst = std::max(worst, std::abs(agg.giou - ao.first));
    worst = std::max(worst, std::abs(agg.ciou - ao.second));
  }
  v.require(worst <= kOracleTol, "max deviation " + fmt(worst));
  v.detail += std::to_string(n) + " instances per metric, max deviation " + fmt(worst, 2) +
              ", saturation exact";
  return v;
}

Verdict attention_bias() {
  Verdict v;
  Rng rng(13);
  double worst_sum = 0.0;
  for (int t = 0; t < 50; ++t) {
    const int nq = rng.uniform_int(1, 6), nk = rng.uniform_int(2, 12), d = rng.uniform_int(1, 8);
    Eigen::MatrixXd q(nq, d), k(nk, d), val(nk, 4);
    for (auto* m : {&q, &k, &val})
      for (Eigen::Index i = 0; i < m->size(); ++i) (*m)(i) = rng.normal();
    const std::vector<double> zero(static_cast<std::size_t>(nk), 0.0);
    const auto plain = ensemble::attention(q, k, val, d);
    const auto biased = ensemble::biased_attention(q, k, val, d, zero);
    v.require((plain.weights.array() == biased.weights.array()).all() &&
                  (plain.output.array() == biased.output.array()).all(),
              "zero bias not bit-exact");
    std::vector<double> gamma;
    for (int j = 0; j < nk; ++j) gamma.push_back(2.0 * rng.uniform() - 1.0);
    const auto a = ensemble::biased_attention(q, k, val, d, gamma);
    for (int r = 0; r < nq; ++r) worst_sum = std::max(worst_sum, std::abs(a.weights.row(r).sum() - 1.0));
    for (int j = 0; j < nk; ++j) {
      auto up = gamma;
      up[static_cast<std::size_t>(j)] += 0.25;
      const auto b = ensemble::biased_attention(q, k, val, d, up);
      for (int r = 0; r < nq; ++r) {
        v.require(b.weights(r, j) > a.weights(r, j), "mass did not increase");
      }
    }
  }
  v.require(worst_sum <= kRowSumTol, "row sum deviation " + fmt(worst_sum));
  v.detail += "50 instances, zero bias bit-exact, max |row sum - 1| " + fmt(worst_sum, 2) +
              ", every key monotone";
  return v;
}

pipeline::RunConfig base_config(const std::filesystem::path& out) {
  pipeline::RunConfig cfg;
  cfg.out_dir = out;
  return cfg;
}

void run_curriculum(const pipeline::RunConfig& cfg) {
  pipeline::cmd_synth(cfg);
  pipeline::cmd_train(cfg, Stage::kSft);
  pipeline::cmd_collect(cfg, collect::Phase::kLocalization);
  pipeline::cmd_collect(cfg, collect::Phase::kBoundary);
  pipeline::cmd_train(cfg, Stage::kPreferenceFinetune);
  pipeline::cmd_train(cfg, Stage::kEnsembleTrain);
  pipeline::cmd_eval(cfg, Stage::kSft, false, false);
  pipeline::cmd_eval(cfg, Stage::kPreferenceFinetune, false, false);
  pipeline::cmd_eval(cfg, Stage::kEnsembleTrain, true, true);
  pipeline::cmd_report(cfg);
}

struct PipelineRuns {
  std::filesystem::path main;
  std::filesystem::path single;
  double seconds = 0.0;
};

PipelineRuns& runs() {
  static PipelineRuns r = [] {
    PipelineRuns p;
    p.main = files::scratch("prefseg_acceptance_main");
    p.single = files::scratch("prefseg_acceptance_single");
    const auto t0 = Clock::now();
    run_curriculum(base_config(p.main));
    auto single = base_config(p.single);
    single.curriculum = false;
    pipeline::cmd_synth(single);
    pipeline::cmd_train(single, Stage::kSft);
    pipeline::cmd_collect(single, collect::Phase::kLocalization);
    pipeline::cmd_train(single, Stage::kPreferenceFinetune);
    pipeline::cmd_eval(single, Stage::kPreferenceFinetune, false, false);
    p.seconds = seconds_since(t0);
    return p;
  }();
  return r;
}

Verdict freezing() {
  Verdict v;
  const pipeline::Layout l{runs().main};
  const auto sft = toy::load_checkpoint(l.checkpoint(Stage::kSft));
  const auto pref = toy::load_checkpoint(l.checkpoint(Stage::kPreferenceFinetune));
  const auto ens = toy::load_checkpoint(l.checkpoint(Stage::kEnsembleTrain));
  int decoder = 0, frozen = 0;
  for (int id = 0; id < toy::kParamCount; ++id) {
    if (toy::is_decoder_param(id)) {
      ++decoder;
      v.require(pref.params.tensor_hash(id) == sft.params.tensor_hash(id),
                std::string(toy::param_name(id)) + " changed in preference finetuning");
    }
    if (id != toy::kPrompts) {
      ++frozen;
      v.require(ens.params.tensor_hash(id) == pref.params.tensor_hash(id),
                std::string(toy::param_name(id)) + " changed in ensemble training");
    }
  }
  v.require(pref.params.tensor_hash(toy::kHeadW) != sft.params.tensor_hash(toy::kHeadW),
            "preference finetuning did not train the token head");
  v.require(ens.params.tensor_hash(toy::kPrompts) != pref.params.tensor_hash(toy::kPrompts),
            "ensemble training did not move the prompts");
  v.detail += std::to_string(decoder) + " decoder tensors equal SFT after stage 2, " +
              std::to_string(frozen) + " non-prompt tensors equal stage 2 after stage 3";
  return v;
}

metrics::MetricsReport read_report(const std::filesystem::path& root, Stage s, bool fused) {
  const pipeline::Layout l{root};
  return metrics::report_from_json(
      io::read_json(l.eval(pipeline::eval_label(s, fused)) / "report.json"));
}

Verdict trends() {
  Verdict v;
  const auto& r = runs();
  const auto sft = read_report(r.main, Stage::kSft, false);
  const auto pref = read_report(r.main, Stage::kPreferenceFinetune, false);
  const auto fused = read_report(r.main, Stage::kEnsembleTrain, true);
  const auto single = read_report(r.single, Stage::kPreferenceFinetune, false);
  v.require(sft.c_i && pref.c_i && fused.c_i, "C_I undefined");
  const bool a = pref.giou - sft.giou >= kGiouGain && *pref.c_i < *sft.c_i;
  const bool b = fused.giou >= pref.giou && *fused.c_i <= *pref.c_i;
  const bool c = pref.giou >= single.giou;
  v.require(a, "(a) preference vs SFT");
  v.require(b, "(b) fused vs single response");
  v.require(c, "(c) curriculum vs single criterion");
  v.require(r.seconds < kPipelineSeconds, "runtime " + fmt(r.seconds) + " s");
  std::ostringstream d;
  d << "(a) gIoU " << fmt(sft.giou) << " -> " << fmt(pref.giou) << ", C_I " << fmt(*sft.c_i)
    << " -> " << fmt(*pref.c_i) << (a ? " ok" : " FAIL") << "; (b) gIoU " << fmt(pref.giou)
    << " -> " << fmt(fused.giou) << ", C_I " << fmt(*pref.c_i) << " -> " << fmt(*fused.c_i)
    << (b ? " ok" : " FAIL") << "; (c) curriculum " << fmt(pref.giou) << " vs single "
    << fmt(single.giou) << (c ? " ok" : " FAIL") << "; pearson(eta, IoU) "
    << (fused.pearson_r ? fmt(*fused.pearson_r, 3) : std::string("n/a")) << "; "
    << fmt(r.seconds, 3) << " s";
  v.detail += d.str();
  return v;
}

Verdict determinism() {
  Verdict v;
  const auto again = files::scratch("prefseg_acceptance_repeat");
  run_curriculum(base_config(again));
  std::size_t compared = 0;
  for (const char* sub : {"data", "collect", "ckpt", "traces", "eval", "report"}) {
    const auto a = files::snapshot(runs().main / sub);
    const auto b = files::snapshot(again / sub);
    v.require(!a.empty(), std::string(sub) + " is empty");
    v.require(a == b, std::string(sub) + " differs");
    compared += a.size();
  }
  v.require(files::read_all(runs().main / "config.json") == files::read_all(again / "config.json"),
            "config differs");
  v.detail += std::to_string(compared) + " files byte-identical across two runs";
  return v;
}

}  // namespace

int main() {
  report(1, "gradient verification", gradients);
  report(2, "zero-margin identities", zero_margin);
  report(3, "curriculum collection invariants", curriculum);
  report(4, "metric oracles", oracles);
  report(5, "attention-bias properties", attention_bias);
  report(6, "stage freezing", freezing);
  report(7, "directional trends", trends);
  report(8, "pipeline determinism", determinism);
  return failures == 0 ? 0 : 1;
}
