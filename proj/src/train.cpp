#include "prefseg/train.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include "prefseg/ensemble.hpp"
#include "prefseg/error.hpp"
#include "prefseg/rng.hpp"

namespace prefseg::toy {

using autograd::Var;
using Eigen::MatrixXd;

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kSft: return "sft";
    case Stage::kPreferenceFinetune: return "preference";
    case Stage::kEnsembleTrain: return "ensemble";
  }
  return "unknown";
}

Stage stage_from_name(const std::string& name) {
  if (name == "sft") return Stage::kSft;
  if (name == "preference") return Stage::kPreferenceFinetune;
  if (name == "ensemble") return Stage::kEnsembleTrain;
  throw ConfigError("unknown stage '" + name + "' (expected sft, preference or ensemble)");
}

Trainable all_trainable() {
  Trainable t;
  t.fill(true);
  return t;
}

Trainable preference_trainable() {
  Trainable t = all_trainable();
  for (int id = 0; id < kParamCount; ++id) t[id] = !is_decoder_param(id);
  return t;
}

Trainable ensemble_trainable() {
  Trainable t{};
  t[kPrompts] = true;
  return t;
}

void TrainOptions::validate() const {
  if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("lr must be finite and >= 0");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (!(mask_weight >= 0) || !(fusion_weight >= 0)) {
    throw ConfigError("loss weights must be >= 0");
  }
  if (fusion_k < 1) throw ConfigError("fusion_k must be >= 1");
}

nlohmann::json TrainOptions::to_json() const {
  return {{"lr", lr},
          {"batch", batch},
          {"mask_weight", mask_weight},
          {"fusion_weight", fusion_weight},
          {"fusion_k", fusion_k},
          {"seed", seed}};
}

TrainOptions TrainOptions::from_json(const nlohmann::json& doc) {
  TrainOptions o;
  o.lr = doc.value("lr", o.lr);
  o.batch = doc.value("batch", o.batch);
  o.mask_weight = doc.value("mask_weight", o.mask_weight);
  o.fusion_weight = doc.value("fusion_weight", o.fusion_weight);
  o.fusion_k = doc.value("fusion_k", o.fusion_k);
  o.seed = doc.value("seed", o.seed);
  return o;
}

std::string loss_trace_csv(std::span<const LossRow> rows) {
  std::ostringstream out;
  out.precision(17);
  out << "step,total,l_ce,l_t,l_s,l_ti,l_si\n";
  for (const auto& r : rows) {
    out << r.step << ',' << r.total << ',' << r.l_ce << ',' << r.l_t << ',' << r.l_s << ','
        << r.l_ti << ',' << r.l_si << '\n';
  }
  return out.str();
}

void sgd_update(ModelParams& params, const ModelParams& grads, double lr,
                const Trainable& trainable) {
  for (int id = 0; id < kParamCount; ++id) {
    if (!trainable[id]) {
      if (grads[id].size() != 0 && grads[id].cwiseAbs().maxCoeff() != 0.0) {
        throw InvariantError(std::string("gradient reached frozen tensor '") + param_name(id) +
                             "'");
      }
      continue;
    }
    if (!grads[id].allFinite()) {
      throw NumericError(std::string("non-finite gradient in '") + param_name(id) + "'");
    }
    if (lr != 0.0) params[id] -= lr * grads[id];
  }
}

namespace {

struct GraphHolder {
  std::unique_ptr<Graph> g;
  GraphHolder(const ModelConfig& cfg, const ModelParams& params, ModelParams* grads,
              const Trainable& trainable)
      : g(grads != nullptr ? std::make_unique<Graph>(cfg, params, grads, trainable)
                           : std::make_unique<Graph>(cfg, params)) {}
};

MatrixXd mask_target(const Mask& m) {
  MatrixXd t(static_cast<Eigen::Index>(m.size()), 1);
  for (int r = 0; r < m.height(); ++r) {
    for (int c = 0; c < m.width(); ++c) t(r * m.width() + c, 0) = m.get(r, c) ? 1.0 : 0.0;
  }
  return t;
}

MatrixXd scalar(double v) { return MatrixXd::Constant(1, 1, v); }

void run_backward(Graph& g, std::vector<std::pair<Var, MatrixXd>>& seeds) {
  if (!seeds.empty()) g.tape().backward(seeds);
}

}  // namespace

double supervised_loss(const ModelConfig& cfg, const ModelParams& params,
                       const Sample& sample, double mask_weight, ModelParams* grads,
                       const Trainable& trainable, double weight) {
  sample.validate();
  GraphHolder h(cfg, params, grads, trainable);
  Graph& g = *h.g;
  const auto feats = vision_features(cfg, sample.image);
  auto pass = forced_pass(g, feats, sample.instruction, sample.gt_response);
  const auto n = static_cast<double>(pass.embeddings.size());
  std::vector<Var> terms;
  for (std::size_t t = 0; t < pass.embeddings.size(); ++t) {
    Var ce = scale(add(add(pass.token_logps[3 * t], pass.token_logps[3 * t + 1]),
                       pass.token_logps[3 * t + 2]),
                   -1.0);
    Var bce = autograd::bce_with_logits(g.mask_logits(feats, pass.embeddings[t]),
                                        mask_target(sample.gt_masks[t]));
    terms.push_back(add(ce, scale(bce, mask_weight)));
  }
  Var total = scale(autograd::sum(autograd::vstack(terms)), 1.0 / n);
  if (grads != nullptr) {
    std::vector<std::pair<Var, MatrixXd>> seeds{{total, scalar(weight)}};
    run_backward(g, seeds);
  }
  return total.scalar();
}

double fused_supervised_loss(const ModelConfig& cfg, const ModelParams& params,
                             const Sample& sample, std::span<const ScoredResponse> responses,
                             double mask_weight, ModelParams* grads,
                             const Trainable& trainable, double weight) {
  sample.validate();
  GraphHolder h(cfg, params, grads, trainable);
  Graph& g = *h.g;
  const auto feats = vision_features(cfg, sample.image);
  const int x = sample.instruction;
  const std::size_t image_tokens = static_cast<std::size_t>(cfg.patches());
  Var prompts = g.param(kPrompts);

  ensemble::PreferenceScores scores;
  scores.tau = ensemble::token_preference_scores(responses);
  scores.eta = ensemble::sentence_preference_scores(responses);
  const auto layout_t = ensemble::build_layout(image_tokens, 1, responses,
                                               static_cast<std::size_t>(cfg.prompts),
                                               std::nullopt);
  const auto gamma_t =
      ensemble::attention_bias(layout_t, scores, ensemble::FusionMode::kTextFusion);
  const auto layout_e = ensemble::build_layout(image_tokens, 1, responses,
                                               static_cast<std::size_t>(cfg.prompts),
                                               sample.gt_response.size());
  const auto gamma_e =
      ensemble::attention_bias(layout_e, scores, ensemble::FusionMode::kEmbeddingFusion);

  Var in_t = fused_inputs(g, feats, x, responses, prompts, nullptr);
  Var in_e = fused_inputs(g, feats, x, responses, prompts, &sample.gt_response);
  const int n_targets = target_count(x);
  std::vector<Var> terms;
  for (int n = 0; n < n_targets; ++n) {
    const int quad = target_quadrant(x, n);
    const TokenId obj = sample.gt_response[3 * n];
    auto st = g.fused_slot(in_t, gamma_t, quad, n);
    Var ce = scale(pick(st.logp, 0, obj), -1.0);
    auto se = g.fused_slot(in_e, gamma_e, quad, n);
    Var f = g.seg_embedding(se.hidden, obj);
    Var bce = autograd::bce_with_logits(g.mask_logits(feats, f),
                                        mask_target(sample.gt_masks[static_cast<std::size_t>(n)]));
    terms.push_back(add(ce, scale(bce, mask_weight)));
  }
  Var total = scale(autograd::sum(autograd::vstack(terms)), 1.0 / n_targets);
  if (grads != nullptr) {
    std::vector<std::pair<Var, MatrixXd>> seeds{{total, scalar(weight)}};
    run_backward(g, seeds);
  }
  return total.scalar();
}

std::vector<SegmenterOutput> sample_responses(const ToyModel& model, const Image& image,
                                              int instruction, std::size_t k,
                                              std::uint64_t seed) {
  std::vector<SegmenterOutput> out;
  for (std::size_t i = 0; i < k; ++i) {
    if (i == 0) {
      out.push_back(model.run(image, instruction, std::nullopt));
    } else {
      out.push_back(model.run(image, instruction, derive_seed(seed, "response", i)));
    }
  }
  return out;
}

BatchSampler::BatchSampler(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {
  if (n == 0) throw ConfigError("cannot draw batches from an empty dataset");
  reshuffle();
}

void BatchSampler::reshuffle() {
  order_.resize(n_);
  for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
  Rng rng(derive_seed(seed_, "epoch", epoch_));
  for (std::size_t i = n_; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
    std::swap(order_[i - 1], order_[j]);
  }
  cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next(std::size_t batch) {
  std::vector<std::size_t> out;
  while (out.size() < batch) {
    if (cursor_ == n_) {
      ++epoch_;
      reshuffle();
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

namespace {

std::vector<ScoredResponse> responses_of(const std::vector<SegmenterOutput>& outs) {
  std::vector<ScoredResponse> r;
  for (const auto& o : outs) r.push_back(o.response);
  return r;
}

// Training-time fusion candidates. The last candidate has some object tokens
// swapped and is re-scored, so fusion learns to weigh responses rather than
// copy whichever one is present.
std::vector<ScoredResponse> fusion_candidates(const ToyModel& model, const Sample& s,
                                              std::size_t k, std::uint64_t seed) {
  auto r = responses_of(sample_responses(model, s.image, s.instruction, k, seed));
  const int classes = model.config().classes;
  if (k < 2 || classes < 2) return r;
  Rng rng(derive_seed(seed, "dissent"));
  TokenSeq t = r.back().tokens;
  for (std::size_t p = 0; p + 2 < t.size(); p += 3) {
    if (rng.uniform() >= 0.5) continue;
    const int c = vocab::object_class(t[p]);
    t[p] = vocab::object_token((c + rng.uniform_int(1, classes - 1)) % classes);
  }
  r.back() = model.score(s.image, s.instruction, t);
  return r;
}

void check_finite_loss(double value, const char* stage, std::size_t step,
                       const ModelParams& params) {
  if (std::isfinite(value)) return;
  std::ostringstream msg;
  msg << stage << " loss is not finite at step " << step << " (value " << value
      << ", parameters " << (params.finite() ? "finite" : "non-finite") << ")";
  throw NumericError(msg.str());
}

}  // namespace

double sft_step(ToyModel& model, std::span<const Sample> batch, const TrainOptions& opt,
                std::uint64_t step_seed) {
  opt.validate();
  if (batch.empty()) throw ConfigError("sft_step needs a nonempty batch");
  const auto& cfg = model.config();
  const Trainable trainable = all_trainable();
  ModelParams grads = ModelParams::zeros_like(model.params());
  const double w = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (std::size_t j = 0; j < batch.size(); ++j) {
    const Sample& s = batch[j];
    total += w * supervised_loss(cfg, model.params(), s, opt.mask_weight, &grads, trainable, w);
    if (opt.fusion_weight > 0.0) {
      const auto responses =
          fusion_candidates(model, s, opt.fusion_k, derive_seed(step_seed, "fusion", j));
      total += w * opt.fusion_weight *
               fused_supervised_loss(cfg, model.params(), s, responses, opt.mask_weight,
                                     &grads, trainable, w * opt.fusion_weight);
    }
  }
  check_finite_loss(total, "sft", 0, model.params());
  sgd_update(model.mutable_params(), grads, opt.lr, trainable);
  return total;
}

std::vector<LossRow> train_sft(ToyModel& model, std::span<const Sample> data,
                               std::size_t steps, const TrainOptions& opt) {
  opt.validate();
  BatchSampler sampler(data.size(), derive_seed(opt.seed, "sft-order"));
  std::vector<LossRow> trace;
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<Sample> batch;
    for (auto i : sampler.next(opt.batch)) batch.push_back(data[i]);
    LossRow row;
    row.step = step;
    try {
      row.total = sft_step(model, batch, opt, derive_seed(opt.seed, "sft-step", step));
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " [sft step " + std::to_string(step) + "]");
    }
    row.l_ce = row.total;
    trace.push_back(row);
  }
  return trace;
}

ReferenceCache reference_scores(const ToyModel& reference,
                                std::span<const collect::TextPreferenceSample> text) {
  ReferenceCache cache;
  for (const auto& t : text) {
    cache.y.push_back(reference.score(t.image, t.instruction, t.y).logps);
    cache.y_c.push_back(reference.score(t.image, t.instruction, t.y_c).logps);
  }
  return cache;
}

PreferenceTerms preference_terms(const ModelConfig& cfg, const ModelParams& policy,
                                 const collect::TextPreferenceSample& text,
                                 const TokenLogProbs& ref_y, const TokenLogProbs& ref_yc,
                                 const collect::SegPreferenceSample& seg,
                                 const Sample& seg_source, const Sample& clean,
                                 BandWidth band, const losses::PreferenceHyper& hyper,
                                 const TrainOptions& opt,
                                 std::span<const ScoredResponse> fusion_responses,
                                 ModelParams* grads, const Trainable& trainable,
                                 double weight) {
  PreferenceTerms out;
  GraphHolder h(cfg, policy, grads, trainable);
  Graph& g = *h.g;
  std::vector<std::pair<Var, MatrixXd>> seeds;

  // Text preference.
  const auto feats_t = vision_features(cfg, text.image);
  auto py = forced_pass(g, feats_t, text.instruction, text.y);
  auto pyc = forced_pass(g, feats_t, text.instruction, text.y_c);
  std::vector<double> vy;
  std::vector<double> vyc;
  for (const auto& v : py.token_logps) vy.push_back(v.scalar());
  for (const auto& v : pyc.token_logps) vyc.push_back(v.scalar());
  const auto lt =
      losses::text_dpo_loss(vyc, vy, ref_yc, ref_y, text.l_y, text.l_yc, hyper);
  out.l_t = lt.value;
  for (std::size_t i = 0; i < vyc.size(); ++i) {
    if (lt.gradients[0](i) != 0.0) {
      seeds.push_back({pyc.token_logps[i], scalar(weight * lt.gradients[0](i))});
    }
  }
  for (std::size_t i = 0; i < vy.size(); ++i) {
    if (lt.gradients[1](i) != 0.0) {
      seeds.push_back({py.token_logps[i], scalar(weight * lt.gradients[1](i))});
    }
  }

  // Segmentation-embedding preference: the policy re-embeds each target's
  // median view under the tokens recorded for it.
  struct View {
    ForcedPass pass;
    std::vector<Mask> masks;
  };
  std::map<int, View> views;
  const MatrixXd& dec_w = policy[kDecoderW];
  const double dec_b = policy[kDecoderB](0, 0);
  std::vector<losses::SegPreferenceTarget> targets;
  std::vector<Var> mids;
  for (std::size_t n = 0; n < seg.targets(); ++n) {
    const auto& order = seg.orderings[n];
    const int mid = order[1];
    auto it = views.find(mid);
    if (it == views.end()) {
      const auto& rec = seg.records[static_cast<std::size_t>(mid)];
      const auto feats = vision_features(cfg, rec.image);
      View v{forced_pass(g, feats, seg.instruction, rec.tokens), {}};
      for (const auto& f : v.pass.embeddings) {
        const MatrixXd logits =
            ((feats.pixel * dec_w) * f.value().transpose()).array() + dec_b;
        v.masks.push_back(threshold_mask(logits, cfg.grid));
      }
      it = views.emplace(mid, std::move(v)).first;
    }
    const View& v = it->second;
    double policy_crit = 0.0;
    if (seg.phase == collect::Phase::kLocalization) {
      policy_crit = collect::target_localization_scores(v.masks, seg_source.gt_masks,
                                                        seg_source.object_masks)[n];
    } else {
      policy_crit = boundary_iou(v.masks[n], seg_source.gt_masks[n], band);
    }
    const double ref_best = seg.target_criterion(n, static_cast<std::size_t>(order[0]));
    losses::SegPreferenceTarget t;
    t.f_policy_mid = v.pass.embeddings[n].value().row(0).transpose();
    t.f_ref_best = seg.embedding(n, static_cast<std::size_t>(order[0]));
    t.f_ref_mid = seg.embedding(n, static_cast<std::size_t>(order[1]));
    t.f_ref_worst = seg.embedding(n, static_cast<std::size_t>(order[2]));
    t.indicator_active = ref_best >= policy_crit;
    if (t.indicator_active) ++out.active_targets;
    targets.push_back(std::move(t));
    mids.push_back(v.pass.embeddings[n]);
  }
  const auto ls = losses::seg_preference_loss(targets, hyper.beta_s);
  out.l_s = ls.value;
  for (std::size_t n = 0; n < mids.size(); ++n) {
    if (ls.gradients[n].cwiseAbs().maxCoeff() != 0.0) {
      seeds.push_back({mids[n], (weight * ls.gradients[n]).transpose()});
    }
  }
  if (grads != nullptr) run_backward(g, seeds);

  out.l_ce = supervised_loss(cfg, policy, clean, opt.mask_weight, grads, trainable, weight);
  if (opt.fusion_weight > 0.0) {
    if (fusion_responses.empty()) {
      throw ShapeError("preference_terms: fused L_ce needs sampled responses");
    }
    out.l_ce += opt.fusion_weight *
                fused_supervised_loss(cfg, policy, clean, fusion_responses, opt.mask_weight,
                                      grads, trainable, weight * opt.fusion_weight);
  }
  return out;
}

std::vector<LossRow> preference_finetune(ToyModel& model, const PreferenceInputs& in,
                                         const losses::PreferenceHyper& hyper,
                                         std::size_t steps, const TrainOptions& opt) {
  opt.validate();
  hyper.validate();
  const std::size_t first_steps = (steps + 1) / 2;
  if (in.text.empty()) throw ConfigError("preference finetuning needs text preference data");
  if (in.train.empty()) throw ConfigError("preference finetuning needs the training samples");
  if (first_steps > 0 && in.first_half.empty()) {
    throw ConfigError(std::string("missing ") + collect::phase_name(in.first_phase) +
                      "-phase segmentation preference data");
  }
  if (steps > first_steps && in.second_half.empty()) {
    throw ConfigError(std::string("missing ") + collect::phase_name(in.second_phase) +
                      "-phase segmentation preference data");
  }
  const auto& cfg = model.config();
  const BandWidth band = in.band.value_or(default_band_width(cfg.grid, cfg.grid));
  const Trainable trainable = preference_trainable();

  // Frozen reference snapshot.
  const ToyModel reference(cfg, model.params());
  const std::uint64_t ref_hash = reference.params().hash();
  const auto cache = reference_scores(reference, in.text);
  std::array<std::uint64_t, kParamCount> frozen{};
  for (int id = 0; id < kParamCount; ++id) frozen[id] = model.params().tensor_hash(id);

  BatchSampler text_order(in.text.size(), derive_seed(opt.seed, "pref-text"));
  BatchSampler clean_order(in.train.size(), derive_seed(opt.seed, "pref-clean"));
  std::optional<BatchSampler> first_order;
  std::optional<BatchSampler> second_order;
  if (!in.first_half.empty()) {
    first_order.emplace(in.first_half.size(), derive_seed(opt.seed, "pref-seg-first"));
  }
  if (!in.second_half.empty()) {
    second_order.emplace(in.second_half.size(), derive_seed(opt.seed, "pref-seg-second"));
  }

  const double w = 1.0 / static_cast<double>(opt.batch);
  std::vector<LossRow> trace;
  for (std::size_t step = 0; step < steps; ++step) {
    const bool first = step < first_steps;
    auto seg_set = first ? in.first_half : in.second_half;
    auto& seg_order = first ? *first_order : *second_order;
    const auto ti = text_order.next(opt.batch);
    const auto si = seg_order.next(opt.batch);
    const auto ci = clean_order.next(opt.batch);
    ModelParams grads = ModelParams::zeros_like(model.params());
    LossRow row;
    row.step = step;
    for (std::size_t j = 0; j < opt.batch; ++j) {
      const auto& seg = seg_set[si[j]];
      if (seg.source_index >= in.train.size()) {
        throw IndexError("segmentation preference sample points outside the training set");
      }
      const Sample& clean = in.train[ci[j]];
      std::vector<ScoredResponse> fusion;
      if (opt.fusion_weight > 0.0) {
        fusion = fusion_candidates(model, clean, opt.fusion_k,
                                   derive_seed(opt.seed, "pref-fusion", step * opt.batch + j));
      }
      const auto terms = preference_terms(
          cfg, model.params(), in.text[ti[j]], cache.y[ti[j]], cache.y_c[ti[j]], seg,
          in.train[seg.source_index], clean, band, hyper, opt, fusion, &grads, trainable, w);
      row.l_t += w * terms.l_t;
      row.l_s += w * terms.l_s;
      row.l_ce += w * terms.l_ce;
    }
    row.total = row.l_t + row.l_s + row.l_ce;
    check_finite_loss(row.total, "preference", step, model.params());
    sgd_update(model.mutable_params(), grads, opt.lr, trainable);
    trace.push_back(row);
  }

  if (reference.params().hash() != ref_hash) {
    throw InvariantError("reference snapshot changed during preference finetuning");
  }
  for (int id = 0; id < kParamCount; ++id) {
    if (!trainable[id] && model.params().tensor_hash(id) != frozen[id]) {
      throw InvariantError(std::string("frozen tensor '") + param_name(id) + "' changed");
    }
  }
  return trace;
}

MatrixXd text_embedder_table(std::uint64_t seed, int dim) {
  if (dim < 1) throw ConfigError("embedder dim must be >= 1");
  Rng rng(derive_seed(seed, "text-embedder"));
  MatrixXd t(vocab::kSize, dim);
  for (Eigen::Index r = 0; r < t.rows(); ++r) {
    for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = rng.normal();
  }
  return t;
}

EnsembleTerms ensemble_terms(const ModelConfig& cfg, const ModelParams& params,
                             const Sample& sample, std::span<const ScoredResponse> responses,
                             const std::vector<std::vector<Mask>>& response_masks,
                             const MatrixXd& embedder_table,
                             const losses::PreferenceHyper& hyper, ModelParams* grads,
                             const Trainable& trainable, double weight,
                             std::optional<double> refined_prob_override) {
  if (response_masks.size() != responses.size()) {
    throw ShapeError("ensemble_terms: one mask list per response");
  }
  GraphHolder h(cfg, params, grads, trainable);
  Graph& g = *h.g;
  const auto feats = vision_features(cfg, sample.image);
  const int x = sample.instruction;
  const int n_targets = target_count(x);
  const std::size_t image_tokens = static_cast<std::size_t>(cfg.patches());
  Var prompts = g.param(kPrompts);

  ensemble::PreferenceScores scores;
  scores.tau = ensemble::token_preference_scores(responses);
  scores.eta = ensemble::sentence_preference_scores(responses);
  const auto layout_t = ensemble::build_layout(image_tokens, 1, responses,
                                               static_cast<std::size_t>(cfg.prompts),
                                               std::nullopt);
  const auto gamma_t =
      ensemble::attention_bias(layout_t, scores, ensemble::FusionMode::kTextFusion);

  // Refined response: greedy tokens, with soft token distributions feeding
  // the sentence embedding.
  Var in_t = fused_inputs(g, feats, x, responses, prompts, nullptr);
  const double seg_lp = g.struct_logp(0).value()(0, vocab::kSeg);
  const double eos_lp = g.struct_logp(1).value()(0, vocab::kEndOfSentence);
  TokenSeq refined;
  double refined_logp = 0.0;
  std::vector<Var> rows;
  for (int n = 0; n < n_targets; ++n) {
    auto s = g.fused_slot(in_t, gamma_t, target_quadrant(x, n), n);
    const TokenId obj = greedy_candidate_object(s.logp.value(), cfg.classes, responses, n);
    refined.insert(refined.end(), {obj, vocab::kSeg, vocab::kEndOfSentence});
    refined_logp += s.logp.value()(0, obj) + seg_lp + eos_lp;
    rows.push_back(autograd::exp(s.logp));
    MatrixXd seg_row = MatrixXd::Zero(1, vocab::kSize);
    seg_row(0, vocab::kSeg) = 1.0;
    MatrixXd eos_row = MatrixXd::Zero(1, vocab::kSize);
    eos_row(0, vocab::kEndOfSentence) = 1.0;
    rows.push_back(g.tape().constant(seg_row));
    rows.push_back(g.tape().constant(eos_row));
  }
  const auto len = static_cast<Eigen::Index>(rows.size());
  Var h_refined = scale(matmul(g.tape().constant(MatrixXd::Ones(1, len)),
                               matmul(autograd::vstack(rows), g.tape().constant(embedder_table))),
                        1.0 / static_cast<double>(len));
  const losses::MeanTokenEmbedder embedder(embedder_table);
  std::vector<Embedding> h_orig;
  for (const auto& r : responses) h_orig.push_back(embedder.embed(r.tokens));
  const auto lt = losses::text_improvement_loss(
      refined_prob_override.value_or(std::exp(refined_logp)), h_refined.value().row(0).transpose(),
      embedder.embed(sample.gt_response), h_orig, hyper.improvement_scale);

  // Refined embeddings over [I, x, y, p, f, refined].
  const auto layout_e = ensemble::build_layout(image_tokens, 1, responses,
                                               static_cast<std::size_t>(cfg.prompts),
                                               refined.size());
  const auto gamma_e =
      ensemble::attention_bias(layout_e, scores, ensemble::FusionMode::kEmbeddingFusion);
  Var in_e = fused_inputs(g, feats, x, responses, prompts, &refined);
  std::vector<Var> ious;
  std::vector<double> refined_ious;
  for (int n = 0; n < n_targets; ++n) {
    auto s = g.fused_slot(in_e, gamma_e, target_quadrant(x, n), n);
    Var f = g.seg_embedding(s.hidden, refined[3 * n]);
    ious.push_back(autograd::soft_iou(g.mask_logits(feats, f),
                                      mask_target(sample.gt_masks[static_cast<std::size_t>(n)])));
    refined_ious.push_back(ious.back().scalar());
  }
  std::vector<std::vector<double>> original;
  for (const auto& masks : response_masks) {
    if (masks.size() != static_cast<std::size_t>(n_targets)) {
      throw StructureError("ensemble_terms: response mask count differs from the target count");
    }
    std::vector<double> row;
    for (int n = 0; n < n_targets; ++n) {
      row.push_back(iou(masks[static_cast<std::size_t>(n)],
                        sample.gt_masks[static_cast<std::size_t>(n)]));
    }
    original.push_back(std::move(row));
  }
  const auto lsi = losses::seg_improvement_loss(refined_ious, original, hyper.improvement_scale);

  if (grads != nullptr) {
    std::vector<std::pair<Var, MatrixXd>> seeds;
    seeds.push_back({h_refined, (weight * lt.gradients[0]).transpose()});
    for (int n = 0; n < n_targets; ++n) {
      seeds.push_back({ious[static_cast<std::size_t>(n)], scalar(weight * lsi.gradients[0](n))});
    }
    run_backward(g, seeds);
  }
  return {lt.value, lsi.value};
}

std::vector<LossRow> ensemble_train(ToyModel& model, std::span<const Sample> data,
                                    std::size_t k, std::size_t steps,
                                    const losses::PreferenceHyper& hyper,
                                    const TrainOptions& opt) {
  opt.validate();
  hyper.validate();
  if (k < 1) throw ConfigError("ensemble training needs K >= 1");
  if (data.empty()) throw ConfigError("ensemble training needs samples");
  const auto& cfg = model.config();
  const Trainable trainable = ensemble_trainable();
  std::array<std::uint64_t, kParamCount> frozen{};
  for (int id = 0; id < kParamCount; ++id) frozen[id] = model.params().tensor_hash(id);
  const MatrixXd table = text_embedder_table(opt.seed);

  // The plain forward ignores the prompts, so the K responses per sample are
  // fixed for the whole stage.
  std::vector<std::vector<ScoredResponse>> responses(data.size());
  std::vector<std::vector<std::vector<Mask>>> masks(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto outs = sample_responses(model, data[i].image, data[i].instruction, k,
                                       derive_seed(opt.seed, "ensemble-responses", i));
    for (const auto& o : outs) {
      responses[i].push_back(o.response);
      masks[i].push_back(o.masks);
    }
  }

  BatchSampler order(data.size(), derive_seed(opt.seed, "ensemble-order"));
  const double w = 1.0 / static_cast<double>(opt.batch);
  std::vector<LossRow> trace;
  for (std::size_t step = 0; step < steps; ++step) {
    ModelParams grads = ModelParams::zeros_like(model.params());
    LossRow row;
    row.step = step;
    for (auto i : order.next(opt.batch)) {
      const auto t = ensemble_terms(cfg, model.params(), data[i], responses[i], masks[i], table,
                                    hyper, &grads, trainable, w);
      row.l_ti += w * t.l_ti;
      row.l_si += w * t.l_si;
    }
    row.total = row.l_ti + row.l_si;
    check_finite_loss(row.total, "ensemble", step, model.params());
    sgd_update(model.mutable_params(), grads, opt.lr, trainable);
    trace.push_back(row);
  }
  for (int id = 0; id < kParamCount; ++id) {
    if (!trainable[id] && model.params().tensor_hash(id) != frozen[id]) {
      throw InvariantError(std::string("frozen tensor '") + param_name(id) + "' changed");
    }
  }
  return trace;
}

}  // namespace prefseg::toy
