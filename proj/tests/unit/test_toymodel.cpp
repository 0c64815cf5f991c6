#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <variant>

#include "prefseg/checkpoint.hpp"
#include "prefseg/collect.hpp"
#include "prefseg/error.hpp"
#include "prefseg/synth.hpp"
#include "prefseg/toy_model.hpp"
#include "prefseg/train.hpp"

using namespace prefseg;
using namespace prefseg::toy;

namespace {

constexpr double kNormTol = 1e-9;

double window_mean(const std::vector<LossRow>& rows, std::size_t from, std::size_t len) {
  double s = 0.0;
  for (std::size_t i = from; i < from + len; ++i) s += rows[i].total;
  return s / static_cast<double>(len);
}

// One class-2 square in the top-left quadrant over a flat dark background.
Sample clean_square(const ModelConfig& cfg) {
  Sample s;
  s.image = Image(cfg.grid, cfg.grid, 0.0);
  Mask m(cfg.grid, cfg.grid);
  m.fill_rect(1, 1, 5, 5);
  for (int r = 1; r < 6; ++r)
    for (int c = 1; c < 6; ++c) s.image.at(r, c) = cfg.class_intensity(2);
  s.instruction = 1;
  s.gt_masks = {m};
  s.object_masks = {m};
  s.gt_response = {vocab::object_token(2), vocab::kSeg, vocab::kEndOfSentence};
  return s;
}

// Head and decoder weights that reproduce clean_square exactly.
ModelParams perfect_fit(const ModelConfig& cfg) {
  constexpr double kLogit = 50.0;
  constexpr double kDecoder = 200.0;
  ModelParams p = ModelParams::init(cfg, 1);
  p[kHeadW].setZero();
  p[kHeadB].setZero();
  p[kHeadB](0, vocab::object_token(2)) = kLogit;
  p[kStructLogits].setZero();
  p[kStructLogits](0, vocab::kSeg) = kLogit;
  p[kStructLogits](1, vocab::kEndOfSentence) = kLogit;
  p[kEmbedW].setZero();
  p[kEmbedB].setZero();
  p[kEmbedB](0, 0) = 1.0;
  p[kDecoderW].setZero();
  p[kDecoderW](2, 0) = kDecoder;
  p[kDecoderW](cfg.classes, 0) = -kDecoder / 2.0;
  p[kDecoderB].setZero();
  return p;
}

// A short SFT run, enough for collection to produce varied outputs.
ToyModel warm_model(const ModelConfig& cfg, const std::vector<Sample>& data) {
  ToyModel model(cfg, ModelParams::init(cfg, 11));
  TrainOptions opt;
  opt.seed = 5;
  train_sft(model, data, 60, opt);
  return model;
}

}  // namespace

TEST_CASE("forward: determinism, greedy seed independence, normalized log-probabilities") {
  const ModelConfig cfg;
  const ToyModel model(cfg, ModelParams::init(cfg, 3));
  const auto data = synth_dataset(cfg, SceneConfig{}, 8, 17);
  for (const auto& s : data) {
    const auto a = model.run(s.image, s.instruction, 99);
    const auto b = model.run(s.image, s.instruction, 99);
    CHECK(a.response.tokens == b.response.tokens);
    CHECK(a.response.logps == b.response.logps);
    CHECK(a.masks == b.masks);
    const auto g1 = model.run(s.image, s.instruction, std::nullopt);
    const auto g2 = model.run(s.image, s.instruction, std::nullopt);
    CHECK(g1.response.tokens == g2.response.tokens);
    CHECK(g1.response.embeddings.size() == s.gt_masks.size());
    CHECK(g1.masks.size() == s.gt_masks.size());
    for (double lp : a.response.logps) CHECK(lp <= 0.0);

    Graph g(cfg, model.params());
    const auto feats = vision_features(cfg, s.image);
    autograd::Var inputs = autograd::vstack(
        std::vector<autograd::Var>{g.image_tokens(feats), g.instruction_token(s.instruction)});
    for (int n = 0; n < target_count(s.instruction); ++n) {
      const auto slot = g.slot(inputs, {}, target_quadrant(s.instruction, n), n);
      CHECK(std::abs(slot.logp.value().array().exp().sum() - 1.0) <= kNormTol);
    }
    for (int which = 0; which < 2; ++which) {
      CHECK(std::abs(g.struct_logp(which).value().array().exp().sum() - 1.0) <= kNormTol);
    }
  }
}

TEST_CASE("sft: training loss decreases on a 10-sample set over 200 steps") {
  const ModelConfig cfg;
  const auto data = synth_dataset(cfg, SceneConfig{}, 10, 23);
  ToyModel model(cfg, ModelParams::init(cfg, 4));
  TrainOptions opt;
  opt.batch = 10;
  opt.fusion_weight = 0.0;
  opt.seed = 1;
  const auto trace = train_sft(model, data, 200, opt);
  REQUIRE(trace.size() == 200);
  // Window means over 20 steps must fall strictly from window to window.
  double prev = window_mean(trace, 0, 20);
  for (std::size_t w = 1; w < 10; ++w) {
    const double cur = window_mean(trace, 20 * w, 20);
    CHECK(cur < prev);
    prev = cur;
  }
  CHECK(trace.back().total < 0.5 * trace.front().total);
}

TEST_CASE("sft: zero learning rate leaves parameters unchanged") {
  const ModelConfig cfg;
  const auto data = synth_dataset(cfg, SceneConfig{}, 4, 2);
  ToyModel model(cfg, ModelParams::init(cfg, 4));
  const auto before = model.params();
  TrainOptions opt;
  opt.lr = 0.0;
  opt.batch = 4;
  sft_step(model, data, opt, 7);
  CHECK(model.params() == before);
}

TEST_CASE("sft: loss at rigged perfect-fit parameters is about zero") {
  const ModelConfig cfg;
  const Sample s = clean_square(cfg);
  const ModelParams p = perfect_fit(cfg);
  const double loss = supervised_loss(cfg, p, s, 1.0, nullptr, all_trainable());
  CHECK(loss >= 0.0);
  CHECK(loss < 1e-9);
  const ToyModel model(cfg, p);
  const auto out = model.run(s.image, s.instruction, std::nullopt);
  CHECK(out.response.tokens == s.gt_response);
  CHECK(out.masks[0] == s.gt_masks[0]);
  CHECK(supervised_loss(cfg, ModelParams::init(cfg, 1), s, 1.0, nullptr, all_trainable()) > 1.0);
}

TEST_CASE("sft: empty batch and non-finite parameters are rejected") {
  const ModelConfig cfg;
  ToyModel model(cfg, ModelParams::init(cfg, 4));
  CHECK_THROWS_AS(sft_step(model, std::vector<Sample>{}, TrainOptions{}, 1), ConfigError);
  const auto data = synth_dataset(cfg, SceneConfig{}, 2, 2);
  model.mutable_params()[kHeadB](0, 0) = std::nan("");
  CHECK_THROWS_AS(sft_step(model, data, TrainOptions{}, 1), NumericError);
}

TEST_CASE("sgd_update refuses gradients on frozen tensors") {
  const ModelConfig cfg;
  ModelParams p = ModelParams::init(cfg, 1);
  ModelParams grads = ModelParams::zeros_like(p);
  const Trainable prompts_only = ensemble_trainable();
  grads[kPrompts].setOnes();
  const auto before = p;
  sgd_update(p, grads, 0.1, prompts_only);
  CHECK(p[kPrompts] != before[kPrompts]);
  CHECK(p[kWq] == before[kWq]);
  grads[kDecoderW](0, 0) = 1e-3;
  CHECK_THROWS_AS(sgd_update(p, grads, 0.1, prompts_only), InvariantError);
  CHECK_THROWS_AS(sgd_update(p, grads, 0.1, preference_trainable()), InvariantError);
}

TEST_CASE("trainable sets") {
  const auto pref = preference_trainable();
  const auto ens = ensemble_trainable();
  for (int id = 0; id < kParamCount; ++id) {
    CHECK(pref[id] == !is_decoder_param(id));
    CHECK(ens[id] == (id == kPrompts));
  }
  CHECK(is_decoder_param(kDecoderW));
  CHECK(is_decoder_param(kDecoderB));
}

TEST_CASE("preference finetuning keeps the decoder bit-identical") {
  const ModelConfig cfg;
  const auto data = synth_dataset(cfg, SceneConfig{}, 12, 31);
  ToyModel model = warm_model(cfg, data);
  const collect::SyntheticCorruptionOracle oracle(cfg.classes);
  collect::SegCollectConfig sc;
  sc.n_p = 8;
  std::vector<collect::TextPreferenceSample> text;
  std::vector<collect::SegPreferenceSample> seg;
  for (std::size_t i = 0; i < data.size(); ++i) {
    text.push_back(collect::collect_text_preference(data[i], model, oracle, 100 + i, i));
    auto r = collect::collect_seg_preference(data[i], model, data[i].object_masks,
                                             collect::Phase::kBoundary, sc, 200 + i, i);
    REQUIRE(std::holds_alternative<collect::SegPreferenceSample>(r));
    seg.push_back(std::get<collect::SegPreferenceSample>(r));
  }
  const auto before = model.params();
  PreferenceInputs in;
  in.train = data;
  in.text = text;
  in.first_half = seg;
  in.second_half = seg;
  TrainOptions opt;
  opt.batch = 4;
  const auto trace = preference_finetune(model, in, losses::PreferenceHyper{}, 6, opt);
  CHECK(trace.size() == 6);
  CHECK(model.params().tensor_hash(kDecoderW) == before.tensor_hash(kDecoderW));
  CHECK(model.params().tensor_hash(kDecoderB) == before.tensor_hash(kDecoderB));
  CHECK(model.params().tensor_hash(kHeadW) != before.tensor_hash(kHeadW));

  PreferenceInputs missing = in;
  missing.second_half = {};
  ToyModel again(cfg, before);
  CHECK_THROWS_AS(preference_finetune(again, missing, losses::PreferenceHyper{}, 6, opt),
                  ConfigError);
}

TEST_CASE("ensemble training moves only the prompts and lowers L_ti + L_si") {
  const ModelConfig cfg;
  const auto data = synth_dataset(cfg, SceneConfig{}, 8, 41);
  ToyModel model = warm_model(cfg, data);
  // Give the fusion layer a nonzero value path so prompts can matter.
  Rng rng(3);
  for (Eigen::Index i = 0; i < model.params()[kFuseWv].size(); ++i) {
    model.mutable_params()[kFuseWv](i) = rng.normal(0.0, 0.5);
  }
  const auto before = model.params();
  TrainOptions opt;
  opt.batch = 8;
  opt.lr = 0.3;
  const auto trace = ensemble_train(model, data, 3, 60, losses::PreferenceHyper{}, opt);
  REQUIRE(trace.size() == 60);
  for (int id = 0; id < kParamCount; ++id) {
    if (id == kPrompts) continue;
    CHECK_MESSAGE(model.params().tensor_hash(id) == before.tensor_hash(id), param_name(id));
  }
  CHECK(model.params()[kPrompts] != before[kPrompts]);
  CHECK(window_mean(trace, 50, 10) < window_mean(trace, 0, 10));

  ToyModel single(cfg, before);
  const auto one = ensemble_train(single, data, 1, 3, losses::PreferenceHyper{}, opt);
  CHECK(one.size() == 3);
  for (const auto& r : one) CHECK(std::isfinite(r.total));
  CHECK_THROWS_AS(ensemble_train(single, data, 0, 3, losses::PreferenceHyper{}, opt),
                  ConfigError);
}

TEST_CASE("checkpoint round trip is bit-exact and detects corruption") {
  const ModelConfig cfg;
  Checkpoint ckpt{cfg, ModelParams::init(cfg, 8), {"abc", "sft", 12, 7}};
  const auto dir = std::filesystem::temp_directory_path() / "prefseg_ckpt_roundtrip";
  std::filesystem::remove_all(dir);
  save_checkpoint(dir, ckpt);
  const auto back = load_checkpoint(dir);
  CHECK(back.params == ckpt.params);
  CHECK(back.params.hash() == ckpt.params.hash());
  CHECK(back.meta.config_hash == "abc");
  CHECK(back.meta.stage == "sft");
  CHECK(back.meta.step == 12);
  CHECK(back.meta.seed == 7);
  {
    std::fstream f(dir / "head_w.f64", std::ios::in | std::ios::out | std::ios::binary);
    REQUIRE(f);
    char byte = 0;
    f.read(&byte, 1);
    byte = static_cast<char>(byte ^ 0x10);
    f.seekp(0);
    f.write(&byte, 1);
  }
  CHECK_THROWS_AS(load_checkpoint(dir), InvariantError);
  std::filesystem::remove(dir / "head_w.f64");
  CHECK_THROWS_AS(load_checkpoint(dir), IoError);
  std::filesystem::remove_all(dir);
}
