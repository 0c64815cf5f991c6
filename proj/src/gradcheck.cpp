#include <algorithm>
#include <functional>

#include "prefseg/error.hpp"
#include "prefseg/pipeline.hpp"
#include "prefseg/rng.hpp"

namespace prefseg::pipeline {

namespace {

using Eigen::VectorXd;

constexpr double kStep = 1e-5;
// Below this magnitude a partial is compared absolutely.
constexpr double kAbsFloor = 1e-6;
// Model losses are O(10), so central-difference rounding noise is about
// 1e-10 absolute; partials smaller than this floor are compared absolutely.
constexpr double kModelAbsFloor = 1e-5;
constexpr int kEmbeddingDim = 8;

VectorXd random_vector(Rng& rng, int n) {
  VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = rng.normal();
  return v;
}

std::vector<double> random_logps(Rng& rng, int n) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = -0.05 - 3.0 * rng.uniform();
  return v;
}

IndexList random_subset(Rng& rng, std::size_t n) {
  IndexList out;
  for (std::size_t i = 0; i < n; ++i) {
    if (rng.uniform() < 0.4) out.push_back(i);
  }
  return out;
}

struct Tally {
  GradcheckSummary s;
  void add(const losses::GradCheckReport& r) {
    ++s.points;
    s.max_relative_error = std::max(s.max_relative_error, r.max_relative_error);
    s.passed = s.passed && r.passed;
  }
};

Tally start(const std::string& name) {
  Tally t;
  t.s.name = name;
  t.s.passed = true;
  return t;
}

GradcheckSummary check_text_dpo(std::size_t points, std::uint64_t seed, double tol,
                                const losses::PreferenceHyper& hyper) {
  auto t = start("text_dpo_loss");
  for (std::size_t p = 0; p < points; ++p) {
    Rng rng(derive_seed(seed, "text_dpo", p));
    const int ny = rng.uniform_int(1, 9);
    const int nyc = rng.uniform_int(1, 9);
    const auto pyc = random_logps(rng, nyc);
    const auto py = random_logps(rng, ny);
    const auto ryc = random_logps(rng, nyc);
    const auto ry = random_logps(rng, ny);
    const auto l_y = random_subset(rng, static_cast<std::size_t>(ny));
    const auto l_yc = random_subset(rng, static_cast<std::size_t>(nyc));
    VectorXd point(nyc + ny);
    for (int i = 0; i < nyc; ++i) point(i) = pyc[i];
    for (int i = 0; i < ny; ++i) point(nyc + i) = py[i];
    auto split = [&](const VectorXd& x, std::vector<double>& a, std::vector<double>& b) {
      a.assign(x.data(), x.data() + nyc);
      b.assign(x.data() + nyc, x.data() + nyc + ny);
    };
    auto fn = [&](const VectorXd& x) {
      std::vector<double> a, b;
      split(x, a, b);
      return losses::text_dpo_loss(a, b, ryc, ry, l_y, l_yc, hyper).value;
    };
    const auto lv = losses::text_dpo_loss(pyc, py, ryc, ry, l_y, l_yc, hyper);
    VectorXd analytic(nyc + ny);
    analytic << lv.gradients[0], lv.gradients[1];
    t.add(losses::finite_difference_check(fn, point, analytic, kStep, tol, kAbsFloor));
  }
  return t.s;
}

GradcheckSummary check_seg_preference(std::size_t points, std::uint64_t seed, double tol,
                                      const losses::PreferenceHyper& hyper) {
  auto t = start("seg_preference_loss");
  for (std::size_t p = 0; p < points; ++p) {
    Rng rng(derive_seed(seed, "seg_preference", p));
    const int n = rng.uniform_int(1, 3);
    std::vector<losses::SegPreferenceTarget> targets(static_cast<std::size_t>(n));
    VectorXd point(n * kEmbeddingDim);
    for (int i = 0; i < n; ++i) {
      auto& tg = targets[static_cast<std::size_t>(i)];
      tg.f_policy_mid = random_vector(rng, kEmbeddingDim);
      tg.f_ref_best = random_vector(rng, kEmbeddingDim);
      tg.f_ref_mid = random_vector(rng, kEmbeddingDim);
      tg.f_ref_worst = random_vector(rng, kEmbeddingDim);
      tg.indicator_active = true;
      point.segment(i * kEmbeddingDim, kEmbeddingDim) = tg.f_policy_mid;
    }
    auto fn = [&](const VectorXd& x) {
      auto copy = targets;
      for (int i = 0; i < n; ++i) {
        copy[static_cast<std::size_t>(i)].f_policy_mid = x.segment(i * kEmbeddingDim, kEmbeddingDim);
      }
      return losses::seg_preference_loss(copy, hyper.beta_s).value;
    };
    const auto lv = losses::seg_preference_loss(targets, hyper.beta_s);
    VectorXd analytic(n * kEmbeddingDim);
    for (int i = 0; i < n; ++i) analytic.segment(i * kEmbeddingDim, kEmbeddingDim) = lv.gradients[i];
    t.add(losses::finite_difference_check(fn, point, analytic, kStep, tol, kAbsFloor));
  }
  return t.s;
}

GradcheckSummary check_text_improvement(std::size_t points, std::uint64_t seed, double tol,
                                        const losses::PreferenceHyper& hyper) {
  auto t = start("text_improvement_loss");
  for (std::size_t p = 0; p < points; ++p) {
    Rng rng(derive_seed(seed, "text_improvement", p));
    const double prob = 0.05 + 0.95 * rng.uniform();
    const VectorXd h = random_vector(rng, kEmbeddingDim);
    const VectorXd gt = random_vector(rng, kEmbeddingDim);
    std::vector<Embedding> orig;
    const int k = rng.uniform_int(1, 3);
    for (int i = 0; i < k; ++i) orig.push_back(random_vector(rng, kEmbeddingDim));
    auto fn = [&](const VectorXd& x) {
      return losses::text_improvement_loss(prob, x, gt, orig, hyper.improvement_scale).value;
    };
    const auto lv = losses::text_improvement_loss(prob, h, gt, orig, hyper.improvement_scale);
    t.add(losses::finite_difference_check(fn, h, lv.gradients[0], kStep, tol, kAbsFloor));
  }
  return t.s;
}

GradcheckSummary check_seg_improvement(std::size_t points, std::uint64_t seed, double tol,
                                       const losses::PreferenceHyper& hyper) {
  auto t = start("seg_improvement_loss");
  for (std::size_t p = 0; p < points; ++p) {
    Rng rng(derive_seed(seed, "seg_improvement", p));
    const int n = rng.uniform_int(1, 3);
    const int k = rng.uniform_int(1, 3);
    VectorXd refined(n);
    for (int i = 0; i < n; ++i) refined(i) = 0.01 + 0.98 * rng.uniform();
    std::vector<std::vector<double>> orig(static_cast<std::size_t>(k));
    for (auto& row : orig) {
      for (int i = 0; i < n; ++i) row.push_back(rng.uniform());
    }
    auto fn = [&](const VectorXd& x) {
      std::vector<double> r(x.data(), x.data() + x.size());
      return losses::seg_improvement_loss(r, orig, hyper.improvement_scale).value;
    };
    std::vector<double> r(refined.data(), refined.data() + n);
    const auto lv = losses::seg_improvement_loss(r, orig, hyper.improvement_scale);
    t.add(losses::finite_difference_check(fn, refined, lv.gradients[0], kStep, tol, kAbsFloor));
  }
  return t.s;
}

/// Coordinates (tensor, row, col) of the parameter vector.
struct Coord {
  int id;
  Eigen::Index r;
  Eigen::Index c;
};

std::vector<Coord> pick_coords(const toy::ModelParams& p, const toy::Trainable& trainable,
                               std::size_t count, Rng& rng) {
  std::vector<Coord> all;
  for (int id = 0; id < toy::kParamCount; ++id) {
    if (!trainable[id]) continue;
    for (Eigen::Index r = 0; r < p[id].rows(); ++r) {
      for (Eigen::Index c = 0; c < p[id].cols(); ++c) all.push_back({id, r, c});
    }
  }
  std::vector<Coord> out;
  for (std::size_t i = 0; i < count && !all.empty(); ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(all.size()) - 1));
    out.push_back(all[j]);
    all.erase(all.begin() + static_cast<std::ptrdiff_t>(j));
  }
  return out;
}

using ModelLoss = std::function<double(const toy::ModelParams&, toy::ModelParams*)>;

losses::GradCheckReport check_model_loss(const toy::ModelParams& params,
                                         const toy::Trainable& trainable,
                                         const ModelLoss& loss, std::size_t coords, Rng& rng,
                                         double tol) {
  auto grads = toy::ModelParams::zeros_like(params);
  loss(params, &grads);
  const auto picked = pick_coords(params, trainable, coords, rng);
  VectorXd point(static_cast<Eigen::Index>(picked.size()));
  VectorXd analytic(static_cast<Eigen::Index>(picked.size()));
  for (std::size_t i = 0; i < picked.size(); ++i) {
    const auto& c = picked[i];
    point(static_cast<Eigen::Index>(i)) = params[c.id](c.r, c.c);
    analytic(static_cast<Eigen::Index>(i)) = grads[c.id](c.r, c.c);
  }
  auto fn = [&](const VectorXd& x) {
    auto copy = params;
    for (std::size_t i = 0; i < picked.size(); ++i) {
      copy[picked[i].id](picked[i].r, picked[i].c) = x(static_cast<Eigen::Index>(i));
    }
    return loss(copy, nullptr);
  };
  return losses::finite_difference_check(fn, point, analytic, kStep, tol, kModelAbsFloor);
}

std::vector<GradcheckSummary> check_model(std::size_t instances, std::uint64_t seed, double tol,
                                          const losses::PreferenceHyper& hyper) {
  constexpr std::size_t kCoords = 24;
  toy::ModelConfig cfg;
  toy::SceneConfig scene;
  auto sup = start("model.supervised");
  auto fused = start("model.fused_supervised");
  auto pref = start("model.preference");
  auto ens = start("model.ensemble");
  const auto all = toy::all_trainable();
  for (std::size_t p = 0; p < instances; ++p) {
    Rng rng(derive_seed(seed, "model", p));
    auto params = toy::ModelParams::init(cfg, rng.next_u64());
    // Tensors that start at zero get random values too, so every path of the
    // graph carries gradient at the probe point.
    for (auto& t : params.tensors) {
      if (!t.isZero(0.0)) continue;
      for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, 0.3);
    }
    Rng srng(rng.next_u64());
    const Sample sample = toy::synth_sample(cfg, scene, srng);
    const toy::ToyModel model(cfg, params);

    sup.add(check_model_loss(
        params, all,
        [&](const toy::ModelParams& q, toy::ModelParams* g) {
          return toy::supervised_loss(cfg, q, sample, 1.0, g, all);
        },
        kCoords, rng, tol));

    std::vector<ScoredResponse> responses;
    std::vector<std::vector<Mask>> masks;
    for (const auto& o : toy::sample_responses(model, sample.image, sample.instruction, 3,
                                               rng.next_u64())) {
      responses.push_back(o.response);
      masks.push_back(o.masks);
    }
    fused.add(check_model_loss(
        params, all,
        [&](const toy::ModelParams& q, toy::ModelParams* g) {
          return toy::fused_supervised_loss(cfg, q, sample, responses, 1.0, g, all);
        },
        kCoords, rng, tol));

    const collect::SyntheticCorruptionOracle oracle(cfg.classes);
    const auto text = collect::collect_text_preference(sample, model, oracle, rng.next_u64());
    collect::SegCollectConfig cc;
    cc.n_p = 6;
    const auto seg_res = collect::collect_seg_preference(
        sample, model, sample.object_masks, collect::Phase::kBoundary, cc, rng.next_u64());
    const auto& seg = std::get<collect::SegPreferenceSample>(seg_res);
    // A perturbed reference makes the text margin nonzero.
    auto ref_params = params;
    ref_params[toy::kHeadW] *= 0.9;
    const toy::ToyModel ref(cfg, ref_params);
    const auto ref_y = ref.score(text.image, text.instruction, text.y).logps;
    const auto ref_yc = ref.score(text.image, text.instruction, text.y_c).logps;
    const auto band = default_band_width(cfg.grid, cfg.grid);
    const auto pt = toy::preference_trainable();
    pref.add(check_model_loss(
        params, pt,
        [&](const toy::ModelParams& q, toy::ModelParams* g) {
          const auto terms = toy::preference_terms(cfg, q, text, ref_y, ref_yc, seg, sample,
                                                   sample, band, hyper, toy::TrainOptions{}, responses, g,
                                                   pt);
          return terms.l_t + terms.l_s + terms.l_ce;
        },
        kCoords, rng, tol));

    const auto table = toy::text_embedder_table(rng.next_u64());
    const auto et = toy::ensemble_trainable();
    ens.add(check_model_loss(
        params, et,
        [&](const toy::ModelParams& q, toy::ModelParams* g) {
          const auto terms = toy::ensemble_terms(cfg, q, sample, responses, masks, table, hyper,
                                                 g, et, 1.0, 0.5);
          return terms.l_ti + terms.l_si;
        },
        kCoords, rng, tol));
  }
  return {sup.s, fused.s, pref.s, ens.s};
}

}  // namespace

std::vector<GradcheckSummary> run_gradcheck(std::size_t points, std::uint64_t seed,
                                            double tolerance) {
  if (points < 1) throw ConfigError("gradcheck needs at least one point");
  const losses::PreferenceHyper hyper;
  std::vector<GradcheckSummary> out{
      check_text_dpo(points, seed, tolerance, hyper),
      check_seg_preference(points, seed, tolerance, hyper),
      check_text_improvement(points, seed, tolerance, hyper),
      check_seg_improvement(points, seed, tolerance, hyper)};
  const std::size_t instances = std::max<std::size_t>(1, points / 10);
  for (auto& s : check_model(instances, seed, tolerance, hyper)) out.push_back(std::move(s));
  return out;
}

std::vector<GradcheckSummary> cmd_gradcheck(const RunConfig& cfg, std::size_t points) {
  return run_gradcheck(points, derive_seed(cfg.seed, "gradcheck"));
}

}  // namespace prefseg::pipeline
