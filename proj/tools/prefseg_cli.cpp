#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <optional>

#include "prefseg/error.hpp"
#include "prefseg/io.hpp"
#include "prefseg/pipeline.hpp"

namespace {

using namespace prefseg;
namespace fs = std::filesystem;

struct Overrides {
  std::string config_file;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> train_samples;
  std::optional<std::size_t> val_samples;
  std::optional<std::size_t> k;
  std::optional<std::size_t> sft_steps;
  std::optional<std::size_t> preference_steps;
  std::optional<std::size_t> ensemble_steps;
  std::optional<double> lr;
  std::optional<std::size_t> batch;
  std::optional<std::size_t> n_p;
  std::optional<std::size_t> max_rounds;
  std::optional<double> sigma;
  std::optional<int> band_width;
  std::optional<double> beta_t;
  std::optional<double> beta_s;
  std::optional<double> lambda;
  bool single_criterion = false;

  void attach(CLI::App& app) {
    app.add_option("--config", config_file, "JSON run config supplying defaults");
    app.add_option("--out", out, "output directory");
    app.add_option("--seed", seed, "root seed");
    app.add_option("--train-samples", train_samples);
    app.add_option("--val-samples", val_samples);
    app.add_option("--k", k, "responses fused by the ensemble");
    app.add_option("--sft-steps", sft_steps);
    app.add_option("--preference-steps", preference_steps);
    app.add_option("--ensemble-steps", ensemble_steps);
    app.add_option("--lr", lr);
    app.add_option("--batch", batch);
    app.add_option("--n-p", n_p, "perturbations per collection round");
    app.add_option("--max-rounds", max_rounds);
    app.add_option("--sigma", sigma, "perturbation noise level");
    app.add_option("--band-width", band_width, "boundary band width in pixels (0: default)");
    app.add_option("--beta-t", beta_t);
    app.add_option("--beta-s", beta_s);
    app.add_option("--lambda", lambda);
    app.add_flag("--single-criterion", single_criterion,
                 "use localization triples for both halves of preference finetuning");
  }

  pipeline::RunConfig resolve() const {
    pipeline::RunConfig cfg;
    if (!config_file.empty()) cfg = pipeline::config_from_json(io::read_json(config_file), cfg);
    if (out) cfg.out_dir = *out;
    if (seed) cfg.seed = *seed;
    if (train_samples) cfg.train_samples = *train_samples;
    if (val_samples) cfg.val_samples = *val_samples;
    if (k) cfg.k = *k;
    if (sft_steps) cfg.sft_steps = *sft_steps;
    if (preference_steps) cfg.preference_steps = *preference_steps;
    if (ensemble_steps) cfg.ensemble_steps = *ensemble_steps;
    if (lr) cfg.train.lr = *lr;
    if (batch) cfg.train.batch = *batch;
    if (n_p) cfg.collect.n_p = *n_p;
    if (max_rounds) cfg.collect.max_rounds = *max_rounds;
    if (sigma) cfg.collect.sigma = *sigma;
    if (band_width) {
      cfg.collect.band.reset();
      if (*band_width > 0) cfg.collect.band.emplace(*band_width);
    }
    if (beta_t) cfg.hyper.beta_t = *beta_t;
    if (beta_s) cfg.hyper.beta_s = *beta_s;
    if (lambda) cfg.hyper.lambda = *lambda;
    if (single_criterion) cfg.curriculum = false;
    cfg.validate();
    return cfg;
  }
};

void print_report(const std::string& label, const metrics::MetricsReport& r) {
  std::cout << label << ": gIoU " << r.giou << "  cIoU " << r.ciou << "  C_S " << r.c_s;
  if (r.c_i) std::cout << "  C_I " << *r.c_i;
  if (r.pearson_r) std::cout << "  pearson(eta, IoU) " << *r.pearson_r;
  std::cout << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Preference-optimized reasoning segmentation on a toy segmenter"};
  app.require_subcommand(1);
  Overrides ov;
  ov.attach(app);

  auto* synth = app.add_subcommand("synth", "write the train/val synthetic datasets");
  auto* collect_cmd = app.add_subcommand("collect", "collect preference data on the SFT model");
  std::string phase = "localization";
  collect_cmd->add_option("--phase", phase, "localization or boundary")
      ->check(CLI::IsMember({"localization", "boundary"}));
  auto* train = app.add_subcommand("train", "run one training stage");
  std::string stage = "sft";
  train->add_option("--stage", stage, "sft, preference or ensemble")
      ->check(CLI::IsMember({"sft", "preference", "ensemble"}));
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the validation split");
  std::string eval_stage = "preference";
  bool ensemble = false;
  bool pearson = false;
  eval->add_option("--stage", eval_stage, "checkpoint stage to evaluate")
      ->check(CLI::IsMember({"sft", "preference", "ensemble"}));
  eval->add_flag("--ensemble", ensemble, "fuse K sampled responses");
  eval->add_flag("--pearson", pearson, "emit the eta versus IoU correlation analysis");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  std::size_t points = 100;
  grad->add_option("--points", points, "random points per loss");
  auto* report = app.add_subcommand("report", "collect evaluation reports and plot data");

  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = ov.resolve();
    if (synth->parsed()) {
      pipeline::cmd_synth(cfg);
      std::cout << "wrote " << cfg.train_samples << " train and " << cfg.val_samples
                << " val samples to " << (cfg.out_dir / "data").string() << '\n';
    } else if (collect_cmd->parsed()) {
      const auto ds = pipeline::cmd_collect(cfg, collect::phase_from_name(phase));
      std::cout << phase << ": " << ds.text.size() << " text pairs, " << ds.seg.size()
                << " segmentation triples, " << ds.skipped.size() << " skipped\n";
    } else if (train->parsed()) {
      const auto trace = pipeline::cmd_train(cfg, toy::stage_from_name(stage));
      std::cout << stage << ": " << trace.size() << " steps, final loss "
                << (trace.empty() ? 0.0 : trace.back().total) << '\n';
    } else if (eval->parsed()) {
      const auto s = toy::stage_from_name(eval_stage);
      print_report(pipeline::eval_label(s, ensemble),
                   pipeline::cmd_eval(cfg, s, ensemble, pearson));
    } else if (grad->parsed()) {
      bool ok = true;
      for (const auto& g : pipeline::cmd_gradcheck(cfg, points)) {
        std::cout << (g.passed ? "PASS " : "FAIL ") << g.name << "  points " << g.points
                  << "  max relative error " << g.max_relative_error << '\n';
        ok = ok && g.passed;
      }
      if (!ok) return static_cast<int>(ErrorKind::kNumeric);
    } else if (report->parsed()) {
      const auto summary = pipeline::cmd_report(cfg);
      std::cout << summary.dump(2) << '\n';
    }
  } catch (const Error& e) {
    std::cerr << "error [" << error_kind_name(e.kind()) << "]: " << e.what() << '\n';
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error [internal]: " << e.what() << '\n';
    return 64;
  }
  return 0;
}
