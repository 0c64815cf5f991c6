#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <set>
#include <string>
#include <utility>
#include <vector>

#include "prefseg/collect.hpp"
#include "prefseg/ensemble.hpp"
#include "prefseg/error.hpp"
#include "prefseg/losses.hpp"
#include "prefseg/mask.hpp"
#include "prefseg/metrics.hpp"
#include "prefseg/pipeline.hpp"

namespace py = pybind11;
using namespace prefseg;

namespace {

using BoolArray = py::array_t<bool, py::array::c_style | py::array::forcecast>;

Mask to_mask(const BoolArray& a) {
  if (a.ndim() != 2) throw ShapeError("mask arrays must be two-dimensional");
  const auto h = static_cast<int>(a.shape(0));
  const auto w = static_cast<int>(a.shape(1));
  Mask m(h, w);
  auto r = a.unchecked<2>();
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) m.set(i, j, r(i, j));
  return m;
}

BoolArray from_mask(const Mask& m) {
  BoolArray out({m.height(), m.width()});
  auto w = out.mutable_unchecked<2>();
  for (int i = 0; i < m.height(); ++i)
    for (int j = 0; j < m.width(); ++j) w(i, j) = m.get(i, j);
  return out;
}

BandWidth band_for(const Mask& m, std::optional<int> width) {
  return width ? BandWidth(*width) : default_band_width(m.height(), m.width());
}

py::tuple loss_tuple(const losses::LossValue& v) {
  std::vector<Eigen::VectorXd> grads(v.gradients.begin(), v.gradients.end());
  return py::make_tuple(v.value, grads);
}

pipeline::RunConfig make_config(const std::string& config_json, const std::string& out_dir) {
  auto cfg = pipeline::config_from_json(nlohmann::json::parse(config_json));
  cfg.out_dir = out_dir;
  cfg.validate();
  return cfg;
}

py::dict report_dict(const metrics::MetricsReport& r) {
  py::dict d;
  d["giou"] = r.giou;
  d["ciou"] = r.ciou;
  d["c_s"] = r.c_s;
  d["c_i"] = r.c_i ? py::cast(*r.c_i) : py::none();
  d["pearson_r"] = r.pearson_r ? py::cast(*r.pearson_r) : py::none();
  d["responses"] = r.responses;
  d["targets"] = r.targets;
  return d;
}

}  // namespace

PYBIND11_MODULE(_prefseg, m) {
  m.doc() = "Preference-optimized reasoning segmentation on a toy segmenter";

  static py::exception<Error> error(m, "Error");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error, (std::string(error_kind_name(e.kind())) + ": " + e.what()).c_str());
    }
  });

  m.def("iou", [](const BoolArray& a, const BoolArray& b) { return iou(to_mask(a), to_mask(b)); },
        py::arg("a"), py::arg("b"));
  m.def(
      "boundary_band",
      [](const BoolArray& a, std::optional<int> width) {
        const Mask mask = to_mask(a);
        return from_mask(boundary_band(mask, band_for(mask, width)));
      },
      py::arg("mask"), py::arg("width") = py::none());
  m.def(
      "boundary_iou",
      [](const BoolArray& a, const BoolArray& b, std::optional<int> width) {
        const Mask ma = to_mask(a);
        return boundary_iou(ma, to_mask(b), band_for(ma, width));
      },
      py::arg("a"), py::arg("b"), py::arg("width") = py::none());

  m.def(
      "chair",
      [](const std::vector<std::pair<std::set<int>, std::set<int>>>& responses) {
        std::vector<metrics::ChairInput> in;
        for (const auto& [mentioned, gt] : responses) in.push_back({mentioned, gt});
        const auto r = metrics::chair(in);
        return py::make_tuple(r.c_s, r.c_i ? py::cast(*r.c_i) : py::none());
      },
      py::arg("responses"), "(C_S, C_I) over (mentioned, ground_truth) object-id sets");
  m.def("pearson", [](const std::vector<double>& x, const std::vector<double>& y) {
    return metrics::pearson(x, y);
  });
  m.def(
      "aggregate_iou",
      [](const std::vector<std::pair<BoolArray, BoolArray>>& pairs) {
        std::vector<metrics::MaskPair> in;
        for (const auto& [p, g] : pairs) in.push_back({to_mask(p), to_mask(g)});
        const auto r = metrics::aggregate_iou(in);
        return py::make_tuple(r.giou, r.ciou);
      },
      py::arg("pairs"), "(gIoU, cIoU) over (predicted, ground_truth) mask pairs");

  m.def(
      "text_dpo_loss",
      [](const std::vector<double>& policy_yc, const std::vector<double>& policy_y,
         const std::vector<double>& ref_yc, const std::vector<double>& ref_y,
         const IndexList& l_y, const IndexList& l_yc, double beta_t, double lambda) {
        losses::PreferenceHyper h;
        h.beta_t = beta_t;
        h.lambda = lambda;
        return loss_tuple(losses::text_dpo_loss(policy_yc, policy_y, ref_yc, ref_y, l_y, l_yc, h));
      },
      py::arg("policy_yc"), py::arg("policy_y"), py::arg("ref_yc"), py::arg("ref_y"),
      py::arg("l_y"), py::arg("l_yc"), py::arg("beta_t") = 0.5, py::arg("lam") = 5.0);
  m.def(
      "seg_preference_loss",
      [](const Embedding& policy_mid, const Embedding& ref_best, const Embedding& ref_mid,
         const Embedding& ref_worst, bool indicator_active, double beta_s) {
        return loss_tuple(losses::seg_preference_loss(policy_mid, ref_best, ref_mid, ref_worst,
                                                      indicator_active, beta_s));
      },
      py::arg("policy_mid"), py::arg("ref_best"), py::arg("ref_mid"), py::arg("ref_worst"),
      py::arg("indicator_active") = true, py::arg("beta_s") = 10.0);
  m.def(
      "text_improvement_loss",
      [](double refined_prob, const Embedding& h_refined, const Embedding& h_gt,
         const std::vector<Embedding>& h_originals, double scale) {
        return loss_tuple(
            losses::text_improvement_loss(refined_prob, h_refined, h_gt, h_originals, scale));
      },
      py::arg("refined_prob"), py::arg("h_refined"), py::arg("h_gt"), py::arg("h_originals"),
      py::arg("scale") = 10.0);
  m.def(
      "seg_improvement_loss",
      [](const std::vector<double>& refined, const std::vector<std::vector<double>>& original,
         double scale) { return loss_tuple(losses::seg_improvement_loss(refined, original, scale)); },
      py::arg("refined_ious"), py::arg("original_ious"), py::arg("scale") = 10.0);

  m.def(
      "biased_attention",
      [](const Eigen::MatrixXd& q, const Eigen::MatrixXd& k, const Eigen::MatrixXd& v,
         const std::vector<double>& gamma) {
        const auto r = ensemble::biased_attention(q, k, v, static_cast<double>(q.cols()), gamma);
        return py::make_tuple(r.weights, r.output);
      },
      py::arg("queries"), py::arg("keys"), py::arg("values"), py::arg("gamma"),
      "(weights, output) of softmax(QK^T/sqrt(d) + gamma) V");

  m.def(
      "gradcheck",
      [](std::size_t points, std::uint64_t seed) {
        py::list out;
        for (const auto& s : pipeline::run_gradcheck(points, seed)) {
          py::dict d;
          d["name"] = s.name;
          d["points"] = s.points;
          d["max_relative_error"] = s.max_relative_error;
          d["passed"] = s.passed;
          out.append(d);
        }
        return out;
      },
      py::arg("points") = 100, py::arg("seed") = 0);

  m.def("default_config_json", [] {
    return pipeline::config_to_json(pipeline::RunConfig{}).dump();
  });
  m.def("config_hash", [](const std::string& config_json) {
    return pipeline::config_hash(make_config(config_json, "run"));
  });
  m.def("synth", [](const std::string& cfg, const std::string& out) {
    pipeline::cmd_synth(make_config(cfg, out));
  });
  m.def("collect", [](const std::string& cfg, const std::string& out, const std::string& phase) {
    const auto ds = pipeline::cmd_collect(make_config(cfg, out), collect::phase_from_name(phase));
    py::dict d;
    d["emitted"] = ds.seg.size();
    d["skipped"] = ds.skipped.size();
    d["text_pairs"] = ds.text.size();
    return d;
  });
  m.def("train", [](const std::string& cfg, const std::string& out, const std::string& stage) {
    const auto trace = pipeline::cmd_train(make_config(cfg, out), toy::stage_from_name(stage));
    std::vector<double> totals;
    for (const auto& r : trace) totals.push_back(r.total);
    return totals;
  });
  m.def(
      "evaluate",
      [](const std::string& cfg, const std::string& out, const std::string& stage, bool ensemble,
         bool pearson) {
        return report_dict(pipeline::cmd_eval(make_config(cfg, out), toy::stage_from_name(stage),
                                              ensemble, pearson));
      },
      py::arg("config"), py::arg("out"), py::arg("stage"), py::arg("ensemble") = false,
      py::arg("pearson") = false);
  m.def("report", [](const std::string& cfg, const std::string& out) {
    return pipeline::cmd_report(make_config(cfg, out)).dump();
  });
}
