#include "prefseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "prefseg/error.hpp"

namespace prefseg::metrics {

ObjectSet mentioned_objects(const TokenSeq& tokens) {
  ObjectSet out;
  for (TokenId t : tokens) {
    if (vocab::is_object(t)) out.insert(vocab::object_class(t));
  }
  return out;
}

ChairResult chair(std::span<const ChairInput> responses) {
  if (responses.empty()) throw ShapeError("chair: no responses");
  std::size_t hallucinating_responses = 0;
  std::size_t hallucinated = 0;
  std::size_t mentioned = 0;
  for (const auto& r : responses) {
    std::size_t bad = 0;
    for (int obj : r.mentioned) {
      if (!r.ground_truth.contains(obj)) ++bad;
    }
    mentioned += r.mentioned.size();
    hallucinated += bad;
    if (bad > 0) ++hallucinating_responses;
  }
  ChairResult out;
  out.c_s = static_cast<double>(hallucinating_responses) /
            static_cast<double>(responses.size());
  if (mentioned > 0) {
    out.c_i = static_cast<double>(hallucinated) / static_cast<double>(mentioned);
  }
  return out;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("pearson: length mismatch");
  if (x.size() < 2) throw ShapeError("pearson: need at least two points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw NumericError("pearson: zero variance sequence");
  }
  const double r = sxy / (std::sqrt(sxx) * std::sqrt(syy));
  return std::clamp(r, -1.0, 1.0);
}

IouAggregate aggregate_iou(std::span<const MaskPair> pairs) {
  if (pairs.empty()) throw ShapeError("aggregate_iou: no pairs");
  double sum = 0.0;
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (const auto& p : pairs) {
    sum += iou(p.predicted, p.ground_truth);
    inter += p.predicted.intersection_count(p.ground_truth);
    uni += p.predicted.union_count(p.ground_truth);
  }
  IouAggregate out;
  out.giou = sum / static_cast<double>(pairs.size());
  out.ciou = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  return out;
}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> optional_from(const nlohmann::json& doc, const char* key) {
  if (!doc.contains(key) || doc.at(key).is_null()) return std::nullopt;
  return doc.at(key).get<double>();
}

}  // namespace

nlohmann::json to_json(const MetricsReport& report) {
  return {
      {"c_s", report.c_s},
      {"c_i", optional_json(report.c_i)},
      {"giou", report.giou},
      {"ciou", report.ciou},
      {"pearson_r", optional_json(report.pearson_r)},
      {"responses", report.responses},
      {"targets", report.targets},
  };
}

MetricsReport report_from_json(const nlohmann::json& doc) {
  MetricsReport r;
  r.c_s = doc.at("c_s").get<double>();
  r.c_i = optional_from(doc, "c_i");
  r.giou = doc.at("giou").get<double>();
  r.ciou = doc.at("ciou").get<double>();
  r.pearson_r = optional_from(doc, "pearson_r");
  r.responses = doc.value("responses", std::size_t{0});
  r.targets = doc.value("targets", std::size_t{0});
  return r;
}

void validate(const MetricsReport& r) {
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!unit(r.c_s) || !unit(r.giou) || !unit(r.ciou) ||
      (r.c_i && !unit(*r.c_i))) {
    throw InvariantError("metrics report ratio outside [0, 1]");
  }
  if (r.pearson_r && (*r.pearson_r < -1.0 || *r.pearson_r > 1.0)) {
    throw InvariantError("pearson_r outside [-1, 1]");
  }
}

std::string csv_header() { return "label,c_s,c_i,giou,ciou,pearson_r"; }

std::string csv_row(const std::string& label, const MetricsReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << label << ',' << r.c_s << ',';
  if (r.c_i) out << *r.c_i;
  out << ',' << r.giou << ',' << r.ciou << ',';
  if (r.pearson_r) out << *r.pearson_r;
  return out.str();
}

}  // namespace prefseg::metrics
