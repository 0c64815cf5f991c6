#pragma once

#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prefseg/mask.hpp"
#include "prefseg/types.hpp"

namespace prefseg::metrics {

/// Object identifiers mentioned in (or present in) one response.
using ObjectSet = std::set<int>;

/// Object classes mentioned by a response, one entry per distinct object token.
ObjectSet mentioned_objects(const TokenSeq& tokens);

struct ChairResult {
  double c_s = 0.0;
  /// Absent when no response mentions any object.
  std::optional<double> c_i;
};

struct ChairInput {
  ObjectSet mentioned;
  ObjectSet ground_truth;
};

/// CHAIR sentence- and instance-level hallucination rates.
ChairResult chair(std::span<const ChairInput> responses);

/// Pearson correlation coefficient of two equally sized sequences.
double pearson(std::span<const double> x, std::span<const double> y);

struct IouAggregate {
  double giou = 0.0;
  double ciou = 0.0;
};

struct MaskPair {
  Mask predicted;
  Mask ground_truth;
};

/// gIoU is the mean per-pair IoU; cIoU is cumulative intersection over
/// cumulative union.
IouAggregate aggregate_iou(std::span<const MaskPair> pairs);

struct MetricsReport {
  double c_s = 0.0;
  std::optional<double> c_i;
  double giou = 0.0;
  double ciou = 0.0;
  std::optional<double> pearson_r;
  std::size_t responses = 0;
  std::size_t targets = 0;
};

/// Flat key-value document. Absent optionals serialize as null.
nlohmann::json to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& doc);
/// Throws InvariantError when a field is outside its documented range.
void validate(const MetricsReport& report);

std::string csv_header();
std::string csv_row(const std::string& label, const MetricsReport& report);

}  // namespace prefseg::metrics
