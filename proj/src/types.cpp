#include "prefseg/types.hpp"

#include <cmath>
#include <string>

namespace prefseg {

const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kGeometry: return "geometry";
    case ErrorKind::kIndex: return "index";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kLayout: return "layout";
    case ErrorKind::kStructure: return "structure";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kInvariant: return "invariant";
  }
  return "unknown";
}

Image::Image(int height, int width, double fill)
    : Image(height, width,
            std::vector<double>(static_cast<std::size_t>(
                                    height > 0 && width > 0 ? height * width : 0),
                                fill)) {}

Image::Image(int height, int width, std::vector<double> values)
    : height_(height), width_(width), values_(std::move(values)) {
  if (height < 1 || width < 1) {
    throw ShapeError("image dimensions must be positive");
  }
  if (values_.size() != static_cast<std::size_t>(height) * width) {
    throw ShapeError("image value count " + std::to_string(values_.size()) +
                     " does not match " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  for (double v : values_) {
    if (!std::isfinite(v)) throw NumericError("image values must be finite");
  }
}

std::vector<Span> split_sentences(const TokenSeq& tokens) {
  std::vector<Span> spans;
  std::size_t begin = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == vocab::kEndOfSentence) {
      spans.push_back({begin, i + 1});
      begin = i + 1;
    }
  }
  if (begin < tokens.size()) spans.push_back({begin, tokens.size()});
  return spans;
}

std::vector<std::size_t> seg_positions(const TokenSeq& tokens) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == vocab::kSeg) out.push_back(i);
  }
  return out;
}

void validate_response(const ScoredResponse& r) {
  if (r.tokens.empty()) throw ShapeError("response has no tokens");
  if (r.logps.size() != r.tokens.size()) {
    throw ShapeError("response log-probability count differs from token count");
  }
  std::size_t expected = 0;
  for (const auto& s : r.sentence_spans) {
    if (s.begin != expected || s.end <= s.begin) {
      throw StructureError("sentence spans do not partition the response");
    }
    expected = s.end;
  }
  if (expected != r.tokens.size()) {
    throw StructureError("sentence spans do not cover the response");
  }
  for (std::size_t p : r.seg_positions) {
    if (p >= r.tokens.size()) {
      throw StructureError("<seg> position outside every sentence span");
    }
  }
}

}  // namespace prefseg
