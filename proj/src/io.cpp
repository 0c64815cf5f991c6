#include "prefseg/io.hpp"

#include <fstream>
#include <sstream>

#include "prefseg/error.hpp"

namespace prefseg::io {

namespace fs = std::filesystem;

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_json(const fs::path& path, const nlohmann::json& doc) {
  write_text(path, doc.dump(2) + "\n");
}

nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_mask_file(const fs::path& path, const Mask& m) {
  write_text(path, mask_to_string(m));
}

Mask read_mask_file(const fs::path& path) { return mask_from_string(read_text(path)); }

nlohmann::json image_to_json(const Image& img) {
  return {{"height", img.height()},
          {"width", img.width()},
          {"values", std::vector<double>(img.values().begin(), img.values().end())}};
}

Image image_from_json(const nlohmann::json& doc) {
  return Image(doc.at("height").get<int>(), doc.at("width").get<int>(),
               doc.at("values").get<std::vector<double>>());
}

nlohmann::json embedding_to_json(const Embedding& e) {
  return std::vector<double>(e.data(), e.data() + e.size());
}

Embedding embedding_from_json(const nlohmann::json& doc) {
  const auto v = doc.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

void save_sample(const fs::path& dir, const std::string& stem, const Sample& s) {
  nlohmann::json doc = {{"instruction", s.instruction},
                        {"gt_response", s.gt_response},
                        {"targets", s.gt_masks.size()},
                        {"objects", s.object_masks.size()},
                        {"image", image_to_json(s.image)}};
  write_json(dir / (stem + ".json"), doc);
  for (std::size_t n = 0; n < s.gt_masks.size(); ++n) {
    write_mask_file(dir / (stem + "_gt" + std::to_string(n) + ".mask"), s.gt_masks[n]);
  }
  for (std::size_t j = 0; j < s.object_masks.size(); ++j) {
    write_mask_file(dir / (stem + "_obj" + std::to_string(j) + ".mask"),
                    s.object_masks[j]);
  }
}

Sample load_sample(const fs::path& dir, const std::string& stem) {
  const auto doc = read_json(dir / (stem + ".json"));
  Sample s;
  s.instruction = doc.at("instruction").get<int>();
  s.gt_response = doc.at("gt_response").get<TokenSeq>();
  s.image = image_from_json(doc.at("image"));
  const auto targets = doc.at("targets").get<std::size_t>();
  const auto objects = doc.at("objects").get<std::size_t>();
  for (std::size_t n = 0; n < targets; ++n) {
    s.gt_masks.push_back(read_mask_file(dir / (stem + "_gt" + std::to_string(n) + ".mask")));
  }
  for (std::size_t j = 0; j < objects; ++j) {
    s.object_masks.push_back(
        read_mask_file(dir / (stem + "_obj" + std::to_string(j) + ".mask")));
  }
  s.validate();
  return s;
}

std::string padded(std::size_t value, int width) {
  std::string s = std::to_string(value);
  if (static_cast<int>(s.size()) < width) s.insert(0, width - s.size(), '0');
  return s;
}

}  // namespace prefseg::io
