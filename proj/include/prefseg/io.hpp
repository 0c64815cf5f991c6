#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "prefseg/mask.hpp"
#include "prefseg/sample.hpp"
#include "prefseg/types.hpp"

namespace prefseg::io {

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

void write_json(const std::filesystem::path& path, const nlohmann::json& doc);
nlohmann::json read_json(const std::filesystem::path& path);

void write_mask_file(const std::filesystem::path& path, const Mask& m);
Mask read_mask_file(const std::filesystem::path& path);

nlohmann::json image_to_json(const Image& img);
Image image_from_json(const nlohmann::json& doc);

nlohmann::json embedding_to_json(const Embedding& e);
Embedding embedding_from_json(const nlohmann::json& doc);

/// Sample record: JSON for the image and tokens; masks as sibling files
/// named <stem>_gt<n>.mask and <stem>_obj<n>.mask.
void save_sample(const std::filesystem::path& dir, const std::string& stem,
                 const Sample& s);
Sample load_sample(const std::filesystem::path& dir, const std::string& stem);

/// Zero-padded decimal, e.g. padded(7, 5) == "00007".
std::string padded(std::size_t value, int width = 5);

}  // namespace prefseg::io
