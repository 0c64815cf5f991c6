#include "prefseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

#include "prefseg/error.hpp"
#include "prefseg/io.hpp"

namespace prefseg::toy {

namespace fs = std::filesystem;

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << v;
  return s.str();
}

namespace {

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t out = 0;
  for (int i = 0; i < 8; ++i) out |= ((v >> (8 * i)) & 0xffULL) << (8 * (7 - i));
  return out;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  ckpt.params.validate(ckpt.config);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string());
  nlohmann::json tensors = nlohmann::json::array();
  for (int id = 0; id < kParamCount; ++id) {
    const auto& t = ckpt.params[id];
    std::vector<std::uint64_t> words;
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.cols(); ++c) {
        words.push_back(to_le(std::bit_cast<std::uint64_t>(t(r, c))));
      }
    }
    const std::string file = std::string(param_name(id)) + ".f64";
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(words.data()),
              static_cast<std::streamsize>(words.size() * sizeof(std::uint64_t)));
    if (!out) throw IoError("cannot write " + (dir / file).string());
    tensors.push_back({{"name", param_name(id)},
                       {"rows", t.rows()},
                       {"cols", t.cols()},
                       {"file", file},
                       {"hash", hex64(ckpt.params.tensor_hash(id))}});
  }
  nlohmann::json manifest = {{"config_hash", ckpt.meta.config_hash},
                             {"stage", ckpt.meta.stage},
                             {"step", ckpt.meta.step},
                             {"seed", ckpt.meta.seed},
                             {"model", ckpt.config.to_json()},
                             {"params_hash", hex64(ckpt.params.hash())},
                             {"tensors", tensors}};
  io::write_json(dir / "manifest.json", manifest);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) {
    throw IoError("no checkpoint manifest in " + dir.string());
  }
  const auto manifest = io::read_json(dir / "manifest.json");
  Checkpoint ckpt;
  try {
    ckpt.meta.config_hash = manifest.at("config_hash").get<std::string>();
    ckpt.meta.stage = manifest.at("stage").get<std::string>();
    ckpt.meta.step = manifest.at("step").get<std::size_t>();
    ckpt.meta.seed = manifest.at("seed").get<std::uint64_t>();
    ckpt.config = ModelConfig::from_json(manifest.at("model"));
    for (const auto& t : manifest.at("tensors")) {
      const int id = param_from_name(t.at("name").get<std::string>());
      const auto rows = t.at("rows").get<Eigen::Index>();
      const auto cols = t.at("cols").get<Eigen::Index>();
      const fs::path file = dir / t.at("file").get<std::string>();
      std::ifstream in(file, std::ios::binary);
      if (!in) throw IoError("cannot read " + file.string());
      std::vector<std::uint64_t> words(static_cast<std::size_t>(rows * cols));
      in.read(reinterpret_cast<char*>(words.data()),
              static_cast<std::streamsize>(words.size() * sizeof(std::uint64_t)));
      if (in.gcount() != static_cast<std::streamsize>(words.size() * sizeof(std::uint64_t)) ||
          in.peek() != std::char_traits<char>::eof()) {
        throw IoError("tensor blob " + file.string() + " has the wrong size");
      }
      Eigen::MatrixXd m(rows, cols);
      std::size_t k = 0;
      for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = std::bit_cast<double>(to_le(words[k++]));
      }
      ckpt.params[id] = std::move(m);
      if (hex64(ckpt.params.tensor_hash(id)) != t.at("hash").get<std::string>()) {
        throw InvariantError("tensor " + file.string() + " does not match its recorded hash");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  ckpt.params.validate(ckpt.config);
  return ckpt;
}

}  // namespace prefseg::toy
