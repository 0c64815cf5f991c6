#include "prefseg/toy_model.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "prefseg/ensemble.hpp"
#include "prefseg/error.hpp"
#include "prefseg/rng.hpp"

namespace prefseg::toy {

using autograd::Var;
using Eigen::MatrixXd;

void ModelConfig::validate() const {
  if (grid < 4 || patch < 1 || grid % (2 * patch) != 0) {
    throw ConfigError("grid must split into 2x2 quadrants of whole patches");
  }
  if (dim < 1) throw ConfigError("dim must be >= 1");
  if (classes < 2 || classes > vocab::kMaxObjectClasses) {
    throw ConfigError("classes must lie in 2..60");
  }
  if (prompts < 1) throw ConfigError("prompts must be >= 1");
  if (max_targets < 1 || max_targets > 4) throw ConfigError("max_targets must lie in 1..4");
  if (!(feature_width > 0) || !(class_step > 0) || !(init_scale > 0)) {
    throw ConfigError("feature_width, class_step and init_scale must be > 0");
  }
  if (!(class_base > 0) || class_intensity(classes - 1) > 1.0) {
    throw ConfigError("class intensities must lie in (0, 1]");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"grid", grid},
          {"patch", patch},
          {"dim", dim},
          {"classes", classes},
          {"prompts", prompts},
          {"max_targets", max_targets},
          {"class_base", class_base},
          {"class_step", class_step},
          {"feature_width", feature_width},
          {"init_scale", init_scale}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& doc) {
  ModelConfig c;
  c.grid = doc.value("grid", c.grid);
  c.patch = doc.value("patch", c.patch);
  c.dim = doc.value("dim", c.dim);
  c.classes = doc.value("classes", c.classes);
  c.prompts = doc.value("prompts", c.prompts);
  c.max_targets = doc.value("max_targets", c.max_targets);
  c.class_base = doc.value("class_base", c.class_base);
  c.class_step = doc.value("class_step", c.class_step);
  c.feature_width = doc.value("feature_width", c.feature_width);
  c.init_scale = doc.value("init_scale", c.init_scale);
  c.validate();
  return c;
}

TokenId greedy_candidate_object(const MatrixXd& logp_row, int classes,
                                std::span<const ScoredResponse> responses, int n) {
  const auto pos = static_cast<std::size_t>(3 * n);
  std::optional<TokenId> best;
  for (const auto& r : responses) {
    if (pos >= r.tokens.size()) continue;
    const TokenId t = r.tokens[pos];
    if (!vocab::is_object(t) || vocab::object_class(t) >= classes) continue;
    if (!best || logp_row(0, t) > logp_row(0, *best)) best = t;
  }
  return best ? *best : greedy_object(logp_row, classes);
}

namespace {

constexpr const char* kNames[kParamCount] = {
    "patch_embed", "patch_pos",   "instr_embed",   "query_quad", "query_slot",
    "w_q",         "w_k",         "w_v",           "fuse_w_q",   "fuse_w_k",
    "fuse_w_v",    "token_embed", "slot_embed",    "role_embed", "w_in",
    "head_w",      "head_b",      "struct_logits", "embed_w",    "embed_b",
    "decoder_w",   "decoder_b",   "prompts"};

std::pair<int, int> param_shape(const ModelConfig& c, int id) {
  const int d = c.dim;
  switch (id) {
    case kPatchEmbed: return {c.classes, d};
    case kPatchPos: return {c.patches(), d};
    case kInstrEmbed: return {c.instructions(), d};
    case kQueryQuad: return {4, d};
    case kQuerySlot: return {c.max_targets, d};
    case kWq:
    case kWk:
    case kWv:
    case kFuseWq:
    case kFuseWk:
    case kFuseWv:
    case kWin:
    case kEmbedW: return {d, d};
    case kTokenEmbed: return {vocab::kSize, d};
    case kSlotEmbed: return {c.max_targets, d};
    case kRoleEmbed: return {3, d};
    case kHeadW: return {d, vocab::kSize};
    case kHeadB: return {1, vocab::kSize};
    case kStructLogits: return {2, vocab::kSize};
    case kEmbedB: return {1, d};
    case kDecoderW: return {c.classes + 1, d};
    case kDecoderB: return {1, 1};
    case kPrompts: return {c.prompts, d};
    default: throw IndexError("unknown parameter id");
  }
}

bool is_zero_init(int id) {
  return id == kHeadB || id == kStructLogits || id == kEmbedB || id == kDecoderB ||
         id == kFuseWv;
}

}  // namespace

const char* param_name(int id) {
  if (id < 0 || id >= kParamCount) throw IndexError("unknown parameter id");
  return kNames[id];
}

int param_from_name(const std::string& name) {
  for (int i = 0; i < kParamCount; ++i) {
    if (name == kNames[i]) return i;
  }
  throw ConfigError("unknown parameter tensor '" + name + "'");
}

bool is_decoder_param(int id) { return id == kDecoderW || id == kDecoderB; }

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams p;
  for (int id = 0; id < kParamCount; ++id) {
    const auto [r, c] = param_shape(cfg, id);
    p[id] = MatrixXd::Zero(r, c);
    if (is_zero_init(id)) continue;
    Rng rng(derive_seed(seed, kNames[id]));
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < c; ++j) p[id](i, j) = rng.normal(0.0, cfg.init_scale);
    }
  }
  return p;
}

ModelParams ModelParams::zeros_like(const ModelParams& other) {
  ModelParams p;
  for (int id = 0; id < kParamCount; ++id) {
    p[id] = MatrixXd::Zero(other[id].rows(), other[id].cols());
  }
  return p;
}

std::uint64_t ModelParams::tensor_hash(int id) const {
  const auto& t = tensors[id];
  const std::int64_t dims[2] = {t.rows(), t.cols()};
  std::uint64_t h = fnv1a64(dims, sizeof(dims));
  // Column-major storage; hashed as raw IEEE-754 bytes.
  return fnv1a64(t.data(), sizeof(double) * static_cast<std::size_t>(t.size()), h);
}

std::uint64_t ModelParams::hash() const {
  std::uint64_t h = fnv1a64(nullptr, 0);
  for (int id = 0; id < kParamCount; ++id) {
    const std::uint64_t th = tensor_hash(id);
    h = fnv1a64(&th, sizeof(th), h);
  }
  return h;
}

bool ModelParams::finite() const {
  for (const auto& t : tensors) {
    if (!t.allFinite()) return false;
  }
  return true;
}

std::size_t ModelParams::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
  return n;
}

void ModelParams::validate(const ModelConfig& cfg) const {
  for (int id = 0; id < kParamCount; ++id) {
    const auto [r, c] = param_shape(cfg, id);
    if (tensors[id].rows() != r || tensors[id].cols() != c) {
      throw ShapeError(std::string("parameter '") + kNames[id] + "' has shape " +
                       std::to_string(tensors[id].rows()) + "x" +
                       std::to_string(tensors[id].cols()) + ", expected " +
                       std::to_string(r) + "x" + std::to_string(c));
    }
  }
  if (!finite()) throw NumericError("non-finite parameter values");
}

bool ModelParams::operator==(const ModelParams& other) const {
  for (int id = 0; id < kParamCount; ++id) {
    if (tensors[id].rows() != other[id].rows() || tensors[id].cols() != other[id].cols()) {
      return false;
    }
    if (std::memcmp(tensors[id].data(), other[id].data(),
                    sizeof(double) * static_cast<std::size_t>(tensors[id].size())) != 0) {
      return false;
    }
  }
  return true;
}

int target_count(int instruction) {
  if (instruction < 1 || instruction > 15) throw IndexError("instruction must lie in 1..15");
  return std::popcount(static_cast<unsigned>(instruction));
}

int target_quadrant(int instruction, int n) {
  int seen = 0;
  for (int q = 0; q < 4; ++q) {
    if ((instruction >> q) & 1) {
      if (seen == n) return q;
      ++seen;
    }
  }
  throw IndexError("instruction names fewer than " + std::to_string(n + 1) + " targets");
}

VisionFeatures vision_features(const ModelConfig& cfg, const Image& image) {
  if (image.height() != cfg.grid || image.width() != cfg.grid) {
    throw ShapeError("image must be " + std::to_string(cfg.grid) + "x" +
                     std::to_string(cfg.grid));
  }
  const int side = cfg.grid / cfg.patch;
  const double inv = 1.0 / (2.0 * cfg.feature_width * cfg.feature_width);
  VisionFeatures f;
  f.pixel = MatrixXd::Zero(cfg.grid * cfg.grid, cfg.classes + 1);
  f.patch = MatrixXd::Zero(cfg.patches(), cfg.classes);
  for (int r = 0; r < cfg.grid; ++r) {
    for (int c = 0; c < cfg.grid; ++c) {
      const int p = r * cfg.grid + c;
      const double v = image.at(r, c);
      for (int k = 0; k < cfg.classes; ++k) {
        const double delta = v - cfg.class_intensity(k);
        f.pixel(p, k) = std::exp(-delta * delta * inv);
      }
      f.pixel(p, cfg.classes) = 1.0;
      const int patch = (r / cfg.patch) * side + c / cfg.patch;
      f.patch.row(patch) = f.patch.row(patch).cwiseMax(f.pixel.row(p).head(cfg.classes));
    }
  }
  return f;
}

Graph::Graph(const ModelConfig& cfg, const ModelParams& params, ModelParams* grads,
             std::span<const bool> trainable)
    : cfg_(cfg), params_(params), grads_(grads) {
  if (grads != nullptr && trainable.size() != kParamCount) {
    throw ShapeError("trainable flags must cover every parameter tensor");
  }
  for (std::size_t i = 0; i < trainable.size(); ++i) trainable_[i] = trainable[i];
}

Graph::Graph(const ModelConfig& cfg, const ModelParams& params)
    : cfg_(cfg), params_(params) {}

Var Graph::param(int id) {
  if (!bound_[id]) {
    MatrixXd* sink = (grads_ != nullptr && trainable_[id]) ? &(*grads_)[id] : nullptr;
    bound_[id] = tape_.leaf(params_[id], sink);
  }
  return *bound_[id];
}

Var Graph::image_tokens(const VisionFeatures& feats) {
  return add(matmul(tape_.constant(feats.patch), param(kPatchEmbed)), param(kPatchPos));
}

Var Graph::instruction_token(int instruction) {
  target_count(instruction);
  return row(param(kInstrEmbed), instruction);
}

namespace {

/// Sentence index of every token, clamped to the slot table.
std::vector<int> token_slots(const TokenSeq& tokens, int max_targets) {
  std::vector<int> out;
  int slot = 0;
  for (TokenId t : tokens) {
    out.push_back(std::min(slot, max_targets - 1));
    if (t == vocab::kEndOfSentence) ++slot;
  }
  return out;
}

}  // namespace

Var Graph::response_rows(const TokenSeq& tokens, int role) {
  if (tokens.empty()) throw ShapeError("response_rows: empty response");
  const auto n = static_cast<Eigen::Index>(tokens.size());
  MatrixXd tok = MatrixXd::Zero(n, vocab::kSize);
  MatrixXd slot = MatrixXd::Zero(n, cfg_.max_targets);
  MatrixXd role_sel = MatrixXd::Zero(n, 3);
  const auto slots = token_slots(tokens, cfg_.max_targets);
  for (Eigen::Index i = 0; i < n; ++i) {
    const TokenId t = tokens[static_cast<std::size_t>(i)];
    if (t < 0 || t >= vocab::kSize) throw IndexError("token id outside the vocabulary");
    tok(i, t) = 1.0;
    slot(i, slots[static_cast<std::size_t>(i)]) = 1.0;
    role_sel(i, role) = 1.0;
  }
  Var rows = matmul(tape_.constant(tok), param(kTokenEmbed));
  rows = add(rows, matmul(tape_.constant(slot), param(kSlotEmbed)));
  return add(rows, matmul(tape_.constant(role_sel), param(kRoleEmbed)));
}

Var Graph::embedding_rows(std::span<const Embedding> flat, int targets) {
  if (flat.empty() || targets < 1 || flat.size() % static_cast<std::size_t>(targets) != 0) {
    throw ShapeError("embedding_rows: embeddings must come in whole responses");
  }
  const auto n = static_cast<Eigen::Index>(flat.size());
  MatrixXd f(n, cfg_.dim);
  MatrixXd slot = MatrixXd::Zero(n, cfg_.max_targets);
  MatrixXd role_sel = MatrixXd::Zero(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& e = flat[static_cast<std::size_t>(i)];
    if (e.size() != cfg_.dim) throw ShapeError("embedding_rows: wrong embedding size");
    f.row(i) = e.transpose();
    slot(i, std::min<int>(static_cast<int>(i % targets), cfg_.max_targets - 1)) = 1.0;
    role_sel(i, 1) = 1.0;
  }
  Var rows = matmul(tape_.constant(f), param(kWin));
  rows = add(rows, matmul(tape_.constant(slot), param(kSlotEmbed)));
  return add(rows, matmul(tape_.constant(role_sel), param(kRoleEmbed)));
}

Graph::Slot Graph::slot(Var inputs, std::span<const double> gamma, int quadrant, int n) {
  if (n >= cfg_.max_targets) throw IndexError("slot index exceeds max_targets");
  Var u = add(row(param(kQueryQuad), quadrant), row(param(kQuerySlot), n));
  Var q = matmul(u, param(kWq));
  Var k = matmul(inputs, param(kWk));
  Var v = matmul(inputs, param(kWv));
  std::vector<double> zeros;
  if (gamma.empty()) {
    zeros.assign(static_cast<std::size_t>(inputs.rows()), 0.0);
    gamma = zeros;
  }
  Var att = autograd::biased_attention(q, k, v, static_cast<double>(cfg_.dim), gamma);
  Slot s{add(u, att), {}, {}};
  s.logp = log_softmax_rows(add(matmul(s.hidden, param(kHeadW)), param(kHeadB)));
  return s;
}

Graph::Slot Graph::fused_slot(Var inputs, std::span<const double> gamma, int quadrant,
                              int n) {
  if (n >= cfg_.max_targets) throw IndexError("slot index exceeds max_targets");
  const Eigen::Index prefix = cfg_.patches() + 1;
  if (inputs.rows() <= prefix) throw ShapeError("fused_slot: input holds no fused rows");
  if (!gamma.empty() && gamma.size() != static_cast<std::size_t>(inputs.rows())) {
    throw ShapeError("fused_slot: gamma length differs from the input length");
  }
  std::vector<double> zeros;
  if (gamma.empty()) {
    zeros.assign(static_cast<std::size_t>(inputs.rows()), 0.0);
    gamma = zeros;
  }
  const double d = static_cast<double>(cfg_.dim);
  Var u = add(row(param(kQueryQuad), quadrant), row(param(kQuerySlot), n));
  Var head = autograd::top_rows(inputs, prefix);
  Var grounded = add(u, autograd::biased_attention(matmul(u, param(kWq)),
                                                   matmul(head, param(kWk)),
                                                   matmul(head, param(kWv)), d,
                                                   gamma.first(static_cast<std::size_t>(prefix))));
  Var fused = autograd::biased_attention(matmul(grounded, param(kFuseWq)),
                                         matmul(inputs, param(kFuseWk)),
                                         matmul(inputs, param(kFuseWv)), d, gamma);
  Slot s{add(grounded, fused), {}, {}};
  s.logp = log_softmax_rows(add(matmul(s.hidden, param(kHeadW)), param(kHeadB)));
  const auto sums = [&s](const MatrixXd& q, const MatrixXd& k, const MatrixXd& v, double dk,
                         std::span<const double> gm) {
    const auto w = ensemble::biased_attention(q, k, v, dk, gm).weights;
    for (Eigen::Index r = 0; r < w.rows(); ++r) s.attention_row_sums.push_back(w.row(r).sum());
  };
  sums(u.value() * params_[kWq], head.value() * params_[kWk], head.value() * params_[kWv], d,
       gamma.first(static_cast<std::size_t>(prefix)));
  sums(grounded.value() * params_[kFuseWq], inputs.value() * params_[kFuseWk],
       inputs.value() * params_[kFuseWv], d, gamma);
  return s;
}

Var Graph::struct_logp(int which) { return log_softmax_rows(row(param(kStructLogits), which)); }

Var Graph::seg_embedding(Var hidden, TokenId token) {
  Var g = add(hidden, row(param(kTokenEmbed), token));
  return add(matmul(g, param(kEmbedW)), param(kEmbedB));
}

Var Graph::seg_embedding_soft(Var hidden, Var token_probs) {
  Var g = add(hidden, matmul(token_probs, param(kTokenEmbed)));
  return add(matmul(g, param(kEmbedW)), param(kEmbedB));
}

Var Graph::mask_logits(const VisionFeatures& feats, Var f) {
  Var pix = matmul(tape_.constant(feats.pixel), param(kDecoderW));
  Var logits = matmul(pix, transpose(f));
  Var bias = matmul(tape_.constant(MatrixXd::Ones(logits.rows(), 1)), param(kDecoderB));
  return add(logits, bias);
}

void check_response_grammar(const TokenSeq& tokens, int instruction, int classes) {
  const int n = target_count(instruction);
  if (tokens.size() != static_cast<std::size_t>(3 * n)) {
    throw StructureError("response length " + std::to_string(tokens.size()) +
                         " does not match " + std::to_string(n) + " targets");
  }
  for (int i = 0; i < n; ++i) {
    const TokenId obj = tokens[3 * i];
    if (!vocab::is_object(obj) || vocab::object_class(obj) >= classes ||
        tokens[3 * i + 1] != vocab::kSeg || tokens[3 * i + 2] != vocab::kEndOfSentence) {
      throw StructureError("response breaks the [object, <seg>, end] grammar at target " +
                           std::to_string(i));
    }
  }
}

ForcedPass forced_pass(Graph& g, const VisionFeatures& feats, int instruction,
                       const TokenSeq& tokens) {
  const auto& cfg = g.config();
  check_response_grammar(tokens, instruction, cfg.classes);
  std::vector<Var> parts{g.image_tokens(feats), g.instruction_token(instruction)};
  Var inputs = autograd::vstack(parts);
  Var seg_lp = g.struct_logp(0);
  Var eos_lp = g.struct_logp(1);
  ForcedPass out;
  const int n_targets = target_count(instruction);
  for (int n = 0; n < n_targets; ++n) {
    auto s = g.slot(inputs, {}, target_quadrant(instruction, n), n);
    const TokenId obj = tokens[3 * n];
    out.token_logps.push_back(pick(s.logp, 0, obj));
    out.token_logps.push_back(pick(seg_lp, 0, vocab::kSeg));
    out.token_logps.push_back(pick(eos_lp, 0, vocab::kEndOfSentence));
    out.embeddings.push_back(g.seg_embedding(s.hidden, obj));
    out.hiddens.push_back(s.hidden);
  }
  return out;
}

Var fused_inputs(Graph& g, const VisionFeatures& feats, int instruction,
                 std::span<const ScoredResponse> responses, Var prompts,
                 const TokenSeq* refined) {
  if (responses.empty()) throw ShapeError("fusion needs K >= 1 responses");
  std::vector<Var> parts{g.image_tokens(feats), g.instruction_token(instruction)};
  for (const auto& r : responses) parts.push_back(g.response_rows(r.tokens, 0));
  parts.push_back(prompts);
  if (refined != nullptr) {
    const int n = target_count(instruction);
    std::vector<Embedding> flat;
    for (const auto& r : responses) {
      if (r.embeddings.size() != static_cast<std::size_t>(n)) {
        throw StructureError("response embedding count differs from the target count");
      }
      flat.insert(flat.end(), r.embeddings.begin(), r.embeddings.end());
    }
    parts.push_back(g.embedding_rows(flat, n));
    parts.push_back(g.response_rows(*refined, 2));
  }
  return autograd::vstack(parts);
}

Mask threshold_mask(const MatrixXd& logits, int grid) {
  Mask m(grid, grid);
  for (int r = 0; r < grid; ++r) {
    for (int c = 0; c < grid; ++c) {
      if (logits(r * grid + c, 0) > 0.0) m.set(r, c);
    }
  }
  return m;
}

TokenId greedy_object(const MatrixXd& logp_row, int classes) {
  TokenId best = vocab::object_token(0);
  for (int c = 1; c < classes; ++c) {
    const TokenId t = vocab::object_token(c);
    if (logp_row(0, t) > logp_row(0, best)) best = t;
  }
  return best;
}

namespace {

TokenId sample_object(const MatrixXd& logp_row, int classes, Rng& rng) {
  std::vector<double> p(static_cast<std::size_t>(classes));
  double total = 0.0;
  for (int c = 0; c < classes; ++c) {
    p[c] = std::exp(logp_row(0, vocab::object_token(c)));
    total += p[c];
  }
  double u = rng.uniform() * total;
  for (int c = 0; c < classes; ++c) {
    u -= p[c];
    if (u < 0.0) return vocab::object_token(c);
  }
  return vocab::object_token(classes - 1);
}

ScoredResponse finish_response(TokenSeq tokens, TokenLogProbs logps,
                               std::vector<Embedding> embeddings) {
  ScoredResponse r;
  r.sentence_spans = split_sentences(tokens);
  r.seg_positions = seg_positions(tokens);
  r.tokens = std::move(tokens);
  r.logps = std::move(logps);
  r.embeddings = std::move(embeddings);
  return r;
}

Embedding as_embedding(const MatrixXd& row) { return row.row(0).transpose(); }

}  // namespace

ToyModel::ToyModel(ModelConfig cfg, ModelParams params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  params_.validate(cfg_);
}

std::size_t ToyModel::image_token_count() const {
  return static_cast<std::size_t>(cfg_.patches());
}

SegmenterOutput ToyModel::run(const Image& image, int instruction,
                              std::optional<std::uint64_t> decode_seed) const {
  const auto feats = vision_features(cfg_, image);
  Graph g(cfg_, params_);
  std::vector<Var> parts{g.image_tokens(feats), g.instruction_token(instruction)};
  Var inputs = autograd::vstack(parts);
  const double seg_lp = g.struct_logp(0).value()(0, vocab::kSeg);
  const double eos_lp = g.struct_logp(1).value()(0, vocab::kEndOfSentence);
  std::optional<Rng> rng;
  if (decode_seed) rng.emplace(*decode_seed);
  TokenSeq tokens;
  TokenLogProbs logps;
  std::vector<Embedding> embeddings;
  SegmenterOutput out;
  const int n_targets = target_count(instruction);
  if (n_targets > cfg_.max_targets) throw IndexError("instruction names too many targets");
  for (int n = 0; n < n_targets; ++n) {
    auto s = g.slot(inputs, {}, target_quadrant(instruction, n), n);
    const TokenId obj = rng ? sample_object(s.logp.value(), cfg_.classes, *rng)
                            : greedy_object(s.logp.value(), cfg_.classes);
    tokens.insert(tokens.end(), {obj, vocab::kSeg, vocab::kEndOfSentence});
    logps.insert(logps.end(), {s.logp.value()(0, obj), seg_lp, eos_lp});
    Var f = g.seg_embedding(s.hidden, obj);
    embeddings.push_back(as_embedding(f.value()));
    out.masks.push_back(threshold_mask(g.mask_logits(feats, f).value(), cfg_.grid));
  }
  out.response = finish_response(std::move(tokens), std::move(logps), std::move(embeddings));
  return out;
}

ScoredResponse ToyModel::score(const Image& image, int instruction,
                               const TokenSeq& tokens) const {
  const auto feats = vision_features(cfg_, image);
  Graph g(cfg_, params_);
  auto pass = forced_pass(g, feats, instruction, tokens);
  TokenLogProbs logps;
  for (const auto& v : pass.token_logps) logps.push_back(v.scalar());
  std::vector<Embedding> embeddings;
  for (const auto& v : pass.embeddings) embeddings.push_back(as_embedding(v.value()));
  return finish_response(tokens, std::move(logps), std::move(embeddings));
}

FusedDecode ToyModel::decode_fused(const FusionContext& ctx,
                                   std::span<const double> gamma) const {
  if (ctx.image == nullptr || ctx.prompts == nullptr) {
    throw ShapeError("decode_fused: context needs an image and prompts");
  }
  const auto feats = vision_features(cfg_, *ctx.image);
  Graph g(cfg_, params_);
  Var inputs = fused_inputs(g, feats, ctx.instruction, ctx.responses,
                            g.tape().constant(*ctx.prompts), nullptr);
  if (gamma.size() != static_cast<std::size_t>(inputs.rows())) {
    throw ShapeError("decode_fused: gamma length differs from the fused input length");
  }
  const double seg_lp = g.struct_logp(0).value()(0, vocab::kSeg);
  const double eos_lp = g.struct_logp(1).value()(0, vocab::kEndOfSentence);
  FusedDecode out;
  const int n_targets = target_count(ctx.instruction);
  for (int n = 0; n < n_targets; ++n) {
    const int quad = target_quadrant(ctx.instruction, n);
    auto s = g.fused_slot(inputs, gamma, quad, n);
    const TokenId obj = greedy_candidate_object(s.logp.value(), cfg_.classes, ctx.responses, n);
    out.tokens.insert(out.tokens.end(), {obj, vocab::kSeg, vocab::kEndOfSentence});
    out.logps.insert(out.logps.end(), {s.logp.value()(0, obj), seg_lp, eos_lp});
    out.attention_row_sums.insert(out.attention_row_sums.end(),
                                  s.attention_row_sums.begin(), s.attention_row_sums.end());
  }
  return out;
}

std::vector<Embedding> ToyModel::embed_fused(const FusionContext& ctx,
                                             std::span<const double> gamma) const {
  if (ctx.image == nullptr || ctx.prompts == nullptr || ctx.refined == nullptr) {
    throw ShapeError("embed_fused: context needs an image, prompts and a refined response");
  }
  check_response_grammar(*ctx.refined, ctx.instruction, cfg_.classes);
  const auto feats = vision_features(cfg_, *ctx.image);
  Graph g(cfg_, params_);
  Var inputs = fused_inputs(g, feats, ctx.instruction, ctx.responses,
                            g.tape().constant(*ctx.prompts), ctx.refined);
  if (gamma.size() != static_cast<std::size_t>(inputs.rows())) {
    throw ShapeError("embed_fused: gamma length differs from the fused input length");
  }
  std::vector<Embedding> out;
  const int n_targets = target_count(ctx.instruction);
  for (int n = 0; n < n_targets; ++n) {
    auto s = g.fused_slot(inputs, gamma, target_quadrant(ctx.instruction, n), n);
    out.push_back(as_embedding(g.seg_embedding(s.hidden, (*ctx.refined)[3 * n]).value()));
  }
  return out;
}

Mask ToyModel::decode_mask(const Image& image, const Embedding& f) const {
  if (f.size() != cfg_.dim) throw ShapeError("decode_mask: wrong embedding size");
  const auto feats = vision_features(cfg_, image);
  const MatrixXd logits =
      (feats.pixel * params_[kDecoderW] * f).array() + params_[kDecoderB](0, 0);
  return threshold_mask(logits, cfg_.grid);
}

}  // namespace prefseg::toy
