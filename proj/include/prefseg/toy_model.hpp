#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefseg/autograd.hpp"
#include "prefseg/segmenter.hpp"
#include "prefseg/types.hpp"

namespace prefseg::toy {

/// Toy segmenter dimensions. Images are grid x grid and split into four
/// quadrants; an instruction is a bitmask naming occupied quadrants.
struct ModelConfig {
  int grid = 16;
  int patch = 4;
  int dim = 8;
  int classes = 6;
  int prompts = 10;
  int max_targets = 3;
  /// Class c has intensity class_base + class_step * c.
  double class_base = 0.3;
  double class_step = 0.1;
  /// Width of the radial intensity features.
  double feature_width = 0.05;
  double init_scale = 0.6;

  void validate() const;
  int patches() const { return (grid / patch) * (grid / patch); }
  int instructions() const { return 16; }
  double class_intensity(int c) const { return class_base + class_step * c; }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& doc);
};

enum ParamId : int {
  kPatchEmbed,    // classes x dim
  kPatchPos,      // patches x dim
  kInstrEmbed,    // 16 x dim
  kQueryQuad,     // 4 x dim
  kQuerySlot,     // max_targets x dim
  kWq,            // dim x dim
  kWk,
  kWv,
  kFuseWq,        // dim x dim, second attention layer of the fused passes
  kFuseWk,
  kFuseWv,        // zero at init, so fused passes start as the plain pass
  kTokenEmbed,    // vocab x dim
  kSlotEmbed,     // max_targets x dim
  kRoleEmbed,     // 3 x dim: response token, embedding token, refined token
  kWin,           // dim x dim, maps <seg> embeddings into the input space
  kHeadW,         // dim x vocab
  kHeadB,         // 1 x vocab
  kStructLogits,  // 2 x vocab: the <seg> slot and the end-of-sentence slot
  kEmbedW,        // dim x dim
  kEmbedB,        // 1 x dim
  kDecoderW,      // (classes + 1) x dim
  kDecoderB,      // 1 x 1
  kPrompts,       // prompts x dim
  kParamCount
};

const char* param_name(int id);
int param_from_name(const std::string& name);
/// Mask decoder tensors, frozen during preference finetuning.
bool is_decoder_param(int id);

struct ModelParams {
  std::array<Eigen::MatrixXd, kParamCount> tensors;

  Eigen::MatrixXd& operator[](int id) { return tensors[id]; }
  const Eigen::MatrixXd& operator[](int id) const { return tensors[id]; }

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);
  static ModelParams zeros_like(const ModelParams& other);

  std::uint64_t tensor_hash(int id) const;
  std::uint64_t hash() const;
  bool finite() const;
  std::size_t scalar_count() const;
  /// Checks every tensor shape against the config.
  void validate(const ModelConfig& cfg) const;

  bool operator==(const ModelParams& other) const;
};

/// Quadrant index (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right)
/// of the n-th set bit of an instruction.
int target_quadrant(int instruction, int n);
int target_count(int instruction);

/// Fixed (non-learned) vision features of one image.
struct VisionFeatures {
  Eigen::MatrixXd patch;  // patches x classes, max-pooled radial features
  Eigen::MatrixXd pixel;  // (grid*grid) x (classes + 1), last column is 1
};

VisionFeatures vision_features(const ModelConfig& cfg, const Image& image);

/// Builds differentiable forwards on a tape. Parameters flagged trainable
/// become leaves whose gradients accumulate into the sink tensors.
class Graph {
 public:
  Graph(const ModelConfig& cfg, const ModelParams& params, ModelParams* grads,
        std::span<const bool> trainable);
  /// Constant-only graph.
  Graph(const ModelConfig& cfg, const ModelParams& params);
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  autograd::Tape& tape() { return tape_; }
  autograd::Var param(int id);

  autograd::Var image_tokens(const VisionFeatures& feats);
  autograd::Var instruction_token(int instruction);
  /// Input rows for each token of a response, tagged with its sentence slot
  /// and a role (0 response token, 2 refined token).
  autograd::Var response_rows(const TokenSeq& tokens, int role);
  /// <seg> embeddings of K responses, flattened response-major.
  autograd::Var embedding_rows(std::span<const Embedding> flat, int targets);

  struct Slot {
    autograd::Var hidden;  // 1 x dim
    autograd::Var logp;    // 1 x vocab, log-softmax of the token head
    std::vector<double> attention_row_sums;
  };
  /// One target slot: a quadrant query attends over the input rows.
  Slot slot(autograd::Var inputs, std::span<const double> gamma, int quadrant, int n);
  /// Slot over a fused input E. The grounding layer attends over the image
  /// and instruction rows that open E; the fusion layer then attends from
  /// the grounded state over all of E. gamma covers every row of E and
  /// biases both layers.
  Slot fused_slot(autograd::Var inputs, std::span<const double> gamma, int quadrant, int n);

  /// Log-probability row of the forced structural token at a <seg> slot
  /// (which = 0) or an end-of-sentence slot (which = 1).
  autograd::Var struct_logp(int which);
  /// <seg> embedding conditioned on the emitted object token.
  autograd::Var seg_embedding(autograd::Var hidden, TokenId token);
  autograd::Var seg_embedding_soft(autograd::Var hidden, autograd::Var token_probs);
  /// Per-pixel mask logits, (grid*grid) x 1.
  autograd::Var mask_logits(const VisionFeatures& feats, autograd::Var f);

  const ModelConfig& config() const { return cfg_; }

 private:
  const ModelConfig& cfg_;
  const ModelParams& params_;
  autograd::Tape tape_;
  std::array<std::optional<autograd::Var>, kParamCount> bound_;
  ModelParams* grads_ = nullptr;
  std::array<bool, kParamCount> trainable_{};
};

/// Output rows of a teacher-forced pass over a fixed token sequence.
struct ForcedPass {
  std::vector<autograd::Var> token_logps;  // 1x1 per token
  std::vector<autograd::Var> embeddings;   // 1 x dim per <seg>
  std::vector<autograd::Var> hiddens;      // 1 x dim per target slot
};

/// Teacher-forced plain forward of a [obj, <seg>, eos] * N sequence.
ForcedPass forced_pass(Graph& g, const VisionFeatures& feats, int instruction,
                       const TokenSeq& tokens);

/// Checks the [object, <seg>, end-of-sentence] * N grammar against an
/// instruction. Throws StructureError.
void check_response_grammar(const TokenSeq& tokens, int instruction, int classes);

class ToyModel : public FusionModel {
 public:
  ToyModel(ModelConfig cfg, ModelParams params);

  const ModelConfig& config() const { return cfg_; }
  const ModelParams& params() const { return params_; }
  ModelParams& mutable_params() { return params_; }

  SegmenterOutput run(const Image& image, int instruction,
                      std::optional<std::uint64_t> decode_seed) const override;

  std::size_t image_token_count() const override;
  std::size_t instruction_token_count() const override { return 1; }
  FusedDecode decode_fused(const FusionContext& ctx,
                           std::span<const double> gamma) const override;
  std::vector<Embedding> embed_fused(const FusionContext& ctx,
                                     std::span<const double> gamma) const override;
  Mask decode_mask(const Image& image, const Embedding& f) const override;

  /// Scores a fixed response under the plain forward.
  ScoredResponse score(const Image& image, int instruction, const TokenSeq& tokens) const;

 private:
  ModelConfig cfg_;
  ModelParams params_;
};

/// Fused-input rows E. Without a refined response this is the text-fusion
/// input [I, x, y_1..y_K, p]; with one it is the embedding-fusion input
/// [I, x, y_1..y_K, p, f_1..f_K, refined].
autograd::Var fused_inputs(Graph& g, const VisionFeatures& feats, int instruction,
                           std::span<const ScoredResponse> responses,
                           autograd::Var prompts, const TokenSeq* refined);

/// Mask of logits > 0.
Mask threshold_mask(const Eigen::MatrixXd& logits, int grid);

/// Object token with the highest head probability.
TokenId greedy_object(const Eigen::MatrixXd& logp_row, int classes);

/// Highest-probability object among those the responses proposed for target
/// slot n. Falls back to greedy_object when no response reaches slot n.
TokenId greedy_candidate_object(const Eigen::MatrixXd& logp_row, int classes,
                                std::span<const ScoredResponse> responses, int n);

}  // namespace prefseg::toy
