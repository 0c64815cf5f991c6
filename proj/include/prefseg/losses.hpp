#pragma once

#include <Eigen/Dense>
#include <functional>
#include <span>
#include <vector>

#include "prefseg/types.hpp"

namespace prefseg::losses {

struct PreferenceHyper {
  double beta_t = 0.5;
  double beta_s = 10.0;
  double lambda = 5.0;
  /// Fixed factor inside both improvement losses.
  double improvement_scale = 10.0;

  /// Throws ConfigError unless every field is > 0.
  void validate() const;
};

/// A scalar loss and its partials with respect to the policy-side inputs.
/// The meaning of each gradient block is documented per loss function.
struct LossValue {
  double value = 0.0;
  std::vector<Eigen::VectorXd> gradients;
};

double sigmoid(double x);
/// -log(sigmoid(x)), stable for large |x|.
double neg_log_sigmoid(double x);

/// d cos(a, b) / d a.
Eigen::VectorXd cosine_grad(const Eigen::VectorXd& a, const Eigen::VectorXd& b);
/// Throws NumericError on a zero-norm operand.
double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

/// (1/|y|) * (sum_{i not in l} logp_i + lambda * sum_{i in l} logp_i).
/// Repeated indices in l count once.
double weighted_log_likelihood(std::span<const double> logps, const IndexList& l,
                               double lambda);
/// Partials of weighted_log_likelihood with respect to each logp_i.
Eigen::VectorXd weighted_log_likelihood_grad(std::size_t length,
                                             const IndexList& l, double lambda);

/// Text DPO loss over a corrected/original response pair. Reference
/// quantities are constants. gradients[0] is d/d policy_yc, gradients[1]
/// is d/d policy_y.
LossValue text_dpo_loss(std::span<const double> policy_yc,
                        std::span<const double> policy_y,
                        std::span<const double> ref_yc,
                        std::span<const double> ref_y, const IndexList& l_y,
                        const IndexList& l_yc, const PreferenceHyper& hyper);

/// One target of the segmentation-embedding preference loss.
/// gradients[0] is d/d f_policy_mid. When the indicator is inactive the value
/// and gradient are exactly zero.
LossValue seg_preference_loss(const Embedding& f_policy_mid,
                              const Embedding& f_ref_best,
                              const Embedding& f_ref_mid,
                              const Embedding& f_ref_worst,
                              bool indicator_active, double beta_s);

struct SegPreferenceTarget {
  Embedding f_policy_mid;
  Embedding f_ref_best;
  Embedding f_ref_mid;
  Embedding f_ref_worst;
  bool indicator_active = true;
};

/// Mean over the N targets of one sample; gradients[n] is d/d f_policy_mid
/// of target n.
LossValue seg_preference_loss(std::span<const SegPreferenceTarget> targets,
                              double beta_s);

/// Text improvement loss. refined_prob is a stop-gradient weight.
/// gradients[0] is d/d h_refined.
LossValue text_improvement_loss(double refined_prob, const Embedding& h_refined,
                                const Embedding& h_gt,
                                std::span<const Embedding> h_originals,
                                double scale = 10.0);

/// Segmentation improvement loss. original_ious is K rows of N values.
/// gradients[0] is d/d refined_ious.
LossValue seg_improvement_loss(std::span<const double> refined_ious,
                               std::span<const std::vector<double>> original_ious,
                               double scale = 10.0);

/// L_pre = L_t + L_s; gradient blocks are concatenated text-first.
LossValue combined_preference_loss(const LossValue& text, const LossValue& seg);

/// Sentence-level embedder standing in for a pretrained text encoder.
class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  virtual Embedding embed(const TokenSeq& tokens) const = 0;
};

/// Mean of the rows of a token-embedding table selected by the tokens.
class MeanTokenEmbedder : public TextEmbedder {
 public:
  explicit MeanTokenEmbedder(Eigen::MatrixXd table) : table_(std::move(table)) {}
  Embedding embed(const TokenSeq& tokens) const override;

 private:
  Eigen::MatrixXd table_;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t worst_index = 0;
  bool passed = false;
};

using ScalarFunction = std::function<double(const Eigen::VectorXd&)>;

/// Compares an analytic gradient against central differences, coordinate by
/// coordinate. Relative error is |a - n| / max(|a|, |n|, abs_floor).
/// Throws NumericError if the function is non-finite at any probe.
GradCheckReport finite_difference_check(const ScalarFunction& fn,
                                        const Eigen::VectorXd& point,
                                        const Eigen::VectorXd& analytic,
                                        double step = 1e-5,
                                        double tolerance = 1e-4,
                                        double abs_floor = 1e-6);

}  // namespace prefseg::losses
