#include "prefseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "prefseg/error.hpp"

namespace prefseg::losses {

void PreferenceHyper::validate() const {
  if (!(beta_t > 0) || !(beta_s > 0) || !(lambda > 0) ||
      !(improvement_scale > 0)) {
    throw ConfigError("preference hyperparameters must be positive");
  }
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double neg_log_sigmoid(double x) {
  // softplus(-x)
  return std::max(-x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw ShapeError("cosine: dimension mismatch");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) {
    throw NumericError("cosine similarity of a zero-norm embedding");
  }
  return a.dot(b) / (na * nb);
}

Eigen::VectorXd cosine_grad(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double na = a.norm();
  const double nb = b.norm();
  const double c = cosine(a, b);
  return b / (na * nb) - c * a / (na * na);
}

namespace {

std::vector<char> membership(std::size_t length, const IndexList& l) {
  std::vector<char> in(length, 0);
  for (std::size_t i : l) {
    if (i >= length) {
      throw IndexError("index " + std::to_string(i) +
                       " out of range for length " + std::to_string(length));
    }
    in[i] = 1;
  }
  return in;
}

}  // namespace

double weighted_log_likelihood(std::span<const double> logps, const IndexList& l,
                               double lambda) {
  if (logps.empty()) throw ShapeError("weighted_log_likelihood: empty response");
  const auto in = membership(logps.size(), l);
  double plain = 0.0;
  double weighted = 0.0;
  for (std::size_t i = 0; i < logps.size(); ++i) {
    (in[i] ? weighted : plain) += logps[i];
  }
  return (plain + lambda * weighted) / static_cast<double>(logps.size());
}

Eigen::VectorXd weighted_log_likelihood_grad(std::size_t length,
                                             const IndexList& l, double lambda) {
  const auto in = membership(length, l);
  Eigen::VectorXd g(static_cast<Eigen::Index>(length));
  for (std::size_t i = 0; i < length; ++i) {
    g[static_cast<Eigen::Index>(i)] =
        (in[i] ? lambda : 1.0) / static_cast<double>(length);
  }
  return g;
}

LossValue text_dpo_loss(std::span<const double> policy_yc,
                        std::span<const double> policy_y,
                        std::span<const double> ref_yc,
                        std::span<const double> ref_y, const IndexList& l_y,
                        const IndexList& l_yc, const PreferenceHyper& hyper) {
  if (policy_yc.size() != ref_yc.size() || policy_y.size() != ref_y.size()) {
    throw ShapeError("text_dpo_loss: policy/reference length mismatch");
  }
  const double lam = hyper.lambda;
  const double margin =
      hyper.beta_t * (weighted_log_likelihood(policy_yc, l_yc, lam) -
                      weighted_log_likelihood(ref_yc, l_yc, lam)) -
      hyper.beta_t * (weighted_log_likelihood(policy_y, l_y, lam) -
                      weighted_log_likelihood(ref_y, l_y, lam));
  const double dz = sigmoid(margin) - 1.0;  // d(-log sigma(z))/dz
  LossValue out;
  out.value = neg_log_sigmoid(margin);
  out.gradients.push_back(dz * hyper.beta_t *
                          weighted_log_likelihood_grad(policy_yc.size(), l_yc, lam));
  out.gradients.push_back(-dz * hyper.beta_t *
                          weighted_log_likelihood_grad(policy_y.size(), l_y, lam));
  return out;
}

LossValue seg_preference_loss(const Embedding& f_policy_mid,
                              const Embedding& f_ref_best,
                              const Embedding& f_ref_mid,
                              const Embedding& f_ref_worst,
                              bool indicator_active, double beta_s) {
  const auto d = f_policy_mid.size();
  if (f_ref_best.size() != d || f_ref_mid.size() != d || f_ref_worst.size() != d) {
    throw ShapeError("seg_preference_loss: embedding dimension mismatch");
  }
  const double r_w =
      beta_s * (cosine(f_policy_mid, f_ref_best) - cosine(f_ref_mid, f_ref_best));
  const double r_l =
      beta_s * (cosine(f_policy_mid, f_ref_worst) - cosine(f_ref_mid, f_ref_worst));
  LossValue out;
  if (!indicator_active) {
    out.gradients.push_back(Eigen::VectorXd::Zero(d));
    return out;
  }
  const double margin = r_w - r_l;
  const double dz = sigmoid(margin) - 1.0;
  out.value = neg_log_sigmoid(margin);
  out.gradients.push_back(dz * beta_s *
                          (cosine_grad(f_policy_mid, f_ref_best) -
                           cosine_grad(f_policy_mid, f_ref_worst)));
  return out;
}

LossValue seg_preference_loss(std::span<const SegPreferenceTarget> targets,
                              double beta_s) {
  if (targets.empty()) throw ShapeError("seg_preference_loss: no targets");
  const double inv_n = 1.0 / static_cast<double>(targets.size());
  LossValue out;
  for (const auto& t : targets) {
    auto one = seg_preference_loss(t.f_policy_mid, t.f_ref_best, t.f_ref_mid,
                                   t.f_ref_worst, t.indicator_active, beta_s);
    out.value += inv_n * one.value;
    out.gradients.push_back(inv_n * one.gradients[0]);
  }
  return out;
}

LossValue text_improvement_loss(double refined_prob, const Embedding& h_refined,
                                const Embedding& h_gt,
                                std::span<const Embedding> h_originals,
                                double scale) {
  if (h_originals.empty()) throw ShapeError("text_improvement_loss: K must be >= 1");
  if (!(refined_prob > 0.0) || refined_prob > 1.0) {
    throw NumericError("text_improvement_loss: refined_prob must lie in (0, 1]");
  }
  const double c_refined = cosine(h_refined, h_gt);
  const Eigen::VectorXd dc = cosine_grad(h_refined, h_gt);
  const double inv_k = 1.0 / static_cast<double>(h_originals.size());
  const double weight = scale * refined_prob;
  LossValue out;
  double dsum = 0.0;
  for (const auto& h : h_originals) {
    const double margin = weight * (c_refined - cosine(h, h_gt));
    out.value += inv_k * neg_log_sigmoid(margin);
    dsum += inv_k * (sigmoid(margin) - 1.0) * weight;
  }
  out.gradients.push_back(dsum * dc);
  return out;
}

LossValue seg_improvement_loss(std::span<const double> refined_ious,
                               std::span<const std::vector<double>> original_ious,
                               double scale) {
  const std::size_t n = refined_ious.size();
  if (n == 0 || original_ious.empty()) {
    throw ShapeError("seg_improvement_loss: need N >= 1 and K >= 1");
  }
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  for (double v : refined_ious) {
    if (!in_unit(v)) throw NumericError("seg_improvement_loss: IoU outside [0, 1]");
  }
  const double inv = 1.0 / static_cast<double>(n * original_ious.size());
  LossValue out;
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  for (const auto& row : original_ious) {
    if (row.size() != n) throw ShapeError("seg_improvement_loss: ragged IoU rows");
    for (std::size_t j = 0; j < n; ++j) {
      if (!in_unit(row[j])) {
        throw NumericError("seg_improvement_loss: IoU outside [0, 1]");
      }
      const double margin = scale * (refined_ious[j] - row[j]);
      out.value += inv * neg_log_sigmoid(margin);
      grad[static_cast<Eigen::Index>(j)] += inv * (sigmoid(margin) - 1.0) * scale;
    }
  }
  out.gradients.push_back(std::move(grad));
  return out;
}

LossValue combined_preference_loss(const LossValue& text, const LossValue& seg) {
  LossValue out;
  out.value = text.value + seg.value;
  out.gradients = text.gradients;
  out.gradients.insert(out.gradients.end(), seg.gradients.begin(),
                       seg.gradients.end());
  return out;
}

Embedding MeanTokenEmbedder::embed(const TokenSeq& tokens) const {
  if (tokens.empty()) throw ShapeError("text embedder: empty token sequence");
  Embedding sum = Embedding::Zero(table_.cols());
  for (TokenId t : tokens) {
    if (t < 0 || t >= table_.rows()) throw IndexError("token id outside table");
    sum += table_.row(t).transpose();
  }
  return sum / static_cast<double>(tokens.size());
}

GradCheckReport finite_difference_check(const ScalarFunction& fn,
                                        const Eigen::VectorXd& point,
                                        const Eigen::VectorXd& analytic,
                                        double step, double tolerance,
                                        double abs_floor) {
  if (analytic.size() != point.size()) {
    throw ShapeError("finite_difference_check: gradient size mismatch");
  }
  GradCheckReport report;
  Eigen::VectorXd x = point;
  if (!std::isfinite(fn(x))) throw NumericError("loss is not finite at the point");
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = fn(x);
    x[i] = saved - step;
    const double down = fn(x);
    x[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("loss is not finite near coordinate " + std::to_string(i));
    }
    const double numeric = (up - down) / (2.0 * step);
    const double abs_err = std::abs(numeric - analytic[i]);
    const double denom =
        std::max({std::abs(numeric), std::abs(analytic[i]), abs_floor});
    const double rel = abs_err / denom;
    report.max_absolute_error = std::max(report.max_absolute_error, abs_err);
    if (rel > report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_index = static_cast<std::size_t>(i);
    }
  }
  report.passed = report.max_relative_error <= tolerance;
  return report;
}

}  // namespace prefseg::losses
