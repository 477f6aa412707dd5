#pragma once

// Out-of-distribution score functions. Every score is "high = looks like a
// known class": Mahalanobis scores are <= 0, ODIN and max-softmax lie in (0, 1].

#include <span>
#include <string_view>
#include <variant>
#include <vector>

#include "cad/net.hpp"

namespace cad::scores {

using net::Matrix;
using net::Vector;

struct MahalanobisParams {
    std::vector<Vector> means;  // indexed by output-head position
    Matrix pooled_cov;          // without the ridge
    double ridge = 1e-6;
    Matrix precision;           // (pooled_cov + ridge * I)^-1
};

struct OdinParams {
    double temperature = 1.0;
    double epsilon = 0.0;
};

struct MaxSoftmaxParams {};

using ScoreParams = std::variant<MahalanobisParams, OdinParams, MaxSoftmaxParams>;

enum class ScoreKind { Mahalanobis, Odin, MaxSoftmax };

ScoreKind parse_score_kind(std::string_view name);
std::string_view score_kind_name(ScoreKind kind) noexcept;
ScoreKind kind_of(const ScoreParams& params) noexcept;

struct PooledStatistics {
    std::vector<Vector> means;
    Matrix covariance;  // sum of within-class outer products divided by the total count
};

/// Per-class means and the pooled within-class covariance. `grouped[j]` holds
/// the vectors of class j as columns.
PooledStatistics pooled_statistics(const std::vector<Matrix>& grouped);

/// pooled_statistics plus the factorization of (cov + ridge * I). Throws
/// InsufficientDataError for an empty class and ConditioningError when the
/// regularized covariance is not positive definite.
MahalanobisParams fit_mahalanobis(const std::vector<Matrix>& grouped, double ridge);

/// max_j -(v - mu_j)^T P (v - mu_j). When `grad` is given it receives d score / d v.
double mahalanobis_score(const Vector& v, const MahalanobisParams& params, Vector* grad = nullptr);

/// softmax(logits / T). Throws ParameterError for T <= 0.
Vector temperature_scale(const Vector& logits, double temperature);

double max_softmax_score(const Vector& logits);

/// x - eps * sign(-grad), with sign(0) = 0.
Vector apply_sign_perturbation(const Vector& x, const Vector& grad_log_prob, double epsilon);

/// Gradient of log q~_yhat(x) with respect to each input column, where yhat is
/// the argmax of the unscaled logits.
Matrix log_max_prob_input_gradient(std::span<const double> theta, const net::NetworkSpec& spec, const Matrix& inputs,
                                   double temperature);

Matrix perturb_inputs(std::span<const double> theta, const net::NetworkSpec& spec, const Matrix& inputs,
                      const OdinParams& params);
Vector perturb_input(std::span<const double> theta, const net::NetworkSpec& spec, std::span<const double> x,
                     const OdinParams& params);

double odin_score(std::span<const double> theta, const net::NetworkSpec& spec, std::span<const double> x,
                  const OdinParams& params);

/// Scores for a batch together with what training needs to differentiate them:
/// the trace of the forward pass the score was read from (at the perturbed
/// inputs for ODIN) and d score / d logits per column. The perturbation itself
/// is treated as a constant.
struct ScoreEvaluation {
    std::vector<double> scores;
    net::ForwardTrace trace;
    Matrix dscore_dlogits;
};

ScoreEvaluation evaluate_scores(const ScoreParams& params, std::span<const double> theta,
                                const net::NetworkSpec& spec, const Matrix& inputs, bool with_gradient);

std::vector<double> score_batch(const ScoreParams& params, std::span<const double> theta,
                                const net::NetworkSpec& spec, const Matrix& inputs);

} // namespace cad::scores
