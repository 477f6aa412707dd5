#include "cad/scores.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "cad/error.hpp"

namespace cad::scores {

namespace {

constexpr Eigen::Index kScoreChunk = 1024;

template <class... Ts>
struct Overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void check_temperature(double t) {
    if (!(t > 0.0) || !std::isfinite(t)) throw ParameterError("temperature must be positive, got " + std::to_string(t));
}

// d max_i softmax(z / T)_i / dz = p_m (e_m - p) / T.
Vector max_prob_gradient(const Vector& probs, std::size_t m, double temperature) {
    Vector g = -probs[static_cast<Eigen::Index>(m)] * probs;
    g[static_cast<Eigen::Index>(m)] += probs[static_cast<Eigen::Index>(m)];
    return g / temperature;
}

} // namespace

ScoreKind parse_score_kind(std::string_view name) {
    if (name == "mahalanobis") return ScoreKind::Mahalanobis;
    if (name == "odin") return ScoreKind::Odin;
    if (name == "max_softmax") return ScoreKind::MaxSoftmax;
    throw ConfigError("unknown score kind '" + std::string(name) + "' (expected mahalanobis, odin or max_softmax)");
}

std::string_view score_kind_name(ScoreKind kind) noexcept {
    switch (kind) {
    case ScoreKind::Mahalanobis: return "mahalanobis";
    case ScoreKind::Odin: return "odin";
    case ScoreKind::MaxSoftmax: return "max_softmax";
    }
    return "max_softmax";
}

ScoreKind kind_of(const ScoreParams& params) noexcept {
    return std::visit(Overloaded{[](const MahalanobisParams&) { return ScoreKind::Mahalanobis; },
                                 [](const OdinParams&) { return ScoreKind::Odin; },
                                 [](const MaxSoftmaxParams&) { return ScoreKind::MaxSoftmax; }},
                      params);
}

PooledStatistics pooled_statistics(const std::vector<Matrix>& grouped) {
    if (grouped.empty()) throw InsufficientDataError("no classes to fit class-conditional statistics");
    const Eigen::Index dim = grouped.front().rows();
    PooledStatistics stats;
    stats.covariance = Matrix::Zero(dim, dim);
    Eigen::Index total = 0;
    for (std::size_t j = 0; j < grouped.size(); ++j) {
        const Matrix& g = grouped[j];
        if (g.cols() == 0) throw InsufficientDataError("class at head index " + std::to_string(j) + " has no samples");
        if (g.rows() != dim) throw ShapeError("score-space vectors differ in length across classes");
        Vector mean = g.rowwise().mean();
        const Matrix dev = g.colwise() - mean;
        stats.covariance.noalias() += dev * dev.transpose();
        stats.means.push_back(std::move(mean));
        total += g.cols();
    }
    stats.covariance /= static_cast<double>(total);
    return stats;
}

MahalanobisParams fit_mahalanobis(const std::vector<Matrix>& grouped, double ridge) {
    if (!(ridge >= 0.0)) throw ParameterError("ridge must be non-negative");
    PooledStatistics stats = pooled_statistics(grouped);
    const Eigen::Index dim = stats.covariance.rows();
    const Matrix regularized = stats.covariance + ridge * Matrix::Identity(dim, dim);
    Eigen::LLT<Matrix> llt(regularized);
    if (llt.info() != Eigen::Success) {
        throw ConditioningError("pooled covariance plus ridge " + std::to_string(ridge) + " is not positive definite");
    }
    const Vector diag = llt.matrixL().toDenseMatrix().diagonal();
    if (!diag.allFinite() || diag.minCoeff() <= std::sqrt(std::numeric_limits<double>::epsilon()) * diag.maxCoeff()) {
        throw ConditioningError("pooled covariance plus ridge " + std::to_string(ridge) + " is numerically singular");
    }
    MahalanobisParams params;
    params.means = std::move(stats.means);
    params.pooled_cov = std::move(stats.covariance);
    params.ridge = ridge;
    params.precision = llt.solve(Matrix::Identity(dim, dim));
    params.precision = 0.5 * (params.precision + params.precision.transpose());
    return params;
}

double mahalanobis_score(const Vector& v, const MahalanobisParams& params, Vector* grad) {
    if (params.means.empty()) throw ShapeError("Mahalanobis parameters hold no classes");
    if (v.size() != params.means.front().size()) {
        throw ShapeError("score-space vector has length " + std::to_string(v.size()) + ", class means have " +
                         std::to_string(params.means.front().size()));
    }
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < params.means.size(); ++j) {
        const Vector d = v - params.means[j];
        const double s = -d.dot(params.precision * d);
        if (s > best) {
            best = s;
            best_j = j;
        }
    }
    if (grad) *grad = -2.0 * (params.precision * (v - params.means[best_j]));
    return std::min(best, 0.0);
}

Vector temperature_scale(const Vector& logits, double temperature) {
    check_temperature(temperature);
    return net::softmax(logits / temperature);
}

double max_softmax_score(const Vector& logits) { return net::softmax(logits).maxCoeff(); }

Vector apply_sign_perturbation(const Vector& x, const Vector& grad_log_prob, double epsilon) {
    if (x.size() != grad_log_prob.size()) throw ShapeError("perturbation gradient does not match input width");
    Vector out = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) out[i] -= epsilon * sign(-grad_log_prob[i]);
    return out;
}

Matrix log_max_prob_input_gradient(std::span<const double> theta, const net::NetworkSpec& spec, const Matrix& inputs,
                                   double temperature) {
    check_temperature(temperature);
    const net::ForwardTrace trace = net::forward(theta, spec, inputs);
    Matrix upstream(trace.logits().rows(), trace.logits().cols());
    for (Eigen::Index c = 0; c < upstream.cols(); ++c) {
        const Vector z = trace.logits().col(c);
        const std::size_t yhat = net::argmax(z);
        // d log softmax(z/T)_yhat / dz = (e_yhat - softmax(z/T)) / T
        Vector g = -temperature_scale(z, temperature);
        g[static_cast<Eigen::Index>(yhat)] += 1.0;
        upstream.col(c) = g / temperature;
    }
    return net::backward(theta, spec, trace, upstream).inputs;
}

Matrix perturb_inputs(std::span<const double> theta, const net::NetworkSpec& spec, const Matrix& inputs,
                      const OdinParams& params) {
    if (!(params.epsilon >= 0.0)) throw ParameterError("ODIN epsilon must be non-negative");
    check_temperature(params.temperature);
    if (params.epsilon == 0.0) return inputs;
    const Matrix g = log_max_prob_input_gradient(theta, spec, inputs, params.temperature);
    Matrix out = inputs;
    for (Eigen::Index c = 0; c < inputs.cols(); ++c) {
        out.col(c) = apply_sign_perturbation(inputs.col(c), g.col(c), params.epsilon);
    }
    return out;
}

Vector perturb_input(std::span<const double> theta, const net::NetworkSpec& spec, std::span<const double> x,
                     const OdinParams& params) {
    return perturb_inputs(theta, spec, net::column(x), params).col(0);
}

double odin_score(std::span<const double> theta, const net::NetworkSpec& spec, std::span<const double> x,
                  const OdinParams& params) {
    const Vector xt = perturb_input(theta, spec, x, params);
    return temperature_scale(net::logits(theta, spec, std::span<const double>(xt.data(), static_cast<std::size_t>(xt.size()))),
                             params.temperature)
        .maxCoeff();
}

ScoreEvaluation evaluate_scores(const ScoreParams& params, std::span<const double> theta,
                                const net::NetworkSpec& spec, const Matrix& inputs, bool with_gradient) {
    ScoreEvaluation ev;
    const auto n = static_cast<std::size_t>(inputs.cols());
    ev.scores.resize(n);
    std::visit(Overloaded{
                   [&](const MahalanobisParams& p) {
                       ev.trace = net::forward(theta, spec, inputs);
                       if (with_gradient) ev.dscore_dlogits.resize(ev.trace.logits().rows(), inputs.cols());
                       Vector g;
                       for (std::size_t c = 0; c < n; ++c) {
                           const auto col = static_cast<Eigen::Index>(c);
                           ev.scores[c] = mahalanobis_score(ev.trace.logits().col(col), p, with_gradient ? &g : nullptr);
                           if (with_gradient) ev.dscore_dlogits.col(col) = g;
                       }
                   },
                   [&](const OdinParams& p) {
                       ev.trace = net::forward(theta, spec, perturb_inputs(theta, spec, inputs, p));
                       if (with_gradient) ev.dscore_dlogits.resize(ev.trace.logits().rows(), inputs.cols());
                       for (std::size_t c = 0; c < n; ++c) {
                           const auto col = static_cast<Eigen::Index>(c);
                           const Vector probs = temperature_scale(ev.trace.logits().col(col), p.temperature);
                           const std::size_t m = net::argmax(probs);
                           ev.scores[c] = probs[static_cast<Eigen::Index>(m)];
                           if (with_gradient) ev.dscore_dlogits.col(col) = max_prob_gradient(probs, m, p.temperature);
                       }
                   },
                   [&](const MaxSoftmaxParams&) {
                       ev.trace = net::forward(theta, spec, inputs);
                       if (with_gradient) ev.dscore_dlogits.resize(ev.trace.logits().rows(), inputs.cols());
                       for (std::size_t c = 0; c < n; ++c) {
                           const auto col = static_cast<Eigen::Index>(c);
                           const Vector probs = net::softmax(ev.trace.logits().col(col));
                           const std::size_t m = net::argmax(probs);
                           ev.scores[c] = probs[static_cast<Eigen::Index>(m)];
                           if (with_gradient) ev.dscore_dlogits.col(col) = max_prob_gradient(probs, m, 1.0);
                       }
                   },
               },
               params);
    return ev;
}

std::vector<double> score_batch(const ScoreParams& params, std::span<const double> theta,
                                const net::NetworkSpec& spec, const Matrix& inputs) {
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(inputs.cols()));
    for (Eigen::Index start = 0; start < inputs.cols(); start += kScoreChunk) {
        const Eigen::Index len = std::min(kScoreChunk, inputs.cols() - start);
        const auto ev = evaluate_scores(params, theta, spec, inputs.middleCols(start, len), false);
        out.insert(out.end(), ev.scores.begin(), ev.scores.end());
    }
    return out;
}

} // namespace cad::scores
