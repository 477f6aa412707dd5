#include "cad/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cad/error.hpp"

namespace cad::train {

namespace {

Matrix gather(const Matrix& m, std::span<const std::size_t> idx) {
    Matrix out(m.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = m.col(static_cast<Eigen::Index>(idx[i]));
    return out;
}

void accumulate(ParamVector& into, const ParamVector& add, double scale = 1.0) {
    for (std::size_t i = 0; i < into.size(); ++i) into[i] += scale * add[i];
}

void check_prior_layout(std::span<const double> theta, std::span<const double> theta_prev, const FisherDiag& fisher) {
    if (theta_prev.size() != theta.size() || fisher.values.size() != theta.size()) {
        throw ShapeError("prior layout mismatch: theta " + std::to_string(theta.size()) + ", anchor " +
                         std::to_string(theta_prev.size()) + ", Fisher " + std::to_string(fisher.values.size()));
    }
}

} // namespace

FisherDiag fisher_diagonal(std::span<const double> theta, const net::NetworkSpec& spec, const LabeledSet& data) {
    if (data.size() == 0) throw InsufficientDataError("Fisher information needs at least one labeled sample");
    FisherDiag f;
    f.values.assign(theta.size(), 0.0);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const net::ForwardTrace trace = net::forward(theta, spec, data.inputs.col(static_cast<Eigen::Index>(i)));
        net::Vector dz = net::softmax(trace.logits().col(0));
        if (data.heads[i] >= static_cast<std::size_t>(dz.size())) throw LabelError("label head index out of range");
        dz[static_cast<Eigen::Index>(data.heads[i])] -= 1.0;
        const net::Gradients g = net::backward(theta, spec, trace, dz);
        for (std::size_t k = 0; k < f.values.size(); ++k) f.values[k] += g.params[k] * g.params[k];
    }
    return f;
}

double prior_penalty(std::span<const double> theta, std::span<const double> theta_prev, const FisherDiag& fisher) {
    check_prior_layout(theta, theta_prev, fisher);
    double sum = 0.0;
    for (std::size_t k = 0; k < theta.size(); ++k) {
        const double d = theta[k] - theta_prev[k];
        sum += fisher.values[k] * d * d;
    }
    return sum;
}

HingeTerms hinge_terms(std::span<const double> s_in, std::span<const double> s_out, double tau) {
    HingeTerms h;
    for (double s : s_in) h.in += std::max(0.0, tau - s);
    for (double s : s_out) h.out += std::max(0.0, s - tau);
    return h;
}

LossAndGradient total_loss_and_grad(std::span<const double> theta, const net::NetworkSpec& spec,
                                    const scores::ScoreParams& phi, double tau_prev, const LabeledSet& in,
                                    const Matrix& out, const LossWeights& weights,
                                    std::span<const double> theta_prev, const FisherDiag& fisher) {
    if (static_cast<std::size_t>(in.inputs.cols()) != in.size()) throw ShapeError("labels do not match inputs");
    LossAndGradient r;
    r.grad.assign(theta.size(), 0.0);

    if (in.size() > 0) {
        const net::ForwardTrace trace = net::forward(theta, spec, in.inputs);
        Matrix dz(trace.logits().rows(), trace.logits().cols());
        for (std::size_t c = 0; c < in.size(); ++c) {
            const auto col = static_cast<Eigen::Index>(c);
            const net::Vector p = net::softmax(trace.logits().col(col));
            r.terms.l_class += net::cross_entropy(p, in.heads[c]);
            dz.col(col) = p;
            dz(static_cast<Eigen::Index>(in.heads[c]), col) -= 1.0;
        }
        accumulate(r.grad, net::backward(theta, spec, trace, dz).params);
    }

    if (!theta_prev.empty() || !fisher.values.empty()) {
        r.terms.l_prior = prior_penalty(theta, theta_prev, fisher);
        for (std::size_t k = 0; k < theta.size(); ++k) {
            r.grad[k] += weights.lambda_prior * 2.0 * fisher.values[k] * (theta[k] - theta_prev[k]);
        }
    }

    if (weights.lambda_ood != 0.0) {
        auto hinge = [&](const Matrix& inputs, bool in_distribution) {
            if (inputs.cols() == 0) return 0.0;
            const scores::ScoreEvaluation ev = scores::evaluate_scores(phi, theta, spec, inputs, true);
            Matrix upstream = Matrix::Zero(ev.dscore_dlogits.rows(), ev.dscore_dlogits.cols());
            double sum = 0.0;
            for (std::size_t c = 0; c < ev.scores.size(); ++c) {
                const double margin = in_distribution ? tau_prev - ev.scores[c] : ev.scores[c] - tau_prev;
                if (margin > 0.0) {
                    sum += margin;
                    const auto col = static_cast<Eigen::Index>(c);
                    upstream.col(col) = (in_distribution ? -1.0 : 1.0) * ev.dscore_dlogits.col(col);
                }
            }
            accumulate(r.grad, net::backward(theta, spec, ev.trace, upstream).params, weights.lambda_ood);
            return sum;
        };
        r.terms.l_hinge_in = hinge(in.inputs, true);
        r.terms.l_hinge_out = hinge(out, false);
    }

    r.terms.total = r.terms.l_class + weights.lambda_prior * r.terms.l_prior +
                    weights.lambda_ood * (r.terms.l_hinge_in + r.terms.l_hinge_out);
    return r;
}

EpochSummary continual_train_epoch(ParamVector& theta, const net::NetworkSpec& spec, const scores::ScoreParams& phi,
                                   double tau_prev, const LabeledSet& data, const Matrix& aux,
                                   std::span<const double> theta_prev, const FisherDiag& fisher,
                                   const EpochOptions& options, Rng& rng) {
    if (aux.cols() == 0) throw ConfigError("auxiliary out-of-distribution set is empty");
    if (options.batch_size == 0) throw ConfigError("mini-batch size must be at least 1");
    if (data.size() == 0) throw InsufficientDataError("no labeled samples to train on");

    EpochSummary summary;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    const auto n_aux = static_cast<std::size_t>(aux.cols());
    const double n = static_cast<double>(data.size());

    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
        const std::size_t len = std::min(options.batch_size, order.size() - start);
        const std::span<const std::size_t> idx(order.data() + start, len);

        LabeledSet batch;
        batch.inputs = gather(data.inputs, idx);
        batch.heads.reserve(len);
        for (std::size_t i : idx) batch.heads.push_back(data.heads[i]);

        std::vector<std::size_t> out_idx;
        if (n_aux >= len) {
            out_idx = rng.choose(n_aux, len);
        } else {
            out_idx.resize(len);
            for (auto& i : out_idx) i = rng.below(n_aux);
        }
        const Matrix out = gather(aux, out_idx);

        LossWeights w = options.weights;
        w.lambda_prior *= static_cast<double>(len) / n;
        const LossAndGradient lg = total_loss_and_grad(theta, spec, phi, tau_prev, batch, out, w, theta_prev, fisher);
        net::sgd_update(theta, lg.grad, options.lr);

        summary.terms.l_class += lg.terms.l_class;
        summary.terms.l_prior += lg.terms.l_prior * static_cast<double>(len) / n;
        summary.terms.l_hinge_in += lg.terms.l_hinge_in;
        summary.terms.l_hinge_out += lg.terms.l_hinge_out;
        summary.terms.total += lg.terms.total;
        ++summary.steps;
    }
    return summary;
}

Threshold update_threshold(std::span<const double> scores_ood, double eta) {
    if (scores_ood.empty()) throw InsufficientDataError("threshold calibration needs at least one OOD score");
    if (!(eta > 0.0 && eta <= 100.0)) throw ParameterError("eta must lie in (0, 100], got " + std::to_string(eta));
    std::vector<double> sorted(scores_ood.begin(), scores_ood.end());
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(sorted.size());
    std::size_t i = 0;
    while (static_cast<double>(i + 1) * 100.0 < eta * n) ++i;
    return {sorted[std::min(i, sorted.size() - 1)], eta};
}

scores::MahalanobisParams fit_mahalanobis_on(std::span<const double> theta, const net::NetworkSpec& spec,
                                             const LabeledSet& data, double ridge) {
    const Matrix logits = net::forward(theta, spec, data.inputs).logits();
    const std::size_t k = spec.output_width();
    std::vector<std::vector<std::size_t>> members(k);
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (data.heads[i] >= k) throw LabelError("label head index out of range");
        members[data.heads[i]].push_back(i);
    }
    std::vector<Matrix> grouped;
    grouped.reserve(k);
    for (const auto& m : members) grouped.push_back(gather(logits, m));
    return scores::fit_mahalanobis(grouped, ridge);
}

scores::OdinParams select_odin_params(std::span<const double> theta, const net::NetworkSpec& spec,
                                      const Matrix& in, const Matrix& aux, const OdinGrid& grid, double eta) {
    if (grid.temperatures.empty() || grid.epsilons.empty()) throw ConfigError("ODIN grid is empty");
    scores::OdinParams best{grid.temperatures.front(), grid.epsilons.front()};
    double best_rate = 2.0;
    for (double t : grid.temperatures) {
        for (double e : grid.epsilons) {
            const scores::OdinParams p{t, e};
            const std::vector<double> s_aux = scores::score_batch(p, theta, spec, aux);
            const double tau = update_threshold(s_aux, eta).tau;
            const std::vector<double> s_in = scores::score_batch(p, theta, spec, in);
            const auto flagged = std::count_if(s_in.begin(), s_in.end(), [tau](double s) { return s <= tau; });
            const double rate = s_in.empty() ? 0.0 : static_cast<double>(flagged) / static_cast<double>(s_in.size());
            if (rate < best_rate) {
                best_rate = rate;
                best = p;
            }
        }
    }
    return best;
}

} // namespace cad::train
