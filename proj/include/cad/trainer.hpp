#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cad/net.hpp"
#include "cad/rng.hpp"
#include "cad/scores.hpp"

namespace cad::train {

using net::Matrix;
using net::ParamVector;

/// Labeled inputs (one per column) with labels given as output-head indices.
struct LabeledSet {
    Matrix inputs;
    std::vector<std::size_t> heads;

    std::size_t size() const noexcept { return heads.size(); }
};

struct ContinualLossTerms {
    double l_class = 0.0;
    double l_prior = 0.0;
    double l_hinge_in = 0.0;
    double l_hinge_out = 0.0;
    double total = 0.0;
};

struct FisherDiag {
    std::vector<double> values;
};

struct Threshold {
    double tau = 0.0;
    double eta = 80.0;
};

struct HingeTerms {
    double in = 0.0;
    double out = 0.0;
};

struct LossWeights {
    double lambda_ood = 1.0;
    double lambda_prior = 1.0;
};

/// Empirical Fisher: F_k = sum over D of (d CE / d theta_k)^2, i.e. |D| times
/// the mean squared per-sample gradient.
FisherDiag fisher_diagonal(std::span<const double> theta, const net::NetworkSpec& spec, const LabeledSet& data);

/// sum_k F_k (theta_k - theta_prev_k)^2.
double prior_penalty(std::span<const double> theta, std::span<const double> theta_prev, const FisherDiag& fisher);

/// in = sum max(0, tau - s) over in-distribution scores, out = sum max(0, s - tau)
/// over auxiliary OOD scores.
HingeTerms hinge_terms(std::span<const double> s_in, std::span<const double> s_out, double tau);

struct LossAndGradient {
    ContinualLossTerms terms;
    ParamVector grad;
};

/// Joint objective: sum CE over `in` + lambda_prior * prior + lambda_ood * (hinge_in + hinge_out).
/// `theta_prev`/`fisher` may be empty, which disables the prior. Score
/// parameters and the threshold are held fixed; the ODIN perturbation is a
/// constant with respect to theta.
LossAndGradient total_loss_and_grad(std::span<const double> theta, const net::NetworkSpec& spec,
                                    const scores::ScoreParams& phi, double tau_prev, const LabeledSet& in,
                                    const Matrix& out, const LossWeights& weights,
                                    std::span<const double> theta_prev, const FisherDiag& fisher);

struct EpochOptions {
    double lr = 0.002;
    std::size_t batch_size = 64;
    LossWeights weights;
};

struct EpochSummary {
    ContinualLossTerms terms;  // accumulated over the epoch's mini-batches
    std::size_t steps = 0;
};

/// One pass over `data` in shuffled mini-batches. Each mini-batch is paired
/// with an equally sized draw from `aux` (without replacement when |aux| is
/// large enough, with replacement otherwise). The prior is weighted by
/// |batch| / |data| per step so a full epoch applies it once.
EpochSummary continual_train_epoch(ParamVector& theta, const net::NetworkSpec& spec, const scores::ScoreParams& phi,
                                   double tau_prev, const LabeledSet& data, const Matrix& aux,
                                   std::span<const double> theta_prev, const FisherDiag& fisher,
                                   const EpochOptions& options, Rng& rng);

/// Smallest observed score v with #{s <= v} / N >= eta / 100.
Threshold update_threshold(std::span<const double> scores_ood, double eta);

/// Class-conditional statistics of the logits of `data`.
scores::MahalanobisParams fit_mahalanobis_on(std::span<const double> theta, const net::NetworkSpec& spec,
                                             const LabeledSet& data, double ridge);

struct OdinGrid {
    std::vector<double> temperatures{1.0, 10.0, 100.0, 1000.0};
    std::vector<double> epsilons{0.0, 0.0005, 0.001, 0.002, 0.005};
};

/// Grid point whose eta-calibrated threshold on `aux` flags the fewest
/// in-distribution samples. Ties go to the earliest point (temperature-major).
scores::OdinParams select_odin_params(std::span<const double> theta, const net::NetworkSpec& spec,
                                      const Matrix& in, const Matrix& aux, const OdinGrid& grid, double eta);

} // namespace cad::train
