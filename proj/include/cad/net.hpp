#pragma once

// Dense feed-forward network with hand-written backpropagation.
//
// Parameters live in one flat vector. Layer l occupies
//   [weights: fan_out x fan_in, row-major][bias: fan_out]
// and layers are stored in order, so the output head is the tail of the vector.
// Inputs and activations are matrices with one sample per column.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace cad::net {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using ParamVector = std::vector<double>;

enum class Activation { Tanh, Relu, Linear };

Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation a) noexcept;

struct NetworkSpec {
    std::vector<std::size_t> widths;   // input width first, output width last
    std::vector<Activation> hidden;    // one per hidden layer; the output layer is linear
    std::uint64_t init_seed = 0;

    std::size_t layer_count() const noexcept { return widths.empty() ? 0 : widths.size() - 1; }
    std::size_t input_width() const { return widths.front(); }
    std::size_t output_width() const { return widths.back(); }
    std::size_t param_count() const;
    std::size_t weight_offset(std::size_t layer) const;
    std::size_t bias_offset(std::size_t layer) const;
    Activation activation(std::size_t layer) const;

    /// Throws ShapeError when the invariants (>= 2 widths, all >= 1, one
    /// activation per hidden layer) do not hold.
    void validate() const;

    bool operator==(const NetworkSpec&) const = default;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases. Layer l
/// draws from its own stream derive_seed(init_seed, l).
ParamVector init_params(const NetworkSpec& spec);

struct ForwardTrace {
    std::vector<Matrix> pre;   // pre-activation of each computed layer
    std::vector<Matrix> act;   // act[0] = inputs, act[l + 1] = output of layer l

    const Matrix& inputs() const { return act.front(); }
    const Matrix& logits() const { return act.back(); }
};

/// Runs the first `layers` layers (all of them by default).
ForwardTrace forward(std::span<const double> theta, const NetworkSpec& spec, const Matrix& inputs,
                     std::size_t layers = static_cast<std::size_t>(-1));

/// Logits for a single input vector.
Vector logits(std::span<const double> theta, const NetworkSpec& spec, std::span<const double> x);

struct Gradients {
    ParamVector params;  // summed over the columns of the upstream gradient
    Matrix inputs;       // one column per sample
};

/// Exact gradients of sum_c <dlogits[:, c], logits[:, c]> with respect to theta
/// and the inputs. The trace must come from a full forward pass.
Gradients backward(std::span<const double> theta, const NetworkSpec& spec, const ForwardTrace& trace,
                   const Matrix& dlogits);

Vector softmax(const Vector& logits);
Matrix softmax_columns(const Matrix& logits);

inline constexpr double kProbabilityFloor = 1e-12;

/// -log(max(probs[label], 1e-12)).
double cross_entropy(const Vector& probs, std::size_t label);

/// Index of the largest element; the lowest index wins ties.
std::size_t argmax(const Vector& v);

/// theta - lr * grad. Throws DivergenceError if the gradient is not finite.
ParamVector sgd_step(std::span<const double> theta, std::span<const double> grad, double lr);
void sgd_update(ParamVector& theta, std::span<const double> grad, double lr);

/// Same network with a different output width.
NetworkSpec with_output_width(const NetworkSpec& spec, std::size_t width);

/// Grows the output head to `new_width` rows. Existing rows are copied
/// verbatim; new rows get the usual init drawn from derive_seed(seed, new_width).
ParamVector expand_head(const NetworkSpec& spec, std::span<const double> theta, std::size_t new_width,
                        std::uint64_t seed);

/// Maps a vector laid out for `from` into the layout of `to` (which may only
/// differ in output width), writing `fill` into coordinates of new head rows.
ParamVector embed_params(const NetworkSpec& from, std::span<const double> values, const NetworkSpec& to,
                         double fill);

Matrix to_matrix(const std::vector<std::vector<double>>& rows);
Matrix column(std::span<const double> x);

} // namespace cad::net
