#include "cad/net.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cad/error.hpp"
#include "cad/rng.hpp"

namespace cad::net {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMajor> weights(std::span<const double> theta, const NetworkSpec& spec, std::size_t l) {
    return {theta.data() + spec.weight_offset(l), static_cast<Eigen::Index>(spec.widths[l + 1]),
            static_cast<Eigen::Index>(spec.widths[l])};
}

Eigen::Map<const Vector> bias(std::span<const double> theta, const NetworkSpec& spec, std::size_t l) {
    return {theta.data() + spec.bias_offset(l), static_cast<Eigen::Index>(spec.widths[l + 1])};
}

Matrix activate(Activation a, const Matrix& z) {
    switch (a) {
    case Activation::Tanh: return z.array().tanh().matrix();
    case Activation::Relu: return z.cwiseMax(0.0);
    case Activation::Linear: return z;
    }
    return z;
}

// d act / d pre, elementwise, expressed through the stored values.
Matrix activation_slope(Activation a, const Matrix& pre, const Matrix& post) {
    switch (a) {
    case Activation::Tanh: return (1.0 - post.array().square()).matrix();
    case Activation::Relu: return (pre.array() > 0.0).cast<double>().matrix();
    case Activation::Linear: return Matrix::Ones(pre.rows(), pre.cols());
    }
    return Matrix::Ones(pre.rows(), pre.cols());
}

void fill_uniform(std::span<double> out, double bound, Rng& rng) {
    for (double& v : out) v = rng.uniform(-bound, bound);
}

} // namespace

Activation parse_activation(std::string_view name) {
    if (name == "tanh") return Activation::Tanh;
    if (name == "relu") return Activation::Relu;
    if (name == "linear" || name == "identity") return Activation::Linear;
    throw ConfigError("unknown activation '" + std::string(name) + "' (expected tanh, relu or linear)");
}

std::string_view activation_name(Activation a) noexcept {
    switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    case Activation::Linear: return "linear";
    }
    return "linear";
}

std::size_t NetworkSpec::param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < layer_count(); ++l) n += widths[l] * widths[l + 1] + widths[l + 1];
    return n;
}

std::size_t NetworkSpec::weight_offset(std::size_t layer) const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < layer; ++l) n += widths[l] * widths[l + 1] + widths[l + 1];
    return n;
}

std::size_t NetworkSpec::bias_offset(std::size_t layer) const {
    return weight_offset(layer) + widths[layer] * widths[layer + 1];
}

Activation NetworkSpec::activation(std::size_t layer) const {
    return layer + 1 < layer_count() ? hidden[layer] : Activation::Linear;
}

void NetworkSpec::validate() const {
    if (widths.size() < 2) throw ShapeError("network needs at least an input and an output width");
    for (std::size_t w : widths) {
        if (w == 0) throw ShapeError("network widths must be positive");
    }
    if (hidden.size() != widths.size() - 2) {
        throw ShapeError("expected " + std::to_string(widths.size() - 2) + " hidden activations, got " +
                         std::to_string(hidden.size()));
    }
}

ParamVector init_params(const NetworkSpec& spec) {
    spec.validate();
    ParamVector theta(spec.param_count());
    for (std::size_t l = 0; l < spec.layer_count(); ++l) {
        Rng rng(derive_seed(spec.init_seed, l));
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.widths[l]));
        const std::size_t begin = spec.weight_offset(l);
        const std::size_t end = spec.bias_offset(l) + spec.widths[l + 1];
        fill_uniform(std::span<double>(theta).subspan(begin, end - begin), bound, rng);
    }
    return theta;
}

ForwardTrace forward(std::span<const double> theta, const NetworkSpec& spec, const Matrix& inputs,
                     std::size_t layers) {
    if (theta.size() != spec.param_count()) {
        throw ShapeError("parameter vector has " + std::to_string(theta.size()) + " entries, network needs " +
                         std::to_string(spec.param_count()));
    }
    if (static_cast<std::size_t>(inputs.rows()) != spec.input_width()) {
        throw ShapeError("input has width " + std::to_string(inputs.rows()) + ", network expects " +
                         std::to_string(spec.input_width()));
    }
    if (!inputs.allFinite()) throw ShapeError("input contains non-finite values");

    layers = std::min(layers, spec.layer_count());
    ForwardTrace trace;
    trace.pre.reserve(layers);
    trace.act.reserve(layers + 1);
    trace.act.push_back(inputs);
    for (std::size_t l = 0; l < layers; ++l) {
        Matrix z = weights(theta, spec, l) * trace.act.back();
        z.colwise() += bias(theta, spec, l);
        trace.act.push_back(activate(spec.activation(l), z));
        trace.pre.push_back(std::move(z));
    }
    return trace;
}

Vector logits(std::span<const double> theta, const NetworkSpec& spec, std::span<const double> x) {
    return forward(theta, spec, column(x)).logits().col(0);
}

Gradients backward(std::span<const double> theta, const NetworkSpec& spec, const ForwardTrace& trace,
                   const Matrix& dlogits) {
    const std::size_t L = spec.layer_count();
    if (trace.pre.size() != L || trace.act.size() != L + 1) {
        throw ShapeError("gradient requested from a partial forward trace");
    }
    if (dlogits.rows() != trace.logits().rows() || dlogits.cols() != trace.logits().cols()) {
        throw ShapeError("upstream gradient is " + std::to_string(dlogits.rows()) + "x" +
                         std::to_string(dlogits.cols()) + ", logits are " + std::to_string(trace.logits().rows()) +
                         "x" + std::to_string(trace.logits().cols()));
    }
    if (theta.size() != spec.param_count()) throw ShapeError("parameter vector does not match network");

    Gradients g;
    g.params.assign(spec.param_count(), 0.0);
    Matrix delta = dlogits;  // dL/d(act of layer l)
    for (std::size_t l = L; l-- > 0;) {
        delta.array() *= activation_slope(spec.activation(l), trace.pre[l], trace.act[l + 1]).array();
        Eigen::Map<RowMajor> gw(g.params.data() + spec.weight_offset(l),
                                static_cast<Eigen::Index>(spec.widths[l + 1]),
                                static_cast<Eigen::Index>(spec.widths[l]));
        Eigen::Map<Vector> gb(g.params.data() + spec.bias_offset(l), static_cast<Eigen::Index>(spec.widths[l + 1]));
        gw.noalias() = delta * trace.act[l].transpose();
        gb = delta.rowwise().sum();
        delta = weights(theta, spec, l).transpose() * delta;
    }
    g.inputs = std::move(delta);
    return g;
}

Vector softmax(const Vector& logits) {
    const double shift = logits.maxCoeff();
    Vector e = (logits.array() - shift).exp().matrix();
    return e / e.sum();
}

Matrix softmax_columns(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index c = 0; c < logits.cols(); ++c) out.col(c) = softmax(logits.col(c));
    return out;
}

double cross_entropy(const Vector& probs, std::size_t label) {
    if (label >= static_cast<std::size_t>(probs.size())) {
        throw LabelError("label index " + std::to_string(label) + " out of range for " +
                         std::to_string(probs.size()) + " classes");
    }
    return -std::log(std::max(probs[static_cast<Eigen::Index>(label)], kProbabilityFloor));
}

std::size_t argmax(const Vector& v) {
    std::size_t best = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i) {
        if (v[i] > v[static_cast<Eigen::Index>(best)]) best = static_cast<std::size_t>(i);
    }
    return best;
}

void sgd_update(ParamVector& theta, std::span<const double> grad, double lr) {
    if (grad.size() != theta.size()) throw ShapeError("gradient and parameters differ in length");
    for (std::size_t i = 0; i < grad.size(); ++i) {
        if (!std::isfinite(grad[i])) {
            throw DivergenceError("non-finite gradient at parameter " + std::to_string(i));
        }
    }
    for (std::size_t i = 0; i < grad.size(); ++i) theta[i] -= lr * grad[i];
}

ParamVector sgd_step(std::span<const double> theta, std::span<const double> grad, double lr) {
    ParamVector out(theta.begin(), theta.end());
    sgd_update(out, grad, lr);
    return out;
}

NetworkSpec with_output_width(const NetworkSpec& spec, std::size_t width) {
    NetworkSpec out = spec;
    out.widths.back() = width;
    return out;
}

ParamVector embed_params(const NetworkSpec& from, std::span<const double> values, const NetworkSpec& to,
                         double fill) {
    if (values.size() != from.param_count()) throw ShapeError("vector does not match source layout");
    if (from.widths.size() != to.widths.size() || from.output_width() > to.output_width() ||
        !std::equal(from.widths.begin(), from.widths.end() - 1, to.widths.begin())) {
        throw ShapeError("layouts differ in more than a grown output head");
    }
    ParamVector out(to.param_count(), fill);
    const std::size_t head = from.layer_count() - 1;
    const std::size_t body = from.weight_offset(head);
    std::copy_n(values.begin(), body, out.begin());
    const std::size_t w_len = from.widths[head] * from.output_width();
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(body), w_len,
                out.begin() + static_cast<std::ptrdiff_t>(to.weight_offset(head)));
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(from.bias_offset(head)), from.output_width(),
                out.begin() + static_cast<std::ptrdiff_t>(to.bias_offset(head)));
    return out;
}

ParamVector expand_head(const NetworkSpec& spec, std::span<const double> theta, std::size_t new_width,
                        std::uint64_t seed) {
    const NetworkSpec grown = with_output_width(spec, new_width);
    ParamVector out = embed_params(spec, theta, grown, 0.0);
    const std::size_t head = spec.layer_count() - 1;
    const std::size_t fan_in = spec.widths[head];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Rng rng(derive_seed(seed, new_width));
    for (std::size_t row = spec.output_width(); row < new_width; ++row) {
        fill_uniform(std::span<double>(out).subspan(grown.weight_offset(head) + row * fan_in, fan_in), bound, rng);
        out[grown.bias_offset(head) + row] = rng.uniform(-bound, bound);
    }
    return out;
}

Matrix to_matrix(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return {};
    Matrix m(static_cast<Eigen::Index>(rows.front().size()), static_cast<Eigen::Index>(rows.size()));
    for (std::size_t c = 0; c < rows.size(); ++c) {
        if (rows[c].size() != rows.front().size()) throw ShapeError("ragged feature vectors");
        m.col(static_cast<Eigen::Index>(c)) = Eigen::Map<const Vector>(rows[c].data(), m.rows());
    }
    return m;
}

Matrix column(std::span<const double> x) {
    return Eigen::Map<const Vector>(x.data(), static_cast<Eigen::Index>(x.size()));
}

} // namespace cad::net
