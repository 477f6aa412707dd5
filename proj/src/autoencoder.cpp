#include "cad/autoencoder.hpp"

#include <fstream>
#include <numeric>

#include <json.hpp>

#include "cad/error.hpp"
#include "cad/rng.hpp"

namespace cad::net {

namespace {

constexpr std::size_t kEncodeChunk = 512;

Matrix gather_columns(const Matrix& m, std::span<const std::size_t> idx) {
    Matrix out(m.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = m.col(static_cast<Eigen::Index>(idx[i]));
    return out;
}

} // namespace

EncoderParams train_autoencoder(const Matrix& raw, const AutoencoderOptions& options) {
    if (raw.cols() == 0) throw InsufficientDataError("autoencoder training set is empty");
    if (options.latent_dim == 0) throw ParameterError("latent_dim must be at least 1");
    if (options.batch_size == 0) throw ParameterError("batch_size must be at least 1");
    if (!(options.lr > 0.0)) throw ParameterError("learning rate must be positive");

    EncoderParams enc;
    enc.latent_dim = options.latent_dim;
    const auto d = static_cast<std::size_t>(raw.rows());
    enc.spec.widths.push_back(d);
    for (std::size_t h : options.hidden) {
        enc.spec.widths.push_back(h);
        enc.spec.hidden.push_back(options.activation);
    }
    enc.spec.widths.push_back(options.latent_dim);
    enc.spec.hidden.push_back(options.latent_activation);
    for (auto it = options.hidden.rbegin(); it != options.hidden.rend(); ++it) {
        enc.spec.widths.push_back(*it);
        enc.spec.hidden.push_back(options.activation);
    }
    enc.spec.widths.push_back(d);
    enc.spec.init_seed = derive_seed(options.seed, 0xAE);
    enc.encoder_layers = options.hidden.size() + 1;
    enc.params = init_params(enc.spec);

    enc.loss_history.push_back(reconstruction_error(enc, raw));

    Rng rng(derive_seed(options.seed, 0x5EED));
    std::vector<std::size_t> order(static_cast<std::size_t>(raw.cols()));
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
            const std::size_t len = std::min(options.batch_size, order.size() - start);
            const Matrix batch = gather_columns(raw, std::span(order).subspan(start, len));
            const ForwardTrace trace = forward(enc.params, enc.spec, batch);
            const Matrix residual = trace.logits() - batch;
            const Gradients g = backward(enc.params, enc.spec, trace, (2.0 / static_cast<double>(len)) * residual);
            sgd_update(enc.params, g.params, options.lr);
        }
        enc.loss_history.push_back(reconstruction_error(enc, raw));
    }
    return enc;
}

double reconstruction_error(const EncoderParams& enc, const Matrix& raw) {
    double total = 0.0;
    for (Eigen::Index start = 0; start < raw.cols(); start += kEncodeChunk) {
        const Eigen::Index len = std::min<Eigen::Index>(kEncodeChunk, raw.cols() - start);
        const Matrix chunk = raw.middleCols(start, len);
        total += (forward(enc.params, enc.spec, chunk).logits() - chunk).squaredNorm();
    }
    return total / static_cast<double>(raw.size());
}

Matrix encode_batch(const EncoderParams& enc, const Matrix& raw) {
    Matrix out(static_cast<Eigen::Index>(enc.latent_dim), raw.cols());
    for (Eigen::Index start = 0; start < raw.cols(); start += kEncodeChunk) {
        const Eigen::Index len = std::min<Eigen::Index>(kEncodeChunk, raw.cols() - start);
        out.middleCols(start, len) = forward(enc.params, enc.spec, raw.middleCols(start, len), enc.encoder_layers).logits();
    }
    return out;
}

Vector encode(const EncoderParams& enc, std::span<const double> raw) {
    return encode_batch(enc, column(raw)).col(0);
}

void save_encoder(const EncoderParams& enc, const std::filesystem::path& path) {
    nlohmann::json j;
    j["widths"] = enc.spec.widths;
    std::vector<std::string> acts;
    for (Activation a : enc.spec.hidden) acts.emplace_back(activation_name(a));
    j["activations"] = acts;
    j["init_seed"] = enc.spec.init_seed;
    j["encoder_layers"] = enc.encoder_layers;
    j["latent_dim"] = enc.latent_dim;
    j["loss_history"] = enc.loss_history;
    j["params"] = enc.params;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write encoder file " + path.string());
    out << j.dump() << '\n';
}

EncoderParams load_encoder(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read encoder file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("encoder file " + path.string() + ": " + e.what());
    }
    EncoderParams enc;
    enc.spec.widths = j.at("widths").get<std::vector<std::size_t>>();
    for (const auto& a : j.at("activations")) enc.spec.hidden.push_back(parse_activation(a.get<std::string>()));
    enc.spec.init_seed = j.at("init_seed").get<std::uint64_t>();
    enc.encoder_layers = j.at("encoder_layers").get<std::size_t>();
    enc.latent_dim = j.at("latent_dim").get<std::size_t>();
    enc.loss_history = j.at("loss_history").get<std::vector<double>>();
    enc.params = j.at("params").get<ParamVector>();
    enc.spec.validate();
    if (enc.params.size() != enc.spec.param_count()) throw FormatError("encoder parameter count mismatch");
    return enc;
}

} // namespace cad::net
