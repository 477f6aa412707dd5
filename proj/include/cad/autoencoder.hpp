#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cad/net.hpp"

namespace cad::net {

struct AutoencoderOptions {
    std::size_t latent_dim = 4;
    std::vector<std::size_t> hidden{256, 64};  // encoder side; the decoder mirrors it
    Activation activation = Activation::Tanh;
    Activation latent_activation = Activation::Linear;
    std::size_t epochs = 40;
    double lr = 0.01;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
};

/// A trained autoencoder. The encoder is the first `encoder_layers` layers of
/// `spec`; its last layer outputs the latent code.
struct EncoderParams {
    NetworkSpec spec;
    ParamVector params;
    std::size_t encoder_layers = 0;
    std::size_t latent_dim = 0;
    std::vector<double> loss_history;  // [0] before training, then one entry per epoch
};

/// Mini-batch SGD on the mean squared reconstruction error. `raw` holds one
/// sample per column.
EncoderParams train_autoencoder(const Matrix& raw, const AutoencoderOptions& options);

/// Mean over samples and coordinates of the squared reconstruction error.
double reconstruction_error(const EncoderParams& enc, const Matrix& raw);

Vector encode(const EncoderParams& enc, std::span<const double> raw);
Matrix encode_batch(const EncoderParams& enc, const Matrix& raw);

void save_encoder(const EncoderParams& enc, const std::filesystem::path& path);
EncoderParams load_encoder(const std::filesystem::path& path);

} // namespace cad::net
